//! Model file container.
//!
//! Layout: magic `FADM`, format version (u32 LE), header length (u64 LE),
//! a JSON header describing config, shapes, normalization and provenance,
//! then the raw parameter tensors as f64 LE in canonical order (per layer:
//! weights row-major, then bias). Files are byte-deterministic for a given
//! model; training wall time deliberately stays out of the file.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::net::Autoencoder;
use super::{Activation, AutoencoderConfig, Normalization, Provenance, TrainedModel};

const MAGIC: &[u8; 4] = b"FADM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    BadVersion(u32),
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("payload length mismatch: expected {expected} parameter bytes, got {got}")]
    BadPayload { expected: usize, got: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_id: String,
    config: AutoencoderConfig,
    n_metrics: usize,
    widths: Vec<usize>,
    activation: Activation,
    normalization: Option<Normalization>,
    provenance: Provenance,
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), FormatError> {
    let header = Header {
        model_id: model.id.clone(),
        config: model.config.clone(),
        n_metrics: model.n_metrics,
        widths: model.net.widths().to_vec(),
        activation: model.net.activation(),
        provenance: model.provenance.clone(),
        normalization: model.normalization.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&model.net.param_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, FormatError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let n_params: usize = header
        .widths
        .windows(2)
        .map(|pair| pair[1] * pair[0] + pair[1])
        .sum();
    if payload.len() != n_params * 8 {
        return Err(FormatError::BadPayload {
            expected: n_params * 8,
            got: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));

    let mut weights = Vec::with_capacity(header.widths.len() - 1);
    let mut biases = Vec::with_capacity(header.widths.len() - 1);
    for pair in header.widths.windows(2) {
        let (rows, cols) = (pair[1], pair[0]);
        weights.push((&mut values).take(rows * cols).collect::<Vec<f64>>());
        biases.push((&mut values).take(rows).collect::<Vec<f64>>());
    }
    let net = Autoencoder::from_parts(header.widths, weights, biases, header.activation);

    Ok(TrainedModel {
        id: header.model_id,
        config: header.config,
        n_metrics: header.n_metrics,
        net,
        normalization: header.normalization,
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use tempfile::TempDir;

    fn sample_model(seed: u64) -> TrainedModel {
        let cfg = AutoencoderConfig {
            window_size: 4,
            num_layers: 2,
            hidden_size: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            max_epochs: 10,
            transfer_max_epochs: 5,
            early_stopping: true,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-3,
            activation: Activation::Tanh,
            seed,
        };
        let mut model = init_model(&cfg, 2, seed).unwrap();
        model.id = format!("model-{seed}");
        model.normalization = Some(Normalization {
            mins: vec![0.0, -1.0],
            maxs: vec![1.0, 2.0],
        });
        model.provenance.strategy = "mpd".to_string();
        model.provenance.epochs_run = 7;
        model.provenance.final_train_loss = Some(0.01);
        model.provenance.wall_time = Some(std::time::Duration::from_millis(123));
        model
    }

    #[test]
    fn roundtrip_preserves_everything_but_wall_time() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.fadm");
        let model = sample_model(5);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.param_bytes(), model.param_bytes());
        assert_eq!(loaded.id, model.id);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.normalization, model.normalization);
        assert_eq!(loaded.provenance.epochs_run, 7);
        assert_eq!(loaded.provenance.wall_time, None);
    }

    #[test]
    fn files_are_byte_deterministic() {
        let dir = TempDir::new().unwrap();
        let a = dir.path().join("a.fadm");
        let b = dir.path().join("b.fadm");
        let mut model = sample_model(5);
        save_model(&model, &a).unwrap();
        // A different wall time must not change the bytes.
        model.provenance.wall_time = Some(std::time::Duration::from_secs(9));
        save_model(&model, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_model(&path), Err(FormatError::BadMagic)));

        let good = dir.path().join("good.fadm");
        save_model(&sample_model(1), &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let truncated = dir.path().join("trunc.fadm");
        std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_model(&truncated),
            Err(FormatError::BadPayload { .. })
        ));
    }
}

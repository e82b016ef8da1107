//! Dataset ingestion, metric selection, scaling, and window framing.
//!
//! Devices arrive as plain-text files of comma-separated rows, one row per
//! timestep. Everything downstream works on the transposed view: an `M x T`
//! matrix with one row per metric.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("ragged rows in {path}: row {row} has {got} columns, expected {expected}")]
    RaggedRows {
        path: PathBuf,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-numeric value `{value}` in {path} at row {row}, column {col}")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("missing value in {path} at row {row}, column {col} (policy: reject)")]
    MissingValue {
        path: PathBuf,
        row: usize,
        col: usize,
    },
    #[error("label count mismatch for {device}: {got} labels for {expected} test rows")]
    LabelMismatch {
        device: String,
        got: usize,
        expected: usize,
    },
    #[error("label `{value}` in {path} is not 0 or 1")]
    BadLabel { path: PathBuf, value: String },
    #[error("devices disagree on metric count: {0}")]
    HeterogeneousSchema(String),
    #[error("metric selection dropped every candidate")]
    EmptySelection,
    #[error("top_n {top_n} out of range for {m} metrics")]
    TopNOutOfRange { top_n: usize, m: usize },
    #[error("window length {w} exceeds series length {t}")]
    WindowTooLong { w: usize, t: usize },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("{0}")]
    Invalid(String),
}

/// Dense row-major matrix; rows are metrics, columns are timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols, "matrix data length mismatch");
        Self {
            n_rows,
            n_cols,
            data,
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::new(n_rows, n_cols, vec![0.0; n_rows * n_cols])
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n_cols + c] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-device dataset: training matrix plus optional labeled test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: String,
    pub metric_names: Vec<String>,
    /// `M x T_train`, no missing values.
    pub train: Matrix,
    pub test: Option<Matrix>,
    /// One 0/1 label per test timestep.
    pub test_labels: Option<Vec<u8>>,
    /// Gaps forward-filled during ingestion (0 under the `reject` policy).
    pub gaps_filled: usize,
}

impl DeviceDataset {
    pub fn n_metrics(&self) -> usize {
        self.train.n_rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    SmdLike,
    SingleDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    Reject,
    ForwardFill,
}

/// Read every device under `root` and return the datasets sorted by id.
///
/// The SMD-like layout expects `train/`, and optionally `test/` and
/// `test_label/`, each holding one `<device>.txt` per device. A test file
/// without a matching label file is an error; the reverse is too.
pub fn ingest_dataset(
    root: &Path,
    layout: Layout,
    missing: MissingPolicy,
) -> Result<Vec<DeviceDataset>, DataError> {
    let train_dir = match layout {
        Layout::SmdLike => root.join("train"),
        Layout::SingleDir => root.to_path_buf(),
    };
    let mut device_files = list_txt_files(&train_dir)?;
    if device_files.is_empty() {
        return Err(DataError::MissingFile(format!(
            "no device files in {}",
            train_dir.display()
        )));
    }
    device_files.sort();

    let mut datasets = Vec::with_capacity(device_files.len());
    for path in device_files {
        let device_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (train, gaps_filled) = read_matrix(&path, missing)?;

        let (test, test_labels) = match layout {
            Layout::SingleDir => (None, None),
            Layout::SmdLike => {
                let test_path = root.join("test").join(format!("{device_id}.txt"));
                let label_path = root.join("test_label").join(format!("{device_id}.txt"));
                match (test_path.exists(), label_path.exists()) {
                    (false, false) => (None, None),
                    (true, false) => {
                        return Err(DataError::MissingFile(format!(
                            "{} has a test split but no label file",
                            device_id
                        )))
                    }
                    (false, true) => {
                        return Err(DataError::MissingFile(format!(
                            "{} has labels but no test split",
                            device_id
                        )))
                    }
                    (true, true) => {
                        let (test, _) = read_matrix(&test_path, missing)?;
                        let labels = read_labels(&label_path)?;
                        if labels.len() != test.n_cols() {
                            return Err(DataError::LabelMismatch {
                                device: device_id.clone(),
                                got: labels.len(),
                                expected: test.n_cols(),
                            });
                        }
                        (Some(test), Some(labels))
                    }
                }
            }
        };

        if let Some(test) = &test {
            if test.n_rows() != train.n_rows() {
                return Err(DataError::HeterogeneousSchema(format!(
                    "{device_id}: train has {} metrics, test has {}",
                    train.n_rows(),
                    test.n_rows()
                )));
            }
        }

        let metric_names = (0..train.n_rows()).map(|m| format!("m{m:02}")).collect();
        datasets.push(DeviceDataset {
            device_id,
            metric_names,
            train,
            test,
            test_labels,
            gaps_filled,
        });
    }
    Ok(datasets)
}

fn list_txt_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "txt") {
            files.push(path);
        }
    }
    Ok(files)
}

/// Parse a comma-separated file into an `M x T` matrix (transposing from the
/// row-per-timestep on-disk form). Returns the matrix and how many gaps were
/// forward-filled.
fn read_matrix(path: &Path, missing: MissingPolicy) -> Result<(Matrix, usize), DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut n_cols = None;
    for (row_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let cell = cell.trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                    path: path.to_path_buf(),
                    row: row_idx,
                    col: row.len(),
                    value: cell.to_string(),
                })?;
                row.push(Some(v));
            }
        }
        match n_cols {
            None => n_cols = Some(row.len()),
            Some(expected) if expected != row.len() => {
                return Err(DataError::RaggedRows {
                    path: path.to_path_buf(),
                    row: row_idx,
                    got: row.len(),
                    expected,
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    let m = n_cols.unwrap_or(0);
    let t = rows.len();
    if t == 0 || m == 0 {
        return Err(DataError::MissingFile(format!(
            "{} is empty",
            path.display()
        )));
    }

    let mut matrix = Matrix::zeros(m, t);
    let mut gaps_filled = 0;
    for (t_idx, row) in rows.iter().enumerate() {
        for (m_idx, cell) in row.iter().enumerate() {
            match cell {
                Some(v) => matrix.set(m_idx, t_idx, *v),
                None => match missing {
                    MissingPolicy::Reject => {
                        return Err(DataError::MissingValue {
                            path: path.to_path_buf(),
                            row: t_idx,
                            col: m_idx,
                        })
                    }
                    MissingPolicy::ForwardFill => {
                        if t_idx == 0 {
                            return Err(DataError::MissingValue {
                                path: path.to_path_buf(),
                                row: t_idx,
                                col: m_idx,
                            });
                        }
                        let prev = matrix.get(m_idx, t_idx - 1);
                        matrix.set(m_idx, t_idx, prev);
                        gaps_filled += 1;
                    }
                },
            }
        }
    }
    Ok((matrix, gaps_filled))
}

fn read_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut labels = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(DataError::BadLabel {
                    path: path.to_path_buf(),
                    value: other.to_string(),
                })
            }
        }
    }
    Ok(labels)
}

/// Write datasets back out in the SMD-like layout. Values use the shortest
/// decimal form that round-trips, so ingesting the output reproduces the
/// numeric content bit for bit.
pub fn write_dataset(datasets: &[DeviceDataset], root: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DataError::Io { path, source }
    };
    for sub in ["train", "test", "test_label"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for ds in datasets {
        let train_path = root.join("train").join(format!("{}.txt", ds.device_id));
        fs::write(&train_path, format_matrix(&ds.train)).map_err(io_err(&train_path))?;
        if let (Some(test), Some(labels)) = (&ds.test, &ds.test_labels) {
            let test_path = root.join("test").join(format!("{}.txt", ds.device_id));
            fs::write(&test_path, format_matrix(test)).map_err(io_err(&test_path))?;
            let label_path = root
                .join("test_label")
                .join(format!("{}.txt", ds.device_id));
            let mut text = String::with_capacity(labels.len() * 2);
            for l in labels {
                let _ = writeln!(text, "{l}");
            }
            fs::write(&label_path, text).map_err(io_err(&label_path))?;
        }
    }
    Ok(())
}

fn format_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    for t in 0..m.n_cols() {
        for r in 0..m.n_rows() {
            if r > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m.get(r, t));
        }
        out.push('\n');
    }
    out
}

// --- Metric selection -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MetricStatus {
    Kept,
    LowVariance,
    AllZeroMajority,
    CollinearWith(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRationale {
    pub index: usize,
    pub name: String,
    pub variance_of_mean: f64,
    pub status: MetricStatus,
}

/// The representative metric subset used for clustering, with the reason
/// every metric was kept or dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSubset {
    /// Kept metric indices, ordered by descending variance of mean.
    pub indices: Vec<usize>,
    /// One entry per metric, in index order.
    pub rationale: Vec<MetricRationale>,
}

fn require_shared_schema(datasets: &[DeviceDataset]) -> Result<usize, DataError> {
    let m = datasets
        .first()
        .ok_or_else(|| DataError::Invalid("no datasets".into()))?
        .n_metrics();
    for ds in datasets {
        if ds.n_metrics() != m {
            return Err(DataError::HeterogeneousSchema(format!(
                "{} has {} metrics, expected {m}",
                ds.device_id,
                ds.n_metrics()
            )));
        }
    }
    Ok(m)
}

/// Datasets in device-id order, so reductions over devices do not depend on
/// input order (float sums are not associative).
fn by_device_id(datasets: &[DeviceDataset]) -> Vec<&DeviceDataset> {
    let mut refs: Vec<&DeviceDataset> = datasets.iter().collect();
    refs.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    refs
}

/// Population variance, over devices, of each metric's per-device train mean.
pub fn variance_of_mean(datasets: &[DeviceDataset]) -> Result<Vec<f64>, DataError> {
    let m = require_shared_schema(datasets)?;
    let ordered = by_device_id(datasets);
    let n = ordered.len() as f64;
    let mut out = Vec::with_capacity(m);
    for metric in 0..m {
        let means: Vec<f64> = ordered.iter().map(|ds| mean(ds.train.row(metric))).collect();
        let grand = means.iter().sum::<f64>() / n;
        let var = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / n;
        out.push(var);
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Select the representative metrics: rank by variance of mean, keep the top
/// `top_n`, drop metrics that are all-zero in more than `zero_fraction_limit`
/// of devices, then drop the lower-ranked member of every collinear pair
/// (|Pearson r| >= `collinearity_threshold` on pooled range-scaled data).
pub fn select_metrics(
    datasets: &[DeviceDataset],
    top_n: usize,
    zero_fraction_limit: f64,
    collinearity_threshold: f64,
) -> Result<MetricSubset, DataError> {
    let m = require_shared_schema(datasets)?;
    if top_n == 0 || top_n > m {
        return Err(DataError::TopNOutOfRange { top_n, m });
    }
    let vom = variance_of_mean(datasets)?;

    let mut ranked: Vec<usize> = (0..m).collect();
    // Descending variance of mean; ties by index for determinism.
    ranked.sort_by(|&a, &b| {
        vom[b]
            .partial_cmp(&vom[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let candidates: Vec<usize> = ranked[..top_n].to_vec();

    let mut status: Vec<MetricStatus> = (0..m).map(|_| MetricStatus::LowVariance).collect();

    // All-zero majority filter.
    let n_devices = datasets.len() as f64;
    let mut survivors = Vec::new();
    for &idx in &candidates {
        let zero_devices = datasets
            .iter()
            .filter(|ds| ds.train.row(idx).iter().all(|&v| v == 0.0))
            .count() as f64;
        if zero_devices / n_devices > zero_fraction_limit {
            status[idx] = MetricStatus::AllZeroMajority;
        } else {
            survivors.push(idx);
        }
    }

    // Collinearity filter on pooled range-scaled train data. Walking in rank
    // order keeps the higher-variance member of each collinear pair.
    let ordered = by_device_id(datasets);
    let scaled: Vec<Vec<f64>> = survivors
        .iter()
        .map(|&idx| pooled_scaled_column(&ordered, idx))
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_cols: Vec<&Vec<f64>> = Vec::new();
    for (pos, &idx) in survivors.iter().enumerate() {
        let col = &scaled[pos];
        let clash = kept
            .iter()
            .zip(&kept_cols)
            .find(|(_, kept_col)| pearson(col, kept_col).abs() >= collinearity_threshold);
        match clash {
            Some((&with, _)) => status[idx] = MetricStatus::CollinearWith(with),
            None => {
                kept.push(idx);
                kept_cols.push(col);
                status[idx] = MetricStatus::Kept;
            }
        }
    }

    if kept.is_empty() {
        return Err(DataError::EmptySelection);
    }

    let names = &datasets[0].metric_names;
    let rationale = (0..m)
        .map(|idx| MetricRationale {
            index: idx,
            name: names[idx].clone(),
            variance_of_mean: vom[idx],
            status: status[idx].clone(),
        })
        .collect();
    Ok(MetricSubset {
        indices: kept,
        rationale,
    })
}

/// One metric's train values pooled over all devices, divided by the global
/// range so no device dominates the correlation.
fn pooled_scaled_column(datasets: &[&DeviceDataset], idx: usize) -> Vec<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for ds in datasets {
        for &v in ds.train.row(idx) {
            min = min.min(v);
            max = max.max(v);
        }
    }
    let range = max - min;
    let scale = if range > 0.0 { 1.0 / range } else { 0.0 };
    datasets
        .iter()
        .flat_map(|ds| ds.train.row(idx).iter().map(move |&v| v * scale))
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

// --- Range scaling -----------------------------------------------------------

/// The fleet's train data restricted to the kept metrics and scaled by each
/// metric's global range.
#[derive(Debug, Clone)]
pub struct ScaledFleet {
    pub device_ids: Vec<String>,
    /// Kept metric indices, matching the row order of `data`.
    pub metric_indices: Vec<usize>,
    /// One `H x T_train` matrix per device.
    pub data: Vec<Matrix>,
    /// Metrics whose global range was zero; their rows are all zeros.
    pub degenerate: Vec<bool>,
}

/// Divide every value of each kept metric by that metric's global
/// (cross-device) range. With `full_minmax` the global minimum is subtracted
/// first. Metrics with zero range map to all-zeros and are flagged.
pub fn scale_by_range(
    datasets: &[DeviceDataset],
    subset: &MetricSubset,
    full_minmax: bool,
) -> Result<ScaledFleet, DataError> {
    require_shared_schema(datasets)?;
    if subset.indices.is_empty() {
        return Err(DataError::EmptySelection);
    }
    let h = subset.indices.len();
    let mut mins = vec![f64::INFINITY; h];
    let mut maxs = vec![f64::NEG_INFINITY; h];
    for ds in datasets {
        for (row, &idx) in subset.indices.iter().enumerate() {
            for &v in ds.train.row(idx) {
                mins[row] = mins[row].min(v);
                maxs[row] = maxs[row].max(v);
            }
        }
    }
    let degenerate: Vec<bool> = mins.iter().zip(&maxs).map(|(lo, hi)| hi <= lo).collect();

    let data = datasets
        .iter()
        .map(|ds| {
            let t = ds.train.n_cols();
            let mut out = Matrix::zeros(h, t);
            for (row, &idx) in subset.indices.iter().enumerate() {
                if degenerate[row] {
                    continue; // stays zero
                }
                let range = maxs[row] - mins[row];
                let offset = if full_minmax { mins[row] } else { 0.0 };
                let dst = out.row_mut(row);
                for (d, &v) in dst.iter_mut().zip(ds.train.row(idx)) {
                    *d = (v - offset) / range;
                }
            }
            out
        })
        .collect();

    Ok(ScaledFleet {
        device_ids: datasets.iter().map(|d| d.device_id.clone()).collect(),
        metric_indices: subset.indices.clone(),
        data,
        degenerate,
    })
}

// --- Windows -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Sliding windows over one device's series, each flattened metric-major to
/// a vector of length `n_metrics * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub n_metrics: usize,
    pub w: usize,
    pub stride: usize,
    count: usize,
    data: Vec<f64>,
}

impl WindowSet {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.n_metrics * self.w
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.count).map(move |i| self.window(i))
    }

    /// Starting timestep of window `i` in the source series.
    pub fn start_of(&self, i: usize) -> usize {
        i * self.stride
    }

    pub fn from_windows(n_metrics: usize, w: usize, stride: usize, windows: &[&[f64]]) -> Self {
        let dim = n_metrics * w;
        let mut data = Vec::with_capacity(windows.len() * dim);
        for win in windows {
            assert_eq!(win.len(), dim, "window length mismatch");
            data.extend_from_slice(win);
        }
        Self {
            n_metrics,
            w,
            stride,
            count: windows.len(),
            data,
        }
    }

    /// New set containing the windows at `indices`, preserving order.
    pub fn take(&self, indices: &[usize]) -> Self {
        let windows: Vec<&[f64]> = indices.iter().map(|&i| self.window(i)).collect();
        Self::from_windows(self.n_metrics, self.w, self.stride, &windows)
    }

    /// Concatenate several window sets with identical framing.
    pub fn concat(sets: &[&WindowSet]) -> Self {
        let first = sets.first().expect("at least one window set");
        let mut out = Self {
            n_metrics: first.n_metrics,
            w: first.w,
            stride: first.stride,
            count: 0,
            data: Vec::new(),
        };
        for s in sets {
            assert_eq!(s.dim(), out.dim(), "window dimension mismatch");
            out.count += s.count;
            out.data.extend_from_slice(&s.data);
        }
        out
    }
}

/// Frame sliding windows of length `w` and the given stride over a split.
/// Window `i` covers timesteps `[i*stride, i*stride + w)`.
pub fn make_windows(
    dataset: &DeviceDataset,
    split: Split,
    w: usize,
    stride: usize,
) -> Result<WindowSet, DataError> {
    let matrix = match split {
        Split::Train => &dataset.train,
        Split::Test => dataset
            .test
            .as_ref()
            .ok_or_else(|| DataError::MissingFile(format!("{} has no test split", dataset.device_id)))?,
    };
    windows_of(matrix, w, stride)
}

pub fn windows_of(matrix: &Matrix, w: usize, stride: usize) -> Result<WindowSet, DataError> {
    if stride == 0 {
        return Err(DataError::ZeroStride);
    }
    let t = matrix.n_cols();
    if w == 0 || w > t {
        return Err(DataError::WindowTooLong { w, t });
    }
    let count = (t - w) / stride + 1;
    let m = matrix.n_rows();
    let mut data = Vec::with_capacity(count * m * w);
    for i in 0..count {
        let start = i * stride;
        for r in 0..m {
            data.extend_from_slice(&matrix.row(r)[start..start + w]);
        }
    }
    Ok(WindowSet {
        n_metrics: m,
        w,
        stride,
        count,
        data,
    })
}

// --- Metric subset report ----------------------------------------------------

impl MetricSubset {
    /// Key-value text report, one line per metric plus a `kept=` header.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let kept: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "kept={}", kept.join(","));
        for r in &self.rationale {
            let status = match &r.status {
                MetricStatus::Kept => "kept".to_string(),
                MetricStatus::LowVariance => "low_variance".to_string(),
                MetricStatus::AllZeroMajority => "all_zero_majority".to_string(),
                MetricStatus::CollinearWith(i) => format!("collinear_with:{i}"),
            };
            let _ = writeln!(
                out,
                "metric={} name={} variance_of_mean={:.16e} status={}",
                r.index, r.name, r.variance_of_mean, status
            );
        }
        out
    }

    pub fn from_report(text: &str) -> Result<Self, DataError> {
        let bad = |msg: &str| DataError::Invalid(format!("metric subset report: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let kept_list = header
            .strip_prefix("kept=")
            .ok_or_else(|| bad("missing kept= header"))?;
        let indices: Vec<usize> = if kept_list.is_empty() {
            Vec::new()
        } else {
            kept_list
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad kept index")))
                .collect::<Result<_, _>>()?
        };
        let mut rationale = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut index = None;
            let mut name = None;
            let mut vom = None;
            let mut status = None;
            for field in line.split_whitespace() {
                let (key, value) = field.split_once('=').ok_or_else(|| bad("bad field"))?;
                match key {
                    "metric" => index = Some(value.parse().map_err(|_| bad("bad metric index"))?),
                    "name" => name = Some(value.to_string()),
                    "variance_of_mean" => {
                        vom = Some(value.parse().map_err(|_| bad("bad variance"))?)
                    }
                    "status" => {
                        status = Some(match value {
                            "kept" => MetricStatus::Kept,
                            "low_variance" => MetricStatus::LowVariance,
                            "all_zero_majority" => MetricStatus::AllZeroMajority,
                            other => match other.strip_prefix("collinear_with:") {
                                Some(i) => MetricStatus::CollinearWith(
                                    i.parse().map_err(|_| bad("bad collinear index"))?,
                                ),
                                None => return Err(bad("unknown status")),
                            },
                        })
                    }
                    _ => return Err(bad("unknown key")),
                }
            }
            rationale.push(MetricRationale {
                index: index.ok_or_else(|| bad("missing metric index"))?,
                name: name.ok_or_else(|| bad("missing name"))?,
                variance_of_mean: vom.ok_or_else(|| bad("missing variance"))?,
                status: status.ok_or_else(|| bad("missing status"))?,
            });
        }
        Ok(Self { indices, rationale })
    }
}

//! Telemetry ingestion, min-max scaling, windowing, and train/test split
//! planning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

/// Per-row class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Nominal,
    Fault,
}

impl Label {
    pub fn is_fault(self) -> bool {
        matches!(self, Label::Fault)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Nominal => write!(f, "nominal"),
            Label::Fault => write!(f, "fault"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nominal" => Ok(Label::Nominal),
            "fault" => Ok(Label::Fault),
            other => Err(format!("unknown label '{other}' (expected nominal|fault)")),
        }
    }
}

/// One telemetry file: a rectangular table of sensor readings with a label
/// per row.
#[derive(Debug, Clone)]
pub struct TelemetryTable {
    pub sensor_names: Vec<String>,
    /// Row-major `[n_rows * n_sensors]`.
    values: Vec<f64>,
    labels: Vec<Label>,
    pub source: String,
}

impl TelemetryTable {
    pub fn new(
        sensor_names: Vec<String>,
        values: Vec<f64>,
        labels: Vec<Label>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let n = sensor_names.len();
        if n == 0 || values.len() != labels.len() * n {
            return Err(Error::Contract(format!(
                "table is not rectangular: {} values, {} labels, {} sensors",
                values.len(),
                labels.len(),
                n
            )));
        }
        Ok(Self {
            sensor_names,
            values,
            labels,
            source: source.into(),
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_sensors();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Parse a telemetry CSV: a header row of sensor names plus a final column
/// literally named `label` holding `nominal`/`fault` values.
pub fn ingest_csv(path: &Path) -> Result<TelemetryTable> {
    let fname = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: fname.clone(),
            line: 0,
            message: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            file: fname.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = headers.iter().position(|h| h == "label").ok_or_else(|| Error::Parse {
        file: fname.clone(),
        line: 1,
        message: "missing required 'label' column".into(),
    })?;
    let sensor_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.to_string())
        .collect();
    if sensor_names.is_empty() {
        return Err(Error::Parse {
            file: fname,
            line: 1,
            message: "no sensor columns besides 'label'".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            file: fname.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                file: fname.clone(),
                line: lineno,
                message: format!(
                    "ragged row: {} fields, header has {}",
                    record.len(),
                    headers.len()
                ),
            });
        }
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let label = Label::from_str(field.trim()).map_err(|message| Error::Parse {
                    file: fname.clone(),
                    line: lineno,
                    message,
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                    file: fname.clone(),
                    line: lineno,
                    message: format!("non-numeric sensor value '{field}': {e}"),
                })?;
                values.push(v);
            }
        }
    }
    TelemetryTable::new(sensor_names, values, labels, fname)
}

/// Write a table as CSV. `f64` values use the shortest round-trip decimal
/// form, so an export/ingest cycle is bit-exact.
pub fn export_csv(table: &TelemetryTable, path: &Path) -> Result<()> {
    let to_io = |e: csv::Error| Error::Config(format!("writing {}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(to_io)?;
    let mut header: Vec<String> = table.sensor_names.clone();
    header.push("label".into());
    writer.write_record(&header).map_err(to_io)?;
    for i in 0..table.n_rows() {
        let mut record: Vec<String> = table.row(i).iter().map(|v| v.to_string()).collect();
        record.push(table.label(i).to_string());
        writer.write_record(&record).map_err(to_io)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-column min-max scaler fitted on training rows only. Transform maps
/// the fitted min to 0 and max to 1; constant columns map to 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, n_sensors: usize) -> Result<Self> {
        let mut mins = vec![f64::INFINITY; n_sensors];
        let mut maxs = vec![f64::NEG_INFINITY; n_sensors];
        let mut any = false;
        for row in rows {
            any = true;
            for (j, &v) in row.iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        if !any {
            return Err(Error::Contract("scaler fitted on zero rows".into()));
        }
        Ok(Self { mins, maxs })
    }

    /// Fit on every row of the given tables.
    pub fn fit_tables(tables: &[&TelemetryTable]) -> Result<Self> {
        let n = tables
            .first()
            .ok_or_else(|| Error::Contract("scaler fitted on zero tables".into()))?
            .n_sensors();
        Self::fit(
            tables
                .iter()
                .flat_map(|t| (0..t.n_rows()).map(move |i| t.row(i))),
            n,
        )
    }

    pub fn transform_value(&self, col: usize, v: f64) -> f64 {
        let span = self.maxs[col] - self.mins[col];
        if span == 0.0 {
            0.0
        } else {
            (v - self.mins[col]) / span
        }
    }

    pub fn inverse_value(&self, col: usize, v: f64) -> f64 {
        self.mins[col] + v * (self.maxs[col] - self.mins[col])
    }

    /// Elementwise `(x - min) / (max - min)` over a copy of the table.
    pub fn apply(&self, table: &TelemetryTable) -> TelemetryTable {
        let n = table.n_sensors();
        let mut out = table.clone();
        for (idx, v) in out.values_mut().iter_mut().enumerate() {
            *v = self.transform_value(idx % n, *v);
        }
        out
    }
}

/// Scaled, windowed telemetry. Each window is `window_len` consecutive rows
/// of one file, flattened time-major; a window is `fault` if any of its
/// rows is.
#[derive(Debug, Clone, Default)]
pub struct WindowedDataset {
    pub n_sensors: usize,
    pub window_len: usize,
    /// `[count * window_len * n_sensors]`, row-major per window.
    data: Vec<f64>,
    labels: Vec<Label>,
    /// Index of the originating table, parallel to `labels`.
    pub files: Vec<usize>,
    /// First row of each window inside its file.
    pub starts: Vec<usize>,
    /// Segments shorter than the window length that were skipped.
    pub skipped_segments: usize,
}

impl WindowedDataset {
    pub fn dim(&self) -> usize {
        self.window_len * self.n_sensors
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Windows `indices` stacked into a `[k, d]` matrix.
    pub fn gather(&self, indices: &[usize]) -> Result<DenseArray> {
        let d = self.dim();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(self.window(i));
        }
        DenseArray::matrix(indices.len(), d, out)
    }

    /// New dataset containing only `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut files = Vec::with_capacity(indices.len());
        let mut starts = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.window(i));
            labels.push(self.labels[i]);
            files.push(self.files[i]);
            starts.push(self.starts[i]);
        }
        Self {
            n_sensors: self.n_sensors,
            window_len: self.window_len,
            data,
            labels,
            files,
            starts,
            skipped_segments: 0,
        }
    }

    pub fn indices_with_label(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Slice tables into windows of `window_len` rows advancing by `stride`.
/// Windows never cross file boundaries; tables shorter than one window are
/// skipped and counted.
pub fn make_windows(tables: &[TelemetryTable], window_len: usize, stride: usize) -> Result<WindowedDataset> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Contract("window length and stride must be positive".into()));
    }
    let n = tables
        .first()
        .ok_or_else(|| Error::Contract("windowing needs at least one table".into()))?
        .n_sensors();
    if tables.iter().any(|t| t.n_sensors() != n) {
        return Err(Error::Contract("tables disagree on sensor count".into()));
    }
    let mut ds = WindowedDataset {
        n_sensors: n,
        window_len,
        ..Default::default()
    };
    for (file_idx, table) in tables.iter().enumerate() {
        if table.n_rows() < window_len {
            ds.skipped_segments += 1;
            log::warn!(
                "skipping {}: {} rows is shorter than one window ({})",
                table.source,
                table.n_rows(),
                window_len
            );
            continue;
        }
        let mut start = 0;
        while start + window_len <= table.n_rows() {
            ds.data.extend_from_slice(
                &table.values()[start * n..(start + window_len) * n],
            );
            let fault = table.labels()[start..start + window_len]
                .iter()
                .any(|l| l.is_fault());
            ds.labels.push(if fault { Label::Fault } else { Label::Nominal });
            ds.files.push(file_idx);
            ds.starts.push(start);
            start += stride;
        }
    }
    Ok(ds)
}

/// One train/test partition of source files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// A reproducible collection of train/test file partitions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ratio: f64,
    pub splits: Vec<SplitAssignment>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing split plan: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Randomly partition `files` into train/test sides `k` times. Every file
/// lands on exactly one side per split; both sides are non-empty.
pub fn plan_splits(files: &[String], k: usize, seed: u64, train_ratio: f64) -> Result<SplitPlan> {
    if files.len() < 2 {
        return Err(Error::Contract(format!(
            "split planning needs at least 2 files, got {}",
            files.len()
        )));
    }
    if !(0.0..1.0).contains(&train_ratio) || train_ratio <= 0.0 {
        return Err(Error::Config(format!(
            "train_ratio must lie in (0, 1), got {train_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(k);
    for _ in 0..k {
        let mut shuffled: Vec<String> = files.to_vec();
        shuffled.shuffle(&mut rng);
        let n_train = ((files.len() as f64 * train_ratio).round() as usize)
            .clamp(1, files.len() - 1);
        let (train, test) = shuffled.split_at(n_train);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort();
        test.sort();
        splits.push(SplitAssignment { train, test });
    }
    Ok(SplitPlan {
        seed,
        train_ratio,
        splits,
    })
}

/// Keep `ceil(fraction * len)` training windows, chosen by a seeded shuffle.
/// Returns the retained indices in ascending order.
pub fn reduce_indices(len: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((fraction * len as f64).ceil() as usize).min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    if keep == len {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&[f64], Label)], source: &str) -> TelemetryTable {
        let n = rows[0].0.len();
        let names = (0..n).map(|i| format!("s{i}")).collect();
        let values: Vec<f64> = rows.iter().flat_map(|(r, _)| r.iter().copied()).collect();
        let labels: Vec<Label> = rows.iter().map(|&(_, l)| l).collect();
        TelemetryTable::new(names, values, labels, source).unwrap()
    }

    fn nominal_table(n_rows: usize, n_sensors: usize, source: &str) -> TelemetryTable {
        let values: Vec<f64> = (0..n_rows * n_sensors).map(|v| v as f64).collect();
        TelemetryTable::new(
            (0..n_sensors).map(|i| format!("s{i}")).collect(),
            values,
            vec![Label::Nominal; n_rows],
            source,
        )
        .unwrap()
    }

    #[test]
    fn ingest_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b,label\n1.5,2.0,nominal\n-3.25,4.0,fault\n").unwrap();
        let t = ingest_csv(&path).unwrap();
        assert_eq!(t.n_sensors(), 2);
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.row(0), &[1.5, 2.0]);
        assert_eq!(t.label(1), Label::Fault);
    }

    #[test]
    fn ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b,label\n1,2,nominal\n1,2\n").unwrap();
        let err = ingest_csv(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_label_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let err = ingest_csv(&path).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let vals = vec![
            0.1,
            -1.0 / 3.0,
            f64::MIN_POSITIVE,
            12345.678901234567,
            1e-300,
            2.0_f64.powi(53),
        ];
        let t = TelemetryTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vals.clone(),
            vec![Label::Nominal, Label::Fault],
            "mem",
        )
        .unwrap();
        export_csv(&t, &path).unwrap();
        let back = ingest_csv(&path).unwrap();
        for (x, y) in t.values().iter().zip(back.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(t.labels(), back.labels());
    }

    #[test]
    fn scaler_maps_min_to_zero_max_to_one() {
        let t = table(
            &[
                (&[0.0], Label::Nominal),
                (&[5.0], Label::Nominal),
                (&[10.0], Label::Nominal),
            ],
            "f",
        );
        let s = Scaler::fit_tables(&[&t]).unwrap();
        let scaled = s.apply(&t);
        assert_eq!(scaled.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_column_scales_to_zero() {
        let t = table(
            &[
                (&[7.0], Label::Nominal),
                (&[7.0], Label::Nominal),
                (&[7.0], Label::Nominal),
            ],
            "f",
        );
        let s = Scaler::fit_tables(&[&t]).unwrap();
        assert_eq!(s.apply(&t).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scaler_inverse_round_trip() {
        let t = table(
            &[
                (&[2.0, -1.0], Label::Nominal),
                (&[8.0, 3.0], Label::Nominal),
                (&[5.0, 1.0], Label::Nominal),
            ],
            "f",
        );
        let s = Scaler::fit_tables(&[&t]).unwrap();
        let scaled = s.apply(&t);
        for i in 0..t.n_rows() {
            for j in 0..t.n_sensors() {
                let back = s.inverse_value(j, scaled.row(i)[j]);
                assert!((back - t.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaler_fitted_on_train_does_not_peek_at_test() {
        let train = table(&[(&[0.0], Label::Nominal), (&[10.0], Label::Nominal)], "tr");
        let test = table(&[(&[-5.0], Label::Nominal), (&[20.0], Label::Nominal)], "te");
        let s = Scaler::fit_tables(&[&train]).unwrap();
        let scaled_test = s.apply(&test);
        // Test values fall outside [0,1]; the fit never saw them.
        assert!(scaled_test.values()[0] < 0.0);
        assert!(scaled_test.values()[1] > 1.0);
    }

    #[test]
    fn windows_non_overlapping_count() {
        let t = nominal_table(100, 2, "f");
        let ds = make_windows(&[t], 50, 50).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.labels().iter().all(|l| *l == Label::Nominal));
    }

    #[test]
    fn fault_row_marks_window() {
        let mut rows: Vec<(Vec<f64>, Label)> = (0..100)
            .map(|i| (vec![i as f64, 0.0], Label::Nominal))
            .collect();
        rows[60].1 = Label::Fault;
        let refs: Vec<(&[f64], Label)> = rows.iter().map(|(r, l)| (r.as_slice(), *l)).collect();
        let t = table(&refs, "f");
        let ds = make_windows(&[t], 50, 50).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), Label::Nominal);
        assert_eq!(ds.label(1), Label::Fault);
    }

    #[test]
    fn stride_one_window_count() {
        let t = nominal_table(100, 1, "f");
        let ds = make_windows(&[t], 50, 1).unwrap();
        assert_eq!(ds.len(), 51);
    }

    #[test]
    fn windows_never_cross_files_and_short_files_skipped() {
        let a = nominal_table(60, 1, "a");
        let b = nominal_table(10, 1, "b");
        let c = nominal_table(60, 1, "c");
        let ds = make_windows(&[a, b, c], 50, 50).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.skipped_segments, 1);
        assert_eq!(ds.files, vec![0, 2]);
    }

    #[test]
    fn split_plan_is_deterministic_partition() {
        let files: Vec<String> = (0..5).map(|i| format!("f{i}")).collect();
        let a = plan_splits(&files, 7, 3, 2.0 / 3.0).unwrap();
        let b = plan_splits(&files, 7, 3, 2.0 / 3.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.splits.len(), 7);
        for split in &a.splits {
            let mut all: Vec<&String> = split.train.iter().chain(&split.test).collect();
            all.sort();
            let mut expect: Vec<&String> = files.iter().collect();
            expect.sort();
            assert_eq!(all, expect);
            assert!(!split.test.is_empty());
            assert!(!split.train.is_empty());
        }
    }

    #[test]
    fn too_few_files_rejected() {
        let files = vec!["only".to_string()];
        assert!(matches!(
            plan_splits(&files, 7, 0, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reduction_keeps_ceil_fraction() {
        let idx = reduce_indices(100, 0.34, 9);
        assert_eq!(idx.len(), 34);
        let idx = reduce_indices(101, 0.34, 9);
        assert_eq!(idx.len(), 35); // ceil(34.34)
        let all = reduce_indices(10, 1.0, 9);
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_plan_file_round_trip() {
        let files: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let plan = plan_splits(&files, 3, 11, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.json");
        plan.save(&path).unwrap();
        assert_eq!(SplitPlan::load(&path).unwrap(), plan);
    }
}

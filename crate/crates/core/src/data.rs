//! Dataset ingestion, preprocessing and splits.
//!
//! Delimited files are parsed against a per-column schema: continuous
//! columns are min-max scaled with statistics from the training rows only,
//! categorical columns are one-hot encoded with an extra "unknown" slot when
//! values are missing or unseen. IDX image archives are scaled by 1/255.
//! Preprocessed datasets can be cached in a versioned binary container.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::linalg::DenseMatrix;
use crate::seed::rng_for;

/// Bounds applied to scaled validation and test features.
pub const CLAMP_RANGE: [f64; 2] = [-0.5, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How one encoded input column block was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMeta {
    Continuous { min: f64, max: f64 },
    Categorical { categories: Vec<String>, has_unknown: bool },
}

impl FeatureMeta {
    /// Number of encoded columns.
    pub fn width(&self) -> usize {
        match self {
            FeatureMeta::Continuous { .. } => 1,
            FeatureMeta::Categorical {
                categories,
                has_unknown,
            } => categories.len() + usize::from(*has_unknown),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: Vec<String> },
    Regression { outputs: usize },
}

/// Preprocessed features, targets and split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `S x D` features.
    pub x: DenseMatrix,
    /// `S x C` one-hot targets or `S x N` real targets.
    pub t: DenseMatrix,
    pub split: Vec<Split>,
    pub feature_meta: Vec<FeatureMeta>,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_targets(&self) -> usize {
        self.t.cols()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.task, Task::Classification { .. })
    }

    pub fn count(&self, which: Split) -> usize {
        self.split.iter().filter(|s| **s == which).count()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|i| self.split[*i] == which).collect()
    }

    /// Feature and target rows of one split, in dataset order.
    pub fn subset(&self, which: Split) -> (DenseMatrix, DenseMatrix) {
        let idx = self.indices(which);
        (gather(&self.x, &idx), gather(&self.t, &idx))
    }

    fn validate(&self) -> Result<()> {
        if self.x.rows() != self.t.rows() || self.split.len() != self.x.rows() {
            return Err(GpnError::SchemaMismatch(
                "features, targets and split assignment differ in length".into(),
            ));
        }
        let width: usize = self.feature_meta.iter().map(FeatureMeta::width).sum();
        if !self.feature_meta.is_empty() && width != self.x.cols() {
            return Err(GpnError::SchemaMismatch(format!(
                "feature metadata describes {width} columns, matrix has {}",
                self.x.cols()
            )));
        }
        Ok(())
    }
}

/// Rows `idx` of `m`.
pub fn gather(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    DenseMatrix::from_vec(idx.len(), m.cols(), data).expect("consistent row width")
}

/// Role of one column of a delimited file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Classification,
    Regression,
}

/// Layout of a delimited file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Kind of every column; the target column's entry is ignored.
    pub columns: Vec<ColumnKind>,
    pub target_column: usize,
    pub target_kind: TargetKind,
    #[serde(default)]
    pub has_header: bool,
    /// Field values treated as missing (after trimming).
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
    /// Characters stripped from the end of target labels, e.g. a trailing
    /// period used by some test files.
    #[serde(default)]
    pub target_strip_suffix: String,
    /// Marks this many trailing rows as test data.
    #[serde(default)]
    pub test_tail: usize,
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".to_string()]
}

impl Schema {
    pub fn new(columns: Vec<ColumnKind>, target_column: usize, target_kind: TargetKind) -> Self {
        Schema {
            columns,
            target_column,
            target_kind,
            has_header: false,
            missing_tokens: default_missing(),
            target_strip_suffix: String::new(),
            test_tail: 0,
        }
    }
}

struct RawTable {
    rows: Vec<Vec<String>>,
    /// 1-based source line of every row.
    lines: Vec<usize>,
}

fn read_table(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = File::open(path)
        .map_err(|e| GpnError::DatasetMissing(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_reader(BufReader::new(file));
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| GpnError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != schema.columns.len() {
            return Err(GpnError::SchemaMismatch(format!(
                "line {line}: {} fields but the schema lists {} columns",
                rec.len(),
                schema.columns.len()
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
        lines.push(line);
    }
    Ok(RawTable { rows, lines })
}

/// Loads one delimited file; every row is training data unless the schema
/// reserves a test tail.
pub fn load_delimited(path: &Path, schema: &Schema) -> Result<Dataset> {
    let table = read_table(path, schema)?;
    let n = table.rows.len();
    let tail = schema.test_tail.min(n);
    let split = (0..n)
        .map(|i| if i >= n - tail { Split::Test } else { Split::Train })
        .collect();
    encode(table, split, schema)
}

/// Loads separate training and test files sharing one schema.
pub fn load_delimited_pair(train: &Path, test: &Path, schema: &Schema) -> Result<Dataset> {
    let mut table = read_table(train, schema)?;
    let test_table = read_table(test, schema)?;
    let mut split = vec![Split::Train; table.rows.len()];
    split.extend(std::iter::repeat_n(Split::Test, test_table.rows.len()));
    table.rows.extend(test_table.rows);
    table.lines.extend(test_table.lines);
    encode(table, split, schema)
}

fn encode(table: RawTable, split: Vec<Split>, schema: &Schema) -> Result<Dataset> {
    if schema.target_column >= schema.columns.len() {
        return Err(GpnError::SchemaMismatch(format!(
            "target column {} outside {} columns",
            schema.target_column,
            schema.columns.len()
        )));
    }
    let is_missing = |s: &str| schema.missing_tokens.iter().any(|m| m == s);
    let train_rows: Vec<usize> = (0..table.rows.len()).filter(|i| split[*i] == Split::Train).collect();
    let mut meta = Vec::new();
    let mut col_of_meta = Vec::new();
    for (c, kind) in schema.columns.iter().enumerate() {
        if c == schema.target_column {
            continue;
        }
        match kind {
            ColumnKind::Ignore => {}
            ColumnKind::Continuous => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &r in &train_rows {
                    let f = &table.rows[r][c];
                    if is_missing(f) {
                        continue;
                    }
                    let v = parse_number(f, table.lines[r])?;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if !lo.is_finite() {
                    lo = 0.0;
                    hi = 0.0;
                }
                meta.push(FeatureMeta::Continuous { min: lo, max: hi });
                col_of_meta.push(c);
            }
            ColumnKind::Categorical => {
                let cats: BTreeSet<&str> = train_rows
                    .iter()
                    .map(|r| table.rows[*r][c].as_str())
                    .filter(|f| !is_missing(f))
                    .collect();
                let has_unknown = table
                    .rows
                    .iter()
                    .any(|row| is_missing(&row[c]) || !cats.contains(row[c].as_str()));
                meta.push(FeatureMeta::Categorical {
                    categories: cats.into_iter().map(str::to_string).collect(),
                    has_unknown,
                });
                col_of_meta.push(c);
            }
        }
    }
    let width: usize = meta.iter().map(FeatureMeta::width).sum();
    let n = table.rows.len();
    let mut x = DenseMatrix::zeros(n, width);
    for (r, row) in table.rows.iter().enumerate() {
        let mut off = 0;
        for (m, &c) in meta.iter().zip(&col_of_meta) {
            let f = row[c].as_str();
            match m {
                FeatureMeta::Continuous { min, max } => {
                    if !is_missing(f) {
                        let v = parse_number(f, table.lines[r])?;
                        let range = max - min;
                        let mut s = if range > 0.0 { (v - min) / range } else { 0.0 };
                        if split[r] != Split::Train {
                            s = s.clamp(CLAMP_RANGE[0], CLAMP_RANGE[1]);
                        }
                        x[(r, off)] = s;
                    }
                }
                FeatureMeta::Categorical { categories, .. } => {
                    let slot = categories
                        .binary_search_by(|c| c.as_str().cmp(f))
                        .unwrap_or(categories.len());
                    x[(r, off + slot)] = 1.0;
                }
            }
            off += m.width();
        }
    }
    let tc = schema.target_column;
    let label = |row: &Vec<String>| -> String {
        let raw = row[tc].as_str();
        raw.trim_end_matches(|ch| schema.target_strip_suffix.contains(ch))
            .to_string()
    };
    let (t, task) = match schema.target_kind {
        TargetKind::Classification => {
            let classes: Vec<String> = table
                .rows
                .iter()
                .map(label)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut t = DenseMatrix::zeros(n, classes.len());
            for (r, row) in table.rows.iter().enumerate() {
                let k = classes.binary_search(&label(row)).expect("label collected above");
                t[(r, k)] = 1.0;
            }
            (t, Task::Classification { classes })
        }
        TargetKind::Regression => {
            let mut t = DenseMatrix::zeros(n, 1);
            for (r, row) in table.rows.iter().enumerate() {
                t[(r, 0)] = parse_number(&label(row), table.lines[r])?;
            }
            (t, Task::Regression { outputs: 1 })
        }
    };
    let ds = Dataset {
        x,
        t,
        split,
        feature_meta: meta,
        task,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_number(field: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| GpnError::Parse {
            line,
            message: format!("'{field}' is not a number"),
        })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| GpnError::DatasetMissing(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| GpnError::TruncatedFile(format!("{}: header cut short", path.display())))
    };
    let found = word(0)?;
    if found != magic {
        return Err(GpnError::BadMagic {
            found,
            expected: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let body = 4 * (ndim + 1);
    let expected: usize = dims.iter().product();
    if bytes.len() < body + expected {
        return Err(GpnError::TruncatedFile(format!(
            "{}: expected {expected} data bytes, found {}",
            path.display(),
            bytes.len().saturating_sub(body)
        )));
    }
    bytes.truncate(body + expected);
    bytes.drain(..body);
    Ok((dims, bytes))
}

/// Reads an IDX image file and its label file; all rows are training data.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS)?;
    let n = dims[0];
    if ldims[0] != n {
        return Err(GpnError::SchemaMismatch(format!(
            "{n} images but {} labels",
            ldims[0]
        )));
    }
    let width = dims[1] * dims[2];
    let x = DenseMatrix::from_vec(n, width, pixels.iter().map(|p| *p as f64 / 255.0).collect())?;
    let mut t = DenseMatrix::zeros(n, 10);
    for (i, l) in labels.iter().enumerate() {
        if *l > 9 {
            return Err(GpnError::Parse {
                line: i + 1,
                message: format!("label {l} outside 0..=9"),
            });
        }
        t[(i, *l as usize)] = 1.0;
    }
    Ok(Dataset {
        x,
        t,
        split: vec![Split::Train; n],
        feature_meta: Vec::new(),
        task: Task::Classification {
            classes: (0..10).map(|d| d.to_string()).collect(),
        },
    })
}

/// Appends `test` to `train`, marking its rows as test data.
pub fn with_test_rows(train: Dataset, test: Dataset) -> Result<Dataset> {
    if train.x.cols() != test.x.cols() || train.t.cols() != test.t.cols() {
        return Err(GpnError::SchemaMismatch("train and test widths differ".into()));
    }
    let mut x = train.x.into_vec();
    x.extend(test.x.as_slice());
    let mut t = train.t.into_vec();
    t.extend(test.t.as_slice());
    let n = train.split.len() + test.split.len();
    let mut split = train.split;
    split.extend(std::iter::repeat_n(Split::Test, test.split.len()));
    Ok(Dataset {
        x: DenseMatrix::from_vec(n, test.x.cols(), x)?,
        t: DenseMatrix::from_vec(n, test.t.cols(), t)?,
        split,
        feature_meta: train.feature_meta,
        task: train.task,
    })
}

/// Moves a seeded random `val_fraction` of the training rows to the
/// validation split. Test rows are untouched.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(GpnError::InvalidArgument(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut train: Vec<usize> = (0..dataset.len())
        .filter(|i| dataset.split[*i] != Split::Test)
        .collect();
    let n_val = (train.len() as f64 * val_fraction).round() as usize;
    train.shuffle(&mut rng_for(seed, "split"));
    let mut out = dataset.clone();
    for (k, i) in train.iter().enumerate() {
        out.split[*i] = if k < n_val { Split::Val } else { Split::Train };
    }
    Ok(out)
}

/// `n` inputs uniform on `[-1, 1]` with targets `sin(3 x)` plus Gaussian
/// noise of standard deviation `noise_std`.
pub fn toy_regression(n: usize, noise_std: f64, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, "toy");
    let normal = rand_distr::Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let ts: Vec<f64> = xs
        .iter()
        .map(|x| (3.0 * x).sin() + rand_distr::Distribution::sample(&normal, &mut rng))
        .collect();
    Dataset {
        x: DenseMatrix::from_vec(n, 1, xs).expect("column"),
        t: DenseMatrix::from_vec(n, 1, ts).expect("column"),
        split: vec![Split::Train; n],
        feature_meta: vec![FeatureMeta::Continuous { min: -1.0, max: 1.0 }],
        task: Task::Regression { outputs: 1 },
    }
}

const CACHE_MAGIC: &[u8; 8] = b"GPNDATA\0";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    rows: usize,
    x_cols: usize,
    t_cols: usize,
    split: Vec<Split>,
    feature_meta: Vec<FeatureMeta>,
    task: Task,
}

/// Writes the dataset to the binary cache format.
pub fn save_cache(path: &Path, ds: &Dataset) -> Result<()> {
    let meta = serde_json::to_vec(&CacheMeta {
        rows: ds.len(),
        x_cols: ds.x.cols(),
        t_cols: ds.t.cols(),
        split: ds.split.clone(),
        feature_meta: ds.feature_meta.clone(),
        task: ds.task.clone(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    for v in ds.x.as_slice().iter().chain(ds.t.as_slice()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_cache`].
pub fn load_cache(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| GpnError::DatasetMissing(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let truncated = || GpnError::TruncatedFile(path.display().to_string());
    if bytes.len() < 20 {
        return Err(truncated());
    }
    if &bytes[..8] != CACHE_MAGIC {
        let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let expected = u32::from_be_bytes([CACHE_MAGIC[0], CACHE_MAGIC[1], CACHE_MAGIC[2], CACHE_MAGIC[3]]);
        return Err(GpnError::BadMagic { found, expected });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(GpnError::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = 20usize.checked_add(meta_len).ok_or_else(truncated)?;
    let meta: CacheMeta = serde_json::from_slice(bytes.get(20..meta_end).ok_or_else(truncated)?)?;
    let nx = meta.rows * meta.x_cols;
    let nt = meta.rows * meta.t_cols;
    let body = bytes.get(meta_end..).ok_or_else(truncated)?;
    if body.len() != 8 * (nx + nt) {
        return Err(truncated());
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let ds = Dataset {
        x: DenseMatrix::from_vec(meta.rows, meta.x_cols, vals[..nx].to_vec())?,
        t: DenseMatrix::from_vec(meta.rows, meta.t_cols, vals[nx..].to_vec())?,
        split: meta.split,
        feature_meta: meta.feature_meta,
        task: meta.task,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn continuous_columns_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "2,x\n4,y\n");
        let schema = Schema::new(vec![ColumnKind::Continuous, ColumnKind::Categorical], 1, TargetKind::Classification);
        let ds = load_delimited(&p, &schema).unwrap();
        assert_eq!(ds.x.col(0), vec![0.0, 1.0]);
        assert_eq!(ds.t.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_categorical_adds_unknown_slot() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,1\nb,0\n?,1\n");
        let schema = Schema::new(vec![ColumnKind::Categorical, ColumnKind::Categorical], 1, TargetKind::Classification);
        let ds = load_delimited(&p, &schema).unwrap();
        assert_eq!(ds.n_features(), 3);
        assert_eq!(ds.x.row(2), &[0.0, 0.0, 1.0]);
        for r in 0..3 {
            assert_eq!(ds.x.row(r).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn test_rows_use_training_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "0,a\n10,b\n5,a\n40,b\n-30,a\n");
        let mut schema = Schema::new(vec![ColumnKind::Continuous, ColumnKind::Categorical], 1, TargetKind::Classification);
        schema.test_tail = 2;
        let ds = load_delimited(&p, &schema).unwrap();
        assert_eq!(ds.x.col(0), vec![0.0, 1.0, 0.5, 1.5, -0.5]);
        assert_eq!(ds.count(Split::Test), 2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "1,a\nfoo,b\n");
        let schema = Schema::new(vec![ColumnKind::Continuous, ColumnKind::Categorical], 1, TargetKind::Classification);
        match load_delimited(&p, &schema) {
            Err(GpnError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "b.csv", "1,a,3\n");
        assert!(matches!(load_delimited(&p, &schema), Err(GpnError::SchemaMismatch(_))));
    }

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend(body);
        b
    }

    #[test]
    fn idx_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 784];
        pixels[784] = 255;
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_bytes(IDX_IMAGES, &[2, 28, 28], &pixels)).unwrap();
        std::fs::write(&lab, idx_bytes(IDX_LABELS, &[2], &[3, 7])).unwrap();
        let ds = load_idx_images(&img, &lab).unwrap();
        assert_eq!(ds.n_features(), 784);
        assert!(ds.x.row(0).iter().all(|v| *v == 0.0));
        assert_eq!(ds.x[(1, 0)], 1.0);
        assert_eq!(ds.t[(1, 7)], 1.0);
        std::fs::write(&img, idx_bytes(IDX_LABELS, &[2, 28, 28], &pixels)).unwrap();
        assert!(matches!(load_idx_images(&img, &lab), Err(GpnError::BadMagic { .. })));
        std::fs::write(&img, idx_bytes(IDX_IMAGES, &[2, 28, 28], &pixels[..100])).unwrap();
        assert!(matches!(load_idx_images(&img, &lab), Err(GpnError::TruncatedFile(_))));
    }

    #[test]
    fn validation_split() {
        let ds = toy_regression(100, 0.0, 1);
        let a = split(&ds, 0.1, 5).unwrap();
        assert_eq!(a.count(Split::Val), 10);
        assert_eq!(a.count(Split::Train), 90);
        assert_eq!(a, split(&ds, 0.1, 5).unwrap());
        assert_ne!(a.split, split(&ds, 0.1, 6).unwrap().split);
        assert_eq!(split(&ds, 0.0, 5).unwrap().count(Split::Val), 0);
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "0.1,a,x\n0.7,b,y\n0.3,,x\n");
        let schema = Schema::new(
            vec![ColumnKind::Continuous, ColumnKind::Categorical, ColumnKind::Categorical],
            2,
            TargetKind::Classification,
        );
        let ds = split(&load_delimited(&p, &schema).unwrap(), 0.34, 3).unwrap();
        let c = dir.path().join("cache.bin");
        save_cache(&c, &ds).unwrap();
        assert_eq!(load_cache(&c).unwrap(), ds);
        let toy = toy_regression(17, 0.1, 2);
        save_cache(&c, &toy).unwrap();
        let back = load_cache(&c).unwrap();
        assert!(back.x.as_slice().iter().zip(toy.x.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bytes = std::fs::read(&c).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&c, &bytes).unwrap();
        assert!(matches!(load_cache(&c), Err(GpnError::TruncatedFile(_))));
    }
}

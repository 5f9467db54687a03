//! Feature matrices: CSV and binary I/O, toy generators, standardization,
//! and the tabular train/test split protocol.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::linalg::Matrix;

pub const FEATURE_MAGIC: &[u8; 6] = b"NLFM1\0";

/// An N×D matrix of feature vectors with optional column names and
/// optional per-row labels (0 = in-distribution, 1 = OOD).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub columns: Vec<String>,
    pub labels: Option<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn new(values: Matrix) -> Self {
        let columns = default_columns(values.cols());
        FeatureMatrix {
            values,
            columns,
            labels: None,
        }
    }

    pub fn with_labels(values: Matrix, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != values.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                values.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
        }
        let mut fm = FeatureMatrix::new(values);
        fm.labels = Some(labels);
        Ok(fm)
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(indices),
            columns: self.columns.clone(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

fn default_columns(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

/// Reads a numeric CSV file.
///
/// A first row containing any non-numeric cell is taken as a header. When
/// `has_label_column` is set, the last column holds 0/1 labels. Lines that
/// are empty or start with `#` are skipped.
pub fn load_csv(path: impl AsRef<Path>, has_label_column: bool) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .context(|| format!("reading {}", path.display()))?;
    parse_csv(&text, has_label_column).context(|| format!("parsing {}", path.display()))
}

pub fn parse_csv(text: &str, has_label_column: bool) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut header: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;

    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(index + 1, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(index + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if index == 0 && record.iter().any(|cell| cell.parse::<f64>().is_err()) {
            header = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                line,
                column: record.len().min(expected) + 1,
                message: format!("row has {} fields, expected {expected}", record.len()),
            });
        }
        let n_features = if has_label_column {
            expected.checked_sub(1).filter(|&n| n > 0).ok_or_else(|| Error::Parse {
                line,
                column: 1,
                message: "a label column needs at least one feature column beside it".into(),
            })?
        } else {
            expected
        };
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                column: col + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if col < n_features {
                if !value.is_finite() {
                    return Err(Error::Parse {
                        line,
                        column: col + 1,
                        message: format!("non-finite value {cell:?}"),
                    });
                }
                data.push(value);
            } else if value == 0.0 || value == 1.0 {
                labels.push(value as u8);
            } else {
                return Err(Error::Parse {
                    line,
                    column: col + 1,
                    message: format!("label {cell:?} is not 0 or 1"),
                });
            }
        }
        rows += 1;
    }

    let width = width.unwrap_or(0);
    let n_features = if has_label_column { width.saturating_sub(1) } else { width };
    let values = Matrix::new(rows, n_features, data)?;
    let columns = match header {
        Some(h) => h.into_iter().take(n_features).collect(),
        None => default_columns(n_features),
    };
    Ok(FeatureMatrix {
        values,
        columns,
        labels: has_label_column.then_some(labels),
    })
}

/// Writes a CSV with a header row; labels, when present, go in a final
/// `label` column.
pub fn save_csv(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    fs::write(path, to_csv(fm))?;
    Ok(())
}

pub fn to_csv(fm: &FeatureMatrix) -> String {
    let mut out = fm.columns.join(",");
    if fm.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (r, row) in fm.values.iter_rows().enumerate() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&cells.join(","));
        if let Some(labels) = &fm.labels {
            out.push_str(&format!(",{}", labels[r]));
        }
        out.push('\n');
    }
    out
}

/// Binary layout: magic `NLFM1\0`, `u32` rows, `u32` cols, `u8` has-labels
/// flag, row-major `f64` data, then one `u8` label per row if flagged. All
/// integers little-endian.
pub fn encode_bin(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + fm.values.data().len() * 8 + fm.rows());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fm.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.cols() as u32).to_le_bytes());
    out.push(u8::from(fm.labels.is_some()));
    for x in fm.values.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = &fm.labels {
        out.extend_from_slice(labels);
    }
    out
}

pub fn decode_bin(bytes: &[u8]) -> Result<FeatureMatrix> {
    let (fm, used) = decode_bin_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "feature file has {} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(fm)
}

/// Decodes one matrix from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub(crate) fn decode_bin_prefix(bytes: &[u8]) -> Result<(FeatureMatrix, usize)> {
    let header = FEATURE_MAGIC.len() + 9;
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad feature-matrix magic: expected {:?}",
            String::from_utf8_lossy(FEATURE_MAGIC)
        )));
    }
    if bytes.len() < header {
        return Err(Error::Format("feature file truncated in header".into()));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let has_labels = match bytes[14] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad label flag {other}"))),
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("feature matrix size overflows".into()))?;
    let need = header + n * 8 + if has_labels { rows } else { 0 };
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "feature file truncated: {rows}x{cols} needs {need} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[header..header + n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Matrix::new(rows, cols, data)?;
    let fm = if has_labels {
        let labels = bytes[header + n * 8..need].to_vec();
        FeatureMatrix::with_labels(values, labels).map_err(|e| Error::Format(e.to_string()))?
    } else {
        FeatureMatrix::new(values)
    };
    Ok((fm, need))
}

pub fn save_bin(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_bin(fm))?;
    Ok(())
}

pub fn load_bin(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(Error::from)
        .context(|| format!("reading {}", path.display()))?;
    decode_bin(&bytes).context(|| format!("decoding {}", path.display()))
}

/// Loads a feature file by extension: `.csv` through [`load_csv`],
/// anything else as the binary format.
pub fn load_features(path: impl AsRef<Path>, csv_has_labels: bool) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path, csv_has_labels),
        _ => load_bin(path),
    }
}

/// Reads a label file: one 0/1 value per line, optional header.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let fm = load_csv(path, false)?;
    if fm.cols() != 1 {
        return Err(Error::Format(format!(
            "{}: expected one label column, found {}",
            path.display(),
            fm.cols()
        )));
    }
    fm.values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(Error::Format(format!("{}: label {v} in row {} is not 0 or 1", path.display(), i + 1))),
        })
        .collect()
}

fn check_noise(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(())
}

/// Points at angle `U[0, 2π)` and radius `radius + N(0, σ)`.
pub fn gen_circle(n: usize, radius: f64, noise_sigma: f64, seed: u64) -> Result<FeatureMatrix> {
    check_count(n)?;
    check_noise(noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let angle = rng.random_range(0.0..2.0 * PI);
        let r = radius + noise_sigma * normal.sample(&mut rng);
        data.push(r * angle.cos());
        data.push(r * angle.sin());
    }
    Ok(FeatureMatrix::new(Matrix::new(n, 2, data)?))
}

/// A 300° arc of the unit circle (angles `U[π/6, 11π/6)`, open towards
/// +x) with isotropic Gaussian noise.
pub fn gen_ushape(n: usize, noise_sigma: f64, seed: u64) -> Result<FeatureMatrix> {
    check_count(n)?;
    check_noise(noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let angle = rng.random_range(PI / 6.0..11.0 * PI / 6.0);
        data.push(angle.cos() + noise_sigma * normal.sample(&mut rng));
        data.push(angle.sin() + noise_sigma * normal.sample(&mut rng));
    }
    Ok(FeatureMatrix::new(Matrix::new(n, 2, data)?))
}

/// Points uniform in the axis-aligned box `[-half_width, half_width]^dim`.
pub fn gen_box(n: usize, dim: usize, half_width: f64, seed: u64) -> Result<FeatureMatrix> {
    check_count(n)?;
    if !(half_width > 0.0) {
        return Err(Error::invalid(format!("box half-width must be positive, got {half_width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Matrix::from_fn(n, dim, |_, _| rng.random_range(-half_width..half_width));
    Ok(FeatureMatrix::new(values))
}

/// Train/test split for tabular OOD evaluation.
#[derive(Clone, Debug)]
pub struct ShallowSplit {
    /// Inliers only, unlabeled.
    pub train: FeatureMatrix,
    /// Equal numbers of inliers and outliers, labeled.
    pub test: FeatureMatrix,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Moves every outlier and an equal-size uniform sample of inliers into
/// the test set; the remaining inliers form the training set.
pub fn make_shallow_split(full: &FeatureMatrix, seed: u64) -> Result<ShallowSplit> {
    let labels = full
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("splitting needs a labeled feature matrix"))?;
    let inliers: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let outliers: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if outliers.is_empty() {
        return Err(Error::invalid("dataset has no outliers (label 1)"));
    }
    if inliers.len() < outliers.len() + 2 {
        return Err(Error::InsufficientData(format!(
            "{} inliers cannot cover {} test inliers plus a training set of at least 2",
            inliers.len(),
            outliers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = sample(&mut rng, inliers.len(), outliers.len())
        .into_iter()
        .map(|i| inliers[i])
        .collect();
    let train_rows: Vec<usize> = inliers.iter().copied().filter(|i| !picked.contains(i)).collect();
    let mut test_rows: Vec<usize> = picked.into_iter().chain(outliers).collect();
    test_rows.sort_unstable();

    let mut train = full.select_rows(&train_rows);
    train.labels = None;
    let test = full.select_rows(&test_rows);
    Ok(ShallowSplit {
        train,
        test,
        train_rows,
        test_rows,
    })
}

/// Per-column standardization statistics fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    /// Column means and population standard deviations, the latter floored
    /// at `1e-8`.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InsufficientData("cannot standardize an empty matrix".into()));
        }
        let mean = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((v, xi), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xi - m) * (xi - m);
            }
        }
        let n = x.rows() as f64;
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut out = x.sub_row(&self.mean);
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&self.std) {
                *v /= s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&self.std) {
                *v *= s;
            }
        }
        Ok(out.add_row(&self.mean))
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} columns, got {}",
                self.dim(),
                x.cols()
            )));
        }
        Ok(())
    }
}

/// Entry of the dataset registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    /// CSV path, relative to the registry file. Last column is the 0/1
    /// label.
    pub path: PathBuf,
    /// Expected full-file shape (inliers plus outliers).
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub datasets: Vec<DatasetEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Registry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(Error::from)
            .context(|| format!("reading registry {}", path.display()))?;
        let mut registry: Registry = serde_json::from_str(&text)?;
        registry.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(registry)
    }

    pub fn entry(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::invalid(format!("dataset {name:?} is not in the registry")))
    }

    pub fn path_of(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Loads a dataset and checks it against its expected shape.
    pub fn load_dataset(&self, name: &str) -> Result<FeatureMatrix> {
        let entry = self.entry(name)?;
        let fm = load_csv(self.path_of(entry), true)?;
        if (fm.rows(), fm.cols()) != (entry.rows, entry.cols) {
            return Err(Error::Format(format!(
                "dataset {name}: expected {}x{}, file has {}x{}",
                entry.rows,
                entry.cols,
                fm.rows(),
                fm.cols()
            )));
        }
        if let (Some(want), Some(labels)) = (entry.outliers, &fm.labels) {
            let got = labels.iter().filter(|&&l| l == 1).count();
            if got != want {
                return Err(Error::Format(format!(
                    "dataset {name}: expected {want} outliers, file has {got}"
                )));
            }
        }
        Ok(fm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_numeric_csv() {
        let fm = parse_csv("1,2\n3,4\n", false).unwrap();
        assert_eq!(fm.values, Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(fm.labels, None);
    }

    #[test]
    fn header_row_is_detected_and_skipped() {
        let fm = parse_csv("a,b,label\n1,2,0\n3,4,1\n", true).unwrap();
        assert_eq!(fm.columns, vec!["a", "b"]);
        assert_eq!(fm.values.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fm.labels, Some(vec![0, 1]));
    }

    #[test]
    fn ragged_row_cites_line() {
        match parse_csv("1,2\n3,4\n5\n", false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_cites_position() {
        match parse_csv("1,2\n3,x\n", false) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_rejected() {
        assert!(matches!(parse_csv("1,2,3\n", true), Err(Error::Parse { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let fm = FeatureMatrix::with_labels(
            Matrix::new(3, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25, 1e300, -0.0]).unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let bytes = encode_bin(&fm);
        let back = decode_bin(&bytes).unwrap();
        assert_eq!(back.values, fm.values);
        assert_eq!(back.labels, fm.labels);
        assert_eq!(encode_bin(&back), bytes);
    }

    #[test]
    fn binary_truncation_and_magic() {
        let bytes = encode_bin(&FeatureMatrix::new(Matrix::zeros(4, 3)));
        for len in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode_bin(&bytes[..len]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[1] = b'?';
        match decode_bin(&bad) {
            Err(Error::Format(msg)) => assert!(msg.contains("NLFM1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_and_binary_loaders_agree() {
        let fm = gen_circle(50, 1.0, 0.1, 3).unwrap();
        let labeled = FeatureMatrix::with_labels(fm.values.clone(), (0..50).map(|i| (i % 2) as u8).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        let bin_path = dir.path().join("m.nlfm");
        save_csv(&csv_path, &labeled).unwrap();
        save_bin(&bin_path, &labeled).unwrap();
        let a = load_features(&csv_path, true).unwrap();
        let b = load_features(&bin_path, false).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn noiseless_circle_has_exact_radius() {
        let fm = gen_circle(100, 2.5, 0.0, 1).unwrap();
        for row in fm.values.iter_rows() {
            assert!((row[0].hypot(row[1]) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(gen_circle(20, 1.0, 0.1, 9).unwrap(), gen_circle(20, 1.0, 0.1, 9).unwrap());
        assert_eq!(gen_ushape(20, 0.1, 9).unwrap(), gen_ushape(20, 0.1, 9).unwrap());
        assert_ne!(gen_circle(20, 1.0, 0.1, 9).unwrap(), gen_circle(20, 1.0, 0.1, 10).unwrap());
    }

    #[test]
    fn circle_mean_radius() {
        let fm = gen_circle(10_000, 1.0, 0.05, 4).unwrap();
        let mean: f64 = fm.values.iter_rows().map(|r| r[0].hypot(r[1])).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn ushape_leaves_a_gap() {
        let fm = gen_ushape(2000, 0.0, 5).unwrap();
        for row in fm.values.iter_rows() {
            let angle = row[1].atan2(row[0]).rem_euclid(2.0 * PI);
            assert!((PI / 6.0 - 1e-12..11.0 * PI / 6.0 + 1e-12).contains(&angle));
        }
    }

    #[test]
    fn negative_noise_is_rejected() {
        assert!(matches!(gen_circle(5, 1.0, -0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(gen_ushape(5, -1.0, 0), Err(Error::InvalidArgument(_))));
    }

    fn labeled(inliers: usize, outliers: usize) -> FeatureMatrix {
        let n = inliers + outliers;
        let values = Matrix::from_fn(n, 3, |r, c| (r * 3 + c) as f64);
        let labels = (0..n).map(|i| u8::from(i >= inliers)).collect();
        FeatureMatrix::with_labels(values, labels).unwrap()
    }

    #[test]
    fn breast_cancer_shaped_split() {
        let split = make_shallow_split(&labeled(357, 10), 0).unwrap();
        assert_eq!(split.train.rows(), 347);
        assert_eq!(split.test.rows(), 20);
        let labels = split.test.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
        assert!(split.train.labels.is_none());
    }

    #[test]
    fn all_inlier_split_fails() {
        assert!(matches!(make_shallow_split(&labeled(20, 0), 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_is_seeded() {
        let full = labeled(100, 10);
        let a = make_shallow_split(&full, 5).unwrap();
        let b = make_shallow_split(&full, 5).unwrap();
        let c = make_shallow_split(&full, 6).unwrap();
        assert_eq!(a.test_rows, b.test_rows);
        assert_ne!(a.test_rows, c.test_rows);
    }

    fn single_column(inliers: usize, outliers: usize) -> FeatureMatrix {
        let n = inliers + outliers;
        let values = Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let labels = (0..n).map(|i| u8::from(i >= inliers)).collect();
        FeatureMatrix::with_labels(values, labels).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn split_disjoint_and_balanced(seed in any::<u64>(), shape in 0usize..6) {
            let (inl, out) = [(6666, 250), (357, 10), (3625, 61), (719, 90), (45586, 878), (619046, 1052)][shape];
            let full = single_column(inl, out);
            let split = make_shallow_split(&full, seed).unwrap();
            let train: BTreeSet<_> = split.train_rows.iter().collect();
            prop_assert!(split.test_rows.iter().all(|r| !train.contains(r)));
            let labels = split.test.labels.clone().unwrap();
            let n_out = labels.iter().filter(|&&l| l == 1).count();
            prop_assert_eq!(n_out, out);
            prop_assert_eq!(labels.len(), 2 * out);
            prop_assert_eq!(split.train.rows() + split.test.rows(), inl + out);
            prop_assert_eq!(split.train.rows(), inl - out);
        }
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let x = Matrix::from_fn(5, 2, |r, c| if c == 0 { 3.0 } else { r as f64 });
        let z = Standardizer::fit(&x).unwrap().apply(&x).unwrap();
        assert!((0..5).all(|r| z.get(r, 0) == 0.0));
    }

    #[test]
    fn standardized_columns_are_centered_and_invertible() {
        let fm = gen_circle(500, 3.0, 0.3, 8).unwrap();
        let x = fm.values.add_row(&[10.0, -4.0]);
        let s = Standardizer::fit(&x).unwrap();
        let z = s.apply(&x).unwrap();
        assert!(z.column_means().iter().all(|m| m.abs() < 1e-10));
        assert!(s.invert(&z).unwrap().sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn registry_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.csv"), "1,2,0\n3,4,0\n5,6,1\n").unwrap();
        fs::write(
            dir.path().join("registry.json"),
            r#"{"datasets": [{"name": "tiny", "path": "tiny.csv", "rows": 3, "cols": 2, "outliers": 1}]}"#,
        )
        .unwrap();
        let reg = Registry::load(dir.path().join("registry.json")).unwrap();
        let fm = reg.load_dataset("tiny").unwrap();
        assert_eq!(fm.labels, Some(vec![0, 0, 1]));
        assert!(reg.load_dataset("missing").is_err());
    }
}

//! Feature datasets and their two on-disk encodings.
//!
//! Binary layout (all little-endian):
//!
//! | bytes        | content                      |
//! |--------------|------------------------------|
//! | 4            | magic `VFEA`                 |
//! | 4            | version (`u32`, currently 1) |
//! | 8            | row count N (`u64`)          |
//! | 4            | feature width d (`u32`)      |
//! | 4            | class count K (`u32`)        |
//! | 4·N·d        | features, row-major `f32`    |
//! | 4·N          | labels (`u32`)               |
//!
//! The CSV encoding has a header `label,f0,f1,...` and one sample per line.
//! Both loaders drop rows holding non-finite values and report how many.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::linalg::Mat64;

pub const BINARY_MAGIC: &[u8; 4] = b"VFEA";
pub const BINARY_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// Guesses from the extension: `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Mat64,
    labels: Vec<usize>,
    classes: usize,
    role: Role,
    dropped: usize,
}

impl FeatureDataset {
    pub fn new(features: Mat64, labels: Vec<usize>, classes: usize, role: Role) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(VoltaError::shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if classes == 0 {
            return Err(VoltaError::invalid("class count must be positive"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(VoltaError::invalid(format!("label {y} outside [0, {classes})")));
        }
        if !features.is_finite() {
            return Err(VoltaError::invalid("non-finite feature"));
        }
        Ok(FeatureDataset {
            features,
            labels,
            classes,
            role,
            dropped: 0,
        })
    }

    pub fn features(&self) -> &Mat64 {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Rows discarded at load time because they held non-finite values.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize], role: Role) -> FeatureDataset {
        FeatureDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            role,
            dropped: 0,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn load(path: impl AsRef<Path>, format: FileFormat, role: Role) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| VoltaError::io(path, e))?;
        let parsed = match format {
            FileFormat::Binary => Self::from_binary(&bytes, role),
            FileFormat::Csv => {
                let text = std::str::from_utf8(&bytes)
                    .map_err(|e| VoltaError::Parse(format!("not UTF-8: {e}")))?;
                Self::from_csv(text, None, role)
            }
        };
        parsed.map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
        let path = path.as_ref();
        let bytes = match format {
            FileFormat::Binary => self.to_binary()?,
            FileFormat::Csv => self.to_csv().into_bytes(),
        };
        std::fs::write(path, bytes).map_err(|e| VoltaError::io(path, e))
    }

    /// Features are narrowed to `f32`.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let d = u32::try_from(self.dim()).map_err(|_| VoltaError::invalid("feature width exceeds u32"))?;
        let k = u32::try_from(self.classes).map_err(|_| VoltaError::invalid("class count exceeds u32"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.features.as_slice().len() + 4 * self.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        for &x in self.features.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_binary(bytes: &[u8], role: Role) -> Result<Self> {
        let parse = |m: String| VoltaError::Parse(m);
        if bytes.len() < HEADER_LEN {
            return Err(parse(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != BINARY_MAGIC {
            return Err(parse("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != BINARY_VERSION {
            return Err(parse(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let d = u32_at(16) as usize;
        let k = u32_at(20) as usize;
        if d == 0 || k == 0 {
            return Err(parse("feature width and class count must be positive".into()));
        }
        // Validate the declared sizes against the actual length before
        // allocating anything proportional to them.
        let expected = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(d)?.checked_add(n))
            .and_then(|words| words.checked_mul(4)?.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(parse(format!(
                "header declares {n} rows of width {d} but the file holds {} bytes",
                bytes.len()
            )));
        }
        let n = n as usize;
        let body = &bytes[HEADER_LEN..];
        let (feat_bytes, label_bytes) = body.split_at(4 * n * d);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut dropped = 0;
        for (row, lab) in feat_bytes.chunks_exact(4 * d).zip(label_bytes.chunks_exact(4)) {
            let y = u32::from_le_bytes(lab.try_into().expect("4 bytes")) as usize;
            if y >= k {
                return Err(parse(format!("label {y} outside [0, {k})")));
            }
            let start = data.len();
            data.extend(
                row.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
            );
            if data[start..].iter().all(|x| x.is_finite()) {
                labels.push(y);
            } else {
                data.truncate(start);
                dropped += 1;
            }
        }
        finish(data, labels, d, k, role, dropped)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for (row, y) in self.features.row_iter().zip(&self.labels) {
            let _ = write!(out, "{y}");
            for x in row {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV encoding. Without an explicit class count it is taken
    /// as one more than the largest label.
    pub fn from_csv(text: &str, classes: Option<usize>, role: Role) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| VoltaError::Parse("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "label" {
            return Err(VoltaError::Parse("header must start with `label,f0`".into()));
        }
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(VoltaError::Parse(format!("header column {} is {c:?}, expected f{j}", j + 1)));
            }
        }
        let d = cols.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dropped = 0;
        let mut row = Vec::with_capacity(d);
        for (lineno, line) in lines {
            let mut fields = line.split(',').map(str::trim);
            let label = fields.next().unwrap_or_default();
            let y: usize = label
                .parse()
                .map_err(|_| VoltaError::Parse(format!("line {}: bad label {label:?}", lineno + 1)))?;
            row.clear();
            for f in fields {
                let x: f64 = f
                    .parse()
                    .map_err(|_| VoltaError::Parse(format!("line {}: bad value {f:?}", lineno + 1)))?;
                row.push(x);
            }
            if row.len() != d {
                return Err(VoltaError::Parse(format!(
                    "line {}: {} values, expected {d}",
                    lineno + 1,
                    row.len()
                )));
            }
            if let Some(k) = classes {
                if y >= k {
                    return Err(VoltaError::Parse(format!(
                        "line {}: label {y} outside [0, {k})",
                        lineno + 1
                    )));
                }
            }
            if row.iter().all(|x| x.is_finite()) {
                data.extend_from_slice(&row);
                labels.push(y);
            } else {
                dropped += 1;
            }
        }
        let k = match classes {
            Some(k) => k,
            None => labels.iter().max().map_or(1, |m| m + 1),
        };
        finish(data, labels, d, k, role, dropped)
    }
}

fn finish(
    data: Vec<f64>,
    labels: Vec<usize>,
    d: usize,
    k: usize,
    role: Role,
    dropped: usize,
) -> Result<FeatureDataset> {
    if labels.is_empty() {
        return Err(VoltaError::Parse(format!(
            "no usable rows ({dropped} dropped as non-finite)"
        )));
    }
    let features = Mat64::from_vec(labels.len(), d, data)?;
    Ok(FeatureDataset {
        features,
        labels,
        classes: k,
        role,
        dropped,
    })
}

/// Seeded train/validation index split. Indices come back sorted.
///
/// In stratified mode each class contributes `ceil(fraction·n_c)` samples
/// to the validation side.
pub fn split_indices(
    labels: &[usize],
    classes: usize,
    val_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(VoltaError::invalid(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = |n: usize| ((val_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    if stratified {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| VoltaError::invalid(format!("label {y} outside [0, {classes})")))?
                .push(i);
        }
        for (c, mut idx) in by_class.into_iter().enumerate() {
            if idx.is_empty() {
                return Err(VoltaError::invalid(format!("class {c} has no samples")));
            }
            idx.shuffle(&mut rng);
            let m = n_val(idx.len());
            val.extend_from_slice(&idx[..m]);
            train.extend_from_slice(&idx[m..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        let m = n_val(idx.len());
        val.extend_from_slice(&idx[..m]);
        train.extend_from_slice(&idx[m..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split(
    dataset: &FeatureDataset,
    val_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(FeatureDataset, FeatureDataset)> {
    let (tr, va) = split_indices(dataset.labels(), dataset.classes(), val_fraction, seed, stratified)?;
    Ok((dataset.subset(&tr, Role::Train), dataset.subset(&va, Role::Val)))
}

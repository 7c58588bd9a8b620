//! On-disk formats: CSV tables, datasets, score models and run metadata.
//! Every file is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, GaussianDist, SubspaceBasis};
use crate::error::{Error, Result};
use crate::optimizer::OptRunState;
use crate::score::{LinearScoreModel, ScoreClass};

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        Error::check_dim(self.header.len(), row.len(), "csv row")?;
        self.rows.push(row);
        Ok(())
    }

    /// Header row and data rows, LF line endings.
    pub fn body(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// `# config_hash=…` comment followed by the body.
    pub fn render(&self, hash: &str) -> String {
        format!("# config_hash={hash}\n{}", self.body())
    }

    pub fn write(&self, path: &Path, hash: &str) -> Result<()> {
        write_atomic(path, self.render(hash).as_bytes())
    }
}

fn parse_err(what: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Parse {
        what: what.into(),
        reason: reason.into(),
    }
}

/// Strip comment lines and the header, returning numeric rows.
fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let what = path.display().to_string();
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| parse_err(&what, "missing header row"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(&what, format!("row {}: {e}", i + 1)))?;
        if row.len() != header.len() {
            return Err(parse_err(
                &what,
                format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn matrix_table(m: &DMatrix<f64>, prefix: &str) -> CsvTable {
    let mut t = CsvTable::new((0..m.nrows()).map(|j| format!("{prefix}{j}")));
    for col in m.column_iter() {
        t.rows.push(col.iter().map(|&v| fmt_f64(v)).collect());
    }
    t
}

fn basis_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".basis.csv");
    path.with_file_name(name)
}

/// One sample per row; a subspace basis, when present, goes to
/// `<stem>.basis.csv` with one basis vector per row.
pub fn write_dataset(path: &Path, data: &Dataset, hash: &str) -> Result<()> {
    matrix_table(data.samples(), "x").write(path, hash)?;
    if let Some(b) = data.basis() {
        matrix_table(b.matrix(), "a").write(&basis_path(path), hash)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (_, rows) = read_numeric_csv(path)?;
    let bp = basis_path(path);
    let basis = if bp.exists() {
        let (header, cols) = read_numeric_csv(&bp)?;
        let m = DMatrix::from_fn(header.len(), cols.len(), |i, j| cols[j][i]);
        Some(SubspaceBasis::new(m)?)
    } else {
        None
    };
    Dataset::from_rows(&rows, basis)
}

/// Serialized form of a [`LinearScoreModel`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub class: String,
    pub dim: usize,
    /// `x̄` (mean-only, subspace), `μ̄` (full linear) or the refit bias mean (frozen covariance).
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    /// Rows are the ambient coordinates of the basis matrix `A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(parse_err(what, "ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn from_model(model: &LinearScoreModel) -> Self {
        let stats = model.stats();
        Self {
            class: model.class().name().to_string(),
            dim: model.dim(),
            mean: model.mean_param().iter().copied().collect(),
            stats_mean: match model.class() {
                ScoreClass::FrozenCov => stats.map(|s| s.mean.iter().copied().collect()),
                _ => None,
            },
            cov: stats.map(|s| rows_of(&s.cov)),
            basis: model.basis().map(|b| rows_of(b.matrix())),
        }
    }

    pub fn to_model(&self) -> Result<LinearScoreModel> {
        let mean = DVector::from_vec(self.mean.clone());
        Error::check_dim(self.dim, mean.len(), "model mean")?;
        let cov = || -> Result<DMatrix<f64>> {
            let rows = self.cov.as_ref().ok_or_else(|| parse_err("model", "missing cov"))?;
            matrix_of(rows, "model cov")
        };
        match ScoreClass::parse(&self.class)? {
            ScoreClass::MeanOnly => Ok(LinearScoreModel::mean_only(mean)),
            ScoreClass::FullLinear => LinearScoreModel::full_linear(GaussianDist::new(mean, cov()?)?),
            ScoreClass::FrozenCov => {
                let sm = self
                    .stats_mean
                    .clone()
                    .ok_or_else(|| parse_err("model", "missing stats_mean"))?;
                let stats = GaussianDist::new(DVector::from_vec(sm), cov()?)?;
                LinearScoreModel::frozen_cov(stats, mean)
            }
            ScoreClass::Subspace => {
                let rows = self.basis.as_ref().ok_or_else(|| parse_err("model", "missing basis"))?;
                let basis = SubspaceBasis::new(matrix_of(rows, "model basis")?)?;
                LinearScoreModel::subspace(basis, mean)
            }
        }
    }
}

pub fn write_model(path: &Path, model: &LinearScoreModel) -> Result<()> {
    let text = toml::to_string(&ModelFile::from_model(model)).map_err(|e| parse_err("model", e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_model(path: &Path) -> Result<LinearScoreModel> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile = toml::from_str(&text).map_err(|e| parse_err(path.display().to_string(), e.to_string()))?;
    file.to_model()
}

/// Structured-text sidecar recording how an output was produced.
pub fn write_metadata<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| parse_err("metadata", e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const TRAJECTORY_COLUMNS: [&str; 7] = ["k", "value", "gap", "off_support_ratio", "y", "grad_norm", "batch_size"];

/// One row per round.
pub fn trajectory_table(state: &OptRunState) -> CsvTable {
    let mut t = CsvTable::new(TRAJECTORY_COLUMNS);
    for r in &state.history {
        t.rows.push(vec![
            r.k.to_string(),
            fmt_f64(r.value),
            opt(r.gap),
            opt(r.off_support_ratio),
            fmt_f64(r.y),
            fmt_f64(r.grad.norm()),
            r.batch_size.to_string(),
        ]);
    }
    t
}

/// Mean, per-coordinate variance and covariance of a batch, one row per coordinate.
pub fn stats_table(stats: &GaussianDist) -> CsvTable {
    let n = stats.dim();
    let mut header = vec!["coord".to_string(), "mean".to_string()];
    header.extend((0..n).map(|j| format!("cov{j}")));
    let mut t = CsvTable {
        header,
        rows: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut row = vec![i.to_string(), fmt_f64(stats.mean[i])];
        row.extend((0..n).map(|j| fmt_f64(stats.cov[(i, j)])));
        t.rows.push(row);
    }
    t
}

/// Human-readable `key = value` lines, used for summaries.
pub fn key_values(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

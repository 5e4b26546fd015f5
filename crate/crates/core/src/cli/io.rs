use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::StudyRecord;

/// Columns with a fixed meaning; everything else is a numeric covariate.
pub const RESERVED: [&str; 8] = ["study_id", "cluster_id", "x", "sigma", "xr", "sigmar", "theta_star", "D"];

#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Column holding the cluster label; records are their own cluster otherwise.
    pub cluster: Option<String>,
    pub sign_normalized: bool,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn parse_num(raw: &str, line: u64, name: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Input(format!("line {line}, column '{name}': cannot parse '{raw}' as a number")))
}

/// Reads published studies from a CSV with a header row.
///
/// Rows with `D = 0` are latent draws that were not published and are dropped.
pub fn read_studies(path: &Path, opts: &ReadOptions) -> Result<Vec<StudyRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let mut seen = HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(Error::Input(format!("{}: duplicate column '{h}'", path.display())));
        }
    }
    let need = |name: &str| {
        column(&headers, name).ok_or_else(|| Error::Input(format!("{}: missing required column '{name}'", path.display())))
    };
    let (i_id, i_x, i_sigma) = (need("study_id")?, need("x")?, need("sigma")?);
    let (i_xr, i_sr, i_d) = (column(&headers, "xr"), column(&headers, "sigmar"), column(&headers, "D"));
    if i_xr.is_some() != i_sr.is_some() {
        return Err(Error::Input(format!("{}: columns 'xr' and 'sigmar' must appear together", path.display())));
    }
    let i_cluster = match &opts.cluster {
        Some(c) => Some(
            column(&headers, c)
                .ok_or_else(|| Error::Input(format!("{}: missing cluster column '{c}'", path.display())))?,
        ),
        None => None,
    };
    let covariates: Vec<(usize, &str)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| !RESERVED.contains(h) && Some(*i) != i_cluster)
        .collect();

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(i).unwrap_or("");
        if let Some(i) = i_d {
            match get(i) {
                "1" | "" => {}
                "0" => continue,
                v => return Err(Error::Input(format!("line {line}, column 'D': expected 0 or 1, got '{v}'"))),
            }
        }
        let id = get(i_id);
        if id.is_empty() {
            return Err(Error::Input(format!("line {line}, column 'study_id': missing value")));
        }
        let required = |i: usize, name: &str| {
            parse_num(get(i), line, name)?
                .ok_or_else(|| Error::Input(format!("line {line}, column '{name}': missing value")))
        };
        let mut r = StudyRecord::new(id, required(i_x, "x")?, required(i_sigma, "sigma")?);
        if let (Some(a), Some(b)) = (i_xr, i_sr) {
            r.xr = parse_num(get(a), line, "xr")?;
            r.sigmar = parse_num(get(b), line, "sigmar")?;
        }
        if let Some(i) = i_cluster {
            let c = get(i);
            if c.is_empty() {
                return Err(Error::Input(format!("line {line}, column '{}': missing cluster label", headers[i].to_string())));
            }
            r.cluster_id = c.to_string();
        }
        let mut cov = BTreeMap::new();
        for &(i, name) in &covariates {
            if let Some(v) = parse_num(get(i), line, name)? {
                if !v.is_finite() {
                    return Err(Error::Input(format!("line {line}, column '{name}': value must be finite")));
                }
                cov.insert(name.to_string(), v);
            }
        }
        r.covariates = cov;
        r.sign_normalized = opts.sign_normalized;
        r.validate().map_err(|e| Error::Input(format!("line {line}: {e}")))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no records", path.display())));
    }
    Ok(out)
}

/// 17 significant digits; parses back to the same value.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// A CSV table held in memory until written.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// `<path>.<suffix>`, appended to the full file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_time_seconds: f64,
}

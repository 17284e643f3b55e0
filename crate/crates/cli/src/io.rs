//! CSV tables, JSON sidecars and the model archive.

use std::fs;
use std::path::{Path, PathBuf};

use cedm_core::dag::Dag;
use cedm_core::diffusion::CedmModel;
use cedm_core::scm::{Dataset, DatasetMeta, Provenance};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ARCHIVE_FORMAT: &str = "cedm-model";
pub const ARCHIVE_VERSION: u32 = 1;

/// 17 significant digits, so values survive a text round trip exactly.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Header row and rows of already formatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

pub fn write_matrix(path: &Path, header: &[String], values: ArrayView2<f64>) -> Result<(), CliError> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = values.rows().into_iter().map(|r| r.iter().map(|&v| fmt_float(v)).collect()).collect();
    write_table(path, &h, &rows)
}

/// Reads a numeric CSV with a header row. Errors carry the 1-based line.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Data(format!("{}: line 1: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut flat = Vec::new();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("{}: line {line}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(CliError::Data(format!(
                "{}: line {line}: expected {} fields, found {}",
                path.display(),
                header.len(),
                rec.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Data(format!("{}: line {line}, column {:?}: cannot parse {field:?} as a number", path.display(), header[c]))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("{}: line {line}, column {:?}: non-finite value", path.display(), header[c])));
            }
            flat.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let values = Array2::from_shape_vec((n, header.len()), flat).expect("rows checked");
    Ok((header, values))
}

/// Loads a CSV whose header must equal the graph's column names.
pub fn read_dataset(path: &Path, dag: &Dag) -> Result<Dataset, CliError> {
    let (header, values) = read_matrix(path)?;
    let expected = dag.layout().column_names();
    if header != expected {
        return Err(CliError::Data(format!(
            "{}: columns [{}] do not match the graph layout; expected [{}]",
            path.display(),
            header.join(","),
            expected.join(",")
        )));
    }
    Ok(Dataset::new(values, dag.layout().clone(), DatasetMeta { seed: None, provenance: Provenance::External })?)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: usize,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model_hash: Option<String>,
}

pub fn write_dataset(path: &Path, data: &Dataset, command: &str, seed: u64, model_hash: Option<String>) -> Result<(), CliError> {
    let columns = data.layout().column_names();
    write_matrix(path, &columns, data.values())?;
    let meta = Sidecar { command: command.into(), seed, columns, rows: data.n(), provenance: data.meta.provenance.clone(), model_hash };
    write_json(&sidecar_path(path), &meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    format: String,
    version: u32,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Archive bytes: a one-line JSON header carrying format, version and the
/// SHA-256 of everything after the newline, then the model as JSON.
pub fn encode_archive(model: &CedmModel) -> Vec<u8> {
    let payload = serde_json::to_vec(model).expect("model serialises");
    let header = ArchiveHeader { format: ARCHIVE_FORMAT.into(), version: ARCHIVE_VERSION, sha256: sha256_hex(&payload) };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<CedmModel, CliError> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CliError::Data("model archive: missing header line".into()))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CliError::Data(format!("model archive header: {e}")))?;
    if header.format != ARCHIVE_FORMAT {
        return Err(CliError::Data(format!("not a model archive (format {:?})", header.format)));
    }
    if header.version != ARCHIVE_VERSION {
        return Err(CliError::Data(format!("unsupported archive version {} (expected {ARCHIVE_VERSION})", header.version)));
    }
    let payload = &bytes[nl + 1..];
    let actual = sha256_hex(payload);
    if actual != header.sha256 {
        return Err(CliError::Data(format!("model archive is corrupted: hash {actual} does not match recorded {}", header.sha256)));
    }
    serde_json::from_slice(payload).map_err(|e| CliError::Data(format!("model archive payload: {e}")))
}

pub fn save_archive(path: &Path, model: &CedmModel) -> Result<(), CliError> {
    write_file(path, &encode_archive(model))
}

pub fn load_archive(path: &Path) -> Result<CedmModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_archive(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cedm_core::diffusion::{DiffusionSchedule, TrainConfig};
    use cedm_core::scm::{build_benchmark, Benchmark, BenchmarkParams};

    fn model() -> CedmModel {
        let spec = build_benchmark(Benchmark::Chain3, &BenchmarkParams { slate_dim: Some(1), ..Default::default() }).unwrap();
        let data = spec.sample_observational(100, 0).unwrap();
        let cfg = TrainConfig { hidden: vec![8], epochs: 2, batch_size: 50, min_steps: 0, ..Default::default() };
        CedmModel::train(&data, spec.dag(), DiffusionSchedule::default(), &cfg, 3).unwrap()
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456.789, 0.0, f64::MIN_POSITIVE] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn archive_round_trip_and_corruption() {
        let m = model();
        let bytes = encode_archive(&m);
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_archive(&back), bytes);
        let mut bad = bytes.clone();
        let last = bad.len() - 5;
        bad[last] = if bad[last] == b'1' { b'2' } else { b'1' };
        let err = decode_archive(&bad).unwrap_err();
        assert!(err.to_string().contains("corrupted"), "{err}");
        let text = String::from_utf8(bytes).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(decode_archive(text.as_bytes()).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn csv_errors_are_line_anchored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        let err = read_matrix(&p).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert_eq!(err.exit_code(), 3);
        fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(read_matrix(&p).unwrap_err().to_string().contains("line 3"));
    }

    #[test]
    fn dataset_header_must_match_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let dag = Dag::new(vec![1, 2], [(0, 1)]).unwrap();
        fs::write(&p, "X1,X2[1]\n1,2\n").unwrap();
        let err = read_dataset(&p, &dag).unwrap_err();
        assert!(err.to_string().contains("expected [X1,X2[1],X2[2]]"), "{err}");
        fs::write(&p, "X1,X2[1],X2[2]\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(read_dataset(&p, &dag).unwrap().n(), 2);
    }
}

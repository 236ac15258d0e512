//! On-disk layouts. All integers and floats are little-endian.
//!
//! Matrix file (`.rkm`), 72-byte header followed by the data:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `RKROMMAT`                        |
//! | 8      | 4    | format version (u32, currently 1)       |
//! | 12     | 4    | kind (u32): 1 trajectory, 2 basis, 3 mean |
//! | 16     | 8    | rows (u64)                              |
//! | 24     | 8    | cols (u64)                              |
//! | 32     | 8    | step size in seconds (f64, 0 if unused) |
//! | 40     | 32   | SHA-256 of the data section             |
//! | 72     | 8 rows cols | entries as f64, row-major        |
//!
//! A trajectory stores one row per time point, so a `k`-step run has `k + 1`
//! rows of `N` temperatures (kelvin).
//!
//! Model file (`.rknet`): magic `RKROMNET`, version (u32), metadata length
//! (u64), metadata as UTF-8 JSON, parameter count (u64), the parameters as
//! f64 in [`MlpCore::to_flat`] order, and finally the SHA-256 of every
//! preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rkrom_core::fom::Trajectory;
use rkrom_core::pod::ReducedBasis;
use rkrom_core::sampling::SamplingKind;
use rkrom_core::surrogate::{Activation, MlpCore, Mode, Normalizer, SurrogateNet, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"RKROMMAT";
pub const MODEL_MAGIC: &[u8; 8] = b"RKROMNET";
pub const FORMAT_VERSION: u32 = 1;
const MATRIX_HEADER_LEN: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum MatrixKind {
    Trajectory = 1,
    Basis = 2,
    Mean = 3,
}

impl MatrixKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(MatrixKind::Trajectory),
            2 => Some(MatrixKind::Basis),
            3 => Some(MatrixKind::Mean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixHeader {
    pub version: u32,
    pub kind: MatrixKind,
    pub rows: usize,
    pub cols: usize,
    pub tau: f64,
    pub digest: [u8; 32],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_matrix(kind: MatrixKind, m: &DMatrix<f64>, tau: f64) -> Vec<u8> {
    let mut data = Vec::with_capacity(8 * m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + data.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    out.extend_from_slice(&tau.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&data));
    out.extend_from_slice(&data);
    out
}

fn corrupt(what: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Provenance(format!("{what}: {detail}"))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses and digest-checks a matrix file.
pub fn decode_matrix(bytes: &[u8]) -> Result<(MatrixHeader, DMatrix<f64>)> {
    if bytes.len() < MATRIX_HEADER_LEN || &bytes[..8] != MATRIX_MAGIC {
        return Err(corrupt("matrix file", "bad magic or truncated header"));
    }
    let version = u32_at(bytes, 8);
    if version != FORMAT_VERSION {
        return Err(corrupt("matrix file", format!("unsupported version {version}")));
    }
    let kind = MatrixKind::from_u32(u32_at(bytes, 12)).ok_or_else(|| corrupt("matrix file", "unknown kind"))?;
    let rows = u64_at(bytes, 16) as usize;
    let cols = u64_at(bytes, 24) as usize;
    let tau = f64_at(bytes, 32);
    let digest: [u8; 32] = bytes[40..72].try_into().expect("32 bytes");
    let data = &bytes[MATRIX_HEADER_LEN..];
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
    if expected != Some(data.len()) {
        return Err(corrupt("matrix file", format!("{rows}x{cols} header but {} data bytes", data.len())));
    }
    if Sha256::digest(data).as_slice() != digest {
        return Err(corrupt("matrix file", "data digest mismatch"));
    }
    let m = DMatrix::from_fn(rows, cols, |r, c| f64_at(data, 8 * (r * cols + c)));
    Ok((
        MatrixHeader {
            version,
            kind,
            rows,
            cols,
            tau,
            digest,
        },
        m,
    ))
}

fn expect_kind(header: &MatrixHeader, kind: MatrixKind, path: &Path) -> Result<()> {
    if header.kind != kind {
        return Err(corrupt(
            &path.display().to_string(),
            format!("expected a {kind:?} matrix, found {:?}", header.kind),
        ));
    }
    Ok(())
}

pub fn encode_trajectory(traj: &Trajectory) -> Vec<u8> {
    encode_matrix(MatrixKind::Trajectory, &traj.states.transpose(), traj.tau())
}

/// Inspection copy of a trajectory: one row per time point, temperatures in K.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t_s");
    for i in 0..traj.n_state() {
        out.push_str(&format!(",y{i}_k"));
    }
    out.push('\n');
    for (j, t) in traj.times.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in traj.states.column(j).iter() {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

/// Training loss per epoch.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{l:e}\n", i + 1));
    }
    out
}

/// Rebuilds a trajectory; the time grid is `j * tau`.
pub fn decode_trajectory(bytes: &[u8], signal_id: usize) -> Result<Trajectory> {
    let (header, m) = decode_matrix(bytes)?;
    if header.kind != MatrixKind::Trajectory || header.rows < 2 {
        return Err(corrupt("trajectory file", "not a trajectory with at least two time points"));
    }
    Ok(Trajectory {
        times: (0..header.rows).map(|j| j as f64 * header.tau).collect(),
        states: m.transpose(),
        signal_id,
    })
}

pub fn read_trajectory(path: &Path, signal_id: usize) -> Result<Trajectory> {
    decode_trajectory(&read(path)?, signal_id)
}

/// Everything of a [`ReducedBasis`] except the mode matrix and the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub n_r: usize,
    pub requested_n_r: usize,
    pub rank: usize,
    pub centered: bool,
    pub source_hash: String,
    pub singular_values: Vec<f64>,
}

pub fn basis_meta(basis: &ReducedBasis) -> BasisMeta {
    BasisMeta {
        n_r: basis.n_r,
        requested_n_r: basis.requested_n_r,
        rank: basis.rank,
        centered: basis.mean.is_some(),
        source_hash: basis.source_hash.clone(),
        singular_values: basis.singular_values.iter().copied().collect(),
    }
}

/// Loads `basis.rkm`, `basis.json` and, for centred bases, `mean.rkm` from `dir`.
pub fn read_basis(dir: &Path) -> Result<ReducedBasis> {
    let meta: BasisMeta = read_json(&dir.join("basis.json"))?;
    let path = dir.join("basis.rkm");
    let (header, modes) = decode_matrix(&read(&path)?)?;
    expect_kind(&header, MatrixKind::Basis, &path)?;
    if modes.ncols() != meta.n_r {
        return Err(corrupt("basis", format!("{} columns for n_r = {}", modes.ncols(), meta.n_r)));
    }
    let mean = if meta.centered {
        let path = dir.join("mean.rkm");
        let (header, m) = decode_matrix(&read(&path)?)?;
        expect_kind(&header, MatrixKind::Mean, &path)?;
        Some(DVector::from_column_slice(m.as_slice()))
    } else {
        None
    };
    Ok(ReducedBasis {
        basis: modes,
        singular_values: DVector::from_vec(meta.singular_values),
        n_r: meta.n_r,
        requested_n_r: meta.requested_n_r,
        rank: meta.rank,
        mean,
        source_hash: meta.source_hash,
    })
}

/// Descriptive part of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mode: Mode,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub tau_train_s: f64,
    pub normalizer: Normalizer,
    pub sampling: SamplingKind,
    pub n_r: usize,
    pub seed: u64,
    pub training: TrainingConfig,
    pub basis_digest: String,
    pub config_hash: String,
}

pub fn encode_model(net: &SurrogateNet, meta: &ModelMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| CliError::Config(e.to_string()))?;
    let params = net.core().to_flat();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + 8 * params.len() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(SurrogateNet, ModelMeta)> {
    let bad = |d: &str| corrupt("model file", d);
    if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("bad magic or truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch"));
    }
    let version = u32_at(body, 8);
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let json_len = u64_at(body, 12) as usize;
    let json_end = 20usize.checked_add(json_len).filter(|e| e + 8 <= body.len()).ok_or_else(|| bad("metadata overruns the file"))?;
    let meta: ModelMeta = serde_json::from_slice(&body[20..json_end]).map_err(|e| bad(&e.to_string()))?;
    let count = u64_at(body, json_end) as usize;
    let params_at = json_end + 8;
    if count.checked_mul(8).map(|n| params_at + n) != Some(body.len()) {
        return Err(bad("parameter count disagrees with the file length"));
    }
    let flat: Vec<f64> = (0..count).map(|i| f64_at(body, params_at + 8 * i)).collect();
    let core = MlpCore::from_flat(&meta.layer_sizes, meta.activation, &flat)?;
    let net = SurrogateNet::new(core, meta.mode, meta.tau_train_s, meta.normalizer.clone())?;
    Ok((net, meta))
}

pub fn read_model(path: &Path) -> Result<(SurrogateNet, ModelMeta)> {
    decode_model(&read(path)?).map_err(|e| match e {
        CliError::Provenance(m) => CliError::Provenance(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Written in place of an artifact whose computation failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureMarker {
    pub kind: String,
    pub message: String,
    pub config_hash: String,
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Provenance(format!("{}: {e}", path.display())))
}

pub fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

/// Writes to a temporary sibling and renames it over `path`, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = DMatrix::from_fn(3, 4, |r, c| (r as f64 + 0.1) * (c as f64 - 1.7).exp());
        let bytes = encode_matrix(MatrixKind::Basis, &m, 0.0);
        assert_eq!(bytes.len(), 72 + 8 * 12);
        let (header, back) = decode_matrix(&bytes).unwrap();
        assert_eq!(header.kind, MatrixKind::Basis);
        assert_eq!((header.rows, header.cols), (3, 4));
        assert_eq!(back, m);
        // row-major: the second stored value is m[(0, 1)]
        assert_eq!(f64_at(&bytes, 80), m[(0, 1)]);
    }

    #[test]
    fn flipped_data_byte_is_detected() {
        let mut bytes = encode_matrix(MatrixKind::Mean, &DMatrix::from_element(2, 1, 1.5), 0.0);
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(decode_matrix(&bytes), Err(CliError::Provenance(_))));
        assert!(matches!(decode_matrix(b"RKROMNET"), Err(CliError::Provenance(_))));
    }

    #[test]
    fn trajectory_records_are_time_points() {
        let traj = Trajectory {
            times: (0..11).map(|j| j as f64 * 0.5).collect(),
            states: DMatrix::from_fn(4, 11, |i, j| 300.0 + i as f64 + 0.01 * j as f64),
            signal_id: 0,
        };
        let bytes = encode_trajectory(&traj);
        let (header, _) = decode_matrix(&bytes).unwrap();
        assert_eq!((header.rows, header.cols, header.tau), (11, 4, 0.5));
        assert_eq!(decode_trajectory(&bytes, 0).unwrap(), traj);
    }
}

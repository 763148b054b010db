//! Dataset and parameter files.
//!
//! A dataset directory holds
//!
//! * `data.bin`: the `T x p` matrix as little-endian `f64`, time-major, with
//!   unobserved entries stored as NaN,
//! * `data.json`: `{"p", "T", "dtype": "f64", "layout": "time-major"}`,
//! * `scheme.json`: the observation scheme,
//! * `truth.json` (optional): generating parameters.
//!
//! Parameter files store matrices as row-major nested arrays. Above
//! [`SIDECAR_MIN_P`] variables the loadings go to a binary sidecar
//! (`<stem>_C.bin`, row-major `p x n`) next to the JSON file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentMoments, LdsParams, MomentModel};
use crate::observation::{MaskedTimeSeries, ObservationScheme, SchemeJson};
use crate::s3id::FittedModel;

pub const DATA_BIN: &str = "data.bin";
pub const DATA_HEADER: &str = "data.json";
pub const SCHEME_FILE: &str = "scheme.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Loadings of models with more variables than this are written as a sidecar.
pub const SIDECAR_MIN_P: usize = 10_000;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.to_string() }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| format_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_err(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    let len = file.metadata().map_err(io_err(path))?.len();
    if len != 8 * expected as u64 {
        return Err(format_err(path, format!("{len} bytes, expected {} for {expected} values", 8 * expected)));
    }
    let mut bytes = Vec::with_capacity(8 * expected);
    BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataHeader {
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub dtype: String,
    pub layout: String,
}

impl DataHeader {
    pub fn new(p: usize, t: usize) -> Self {
        Self { p, t, dtype: "f64".into(), layout: "time-major".into() }
    }
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: MaskedTimeSeries,
    pub truth: Option<LdsParams>,
}

/// Writes all dataset files into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &MaskedTimeSeries, truth: Option<&LdsParams>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_f64s(&dir.join(DATA_BIN), data.values().iter().copied())?;
    write_json(&dir.join(DATA_HEADER), &DataHeader::new(data.p(), data.t()))?;
    write_json(&dir.join(SCHEME_FILE), &data.scheme.to_json())?;
    if let Some(truth) = truth {
        write_params(&dir.join(TRUTH_FILE), &FittedModel::Linear(truth.clone()))?;
    }
    Ok(())
}

pub fn read_scheme(path: &Path) -> Result<ObservationScheme> {
    let json: SchemeJson = read_json(path)?;
    ObservationScheme::from_json(&json).map_err(|e| format_err(path, e))
}

/// Reads a dataset directory; the NaN pattern is checked against the scheme.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join(DATA_HEADER);
    let header: DataHeader = read_json(&header_path)?;
    if header.dtype != "f64" || header.layout != "time-major" {
        return Err(format_err(&header_path, format!("unsupported dtype {} / layout {}", header.dtype, header.layout)));
    }
    let scheme_path = dir.join(SCHEME_FILE);
    let scheme = read_scheme(&scheme_path)?;
    if (scheme.p, scheme.t) != (header.p, header.t) {
        return Err(format_err(
            &scheme_path,
            format!("scheme is {}x{}, header says p={} T={}", scheme.p, scheme.t, header.p, header.t),
        ));
    }
    let bin = dir.join(DATA_BIN);
    let values = read_f64s(&bin, header.p * header.t)?;
    let data = MaskedTimeSeries::new(values, scheme).map_err(|e| format_err(&bin, e))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        match read_params(&truth_path)? {
            FittedModel::Linear(p) => Some(p),
            FittedModel::Nonlinear(_) => return Err(format_err(&truth_path, "truth must be a full LDS")),
        }
    } else {
        None
    };
    Ok(Dataset { data, truth })
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &Rows, what: &str, path: &Path) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format_err(path, format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ParamsKind {
    Lds,
    Moments,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    kind: ParamsKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    p: usize,
    n: usize,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    c: Option<Rows>,
    #[serde(rename = "C_file", default, skip_serializing_if = "Option::is_none")]
    c_file: Option<String>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Rows>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<Rows>,
    #[serde(rename = "Pi0", default, skip_serializing_if = "Option::is_none")]
    pi0: Option<Rows>,
    /// `Pi_s` for `s = 0..=S` (moments only).
    #[serde(rename = "Pi", default, skip_serializing_if = "Option::is_none")]
    lags: Option<Vec<Rows>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "params".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_C.bin"))
}

/// Writes a fitted model; loadings go to a sidecar above [`SIDECAR_MIN_P`].
pub fn write_params(path: &Path, model: &FittedModel) -> Result<()> {
    write_params_tagged(path, model, None)
}

/// As [`write_params`], recording the name of the method that produced the model.
pub fn write_params_tagged(path: &Path, model: &FittedModel, method: Option<&str>) -> Result<()> {
    let c = model.c();
    let (p, n) = c.shape();
    let (c_rows, c_file) = if p > SIDECAR_MIN_P {
        let side = sidecar_path(path);
        write_f64s(&side, c.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))?;
        (None, side.file_name().map(|s| s.to_string_lossy().into_owned()))
    } else {
        (Some(to_rows(c)), None)
    };
    let file = match model {
        FittedModel::Linear(m) => ParamsFile {
            kind: ParamsKind::Lds,
            method: method.map(str::to_owned),
            p,
            n,
            c: c_rows,
            c_file,
            r: m.r.iter().copied().collect(),
            a: Some(to_rows(&m.a)),
            q: Some(to_rows(&m.q)),
            pi0: Some(to_rows(&m.pi0)),
            lags: None,
        },
        FittedModel::Nonlinear(m) => ParamsFile {
            kind: ParamsKind::Moments,
            method: method.map(str::to_owned),
            p,
            n,
            c: c_rows,
            c_file,
            r: m.r.iter().copied().collect(),
            a: None,
            q: None,
            pi0: None,
            lags: Some(m.moments.lags.iter().map(to_rows).collect()),
        },
    };
    write_json(path, &file)
}

pub fn read_params(path: &Path) -> Result<FittedModel> {
    read_params_tagged(path).map(|(m, _)| m)
}

/// Reads a fitted model and the method name stored with it, if any.
pub fn read_params_tagged(path: &Path) -> Result<(FittedModel, Option<String>)> {
    let file: ParamsFile = read_json(path)?;
    let method = file.method.clone();
    read_model(path, file).map(|m| (m, method))
}

fn read_model(path: &Path, file: ParamsFile) -> Result<FittedModel> {
    let (p, n) = (file.p, file.n);
    let c = match (&file.c, &file.c_file) {
        (Some(rows), None) => from_rows(rows, "C", path)?,
        (None, Some(name)) => {
            let side = path.with_file_name(name);
            let v = read_f64s(&side, p * n)?;
            DMatrix::from_row_slice(p, n, &v)
        }
        _ => return Err(format_err(path, "exactly one of C and C_file must be present")),
    };
    if c.shape() != (p, n) || file.r.len() != p {
        return Err(format_err(path, format!("C is {:?} and R has {} entries, header says p={p} n={n}", c.shape(), file.r.len())));
    }
    let r = DVector::from_vec(file.r.clone());
    let square = |rows: &Option<Rows>, what: &str| -> Result<DMatrix<f64>> {
        let rows = rows.as_ref().ok_or_else(|| format_err(path, format!("missing {what}")))?;
        let m = from_rows(rows, what, path)?;
        if m.shape() != (n, n) {
            return Err(format_err(path, format!("{what} is {:?}, expected {n}x{n}", m.shape())));
        }
        Ok(m)
    };
    match file.kind {
        ParamsKind::Lds => Ok(FittedModel::Linear(LdsParams {
            a: square(&file.a, "A")?,
            c,
            q: square(&file.q, "Q")?,
            r,
            pi0: square(&file.pi0, "Pi0")?,
        })),
        ParamsKind::Moments => {
            let lags = file.lags.as_ref().ok_or_else(|| format_err(path, "missing Pi"))?;
            if lags.is_empty() {
                return Err(format_err(path, "Pi needs at least the lag-0 moment"));
            }
            let lags = lags.iter().map(|m| square(&Some(m.clone()), "Pi_s")).collect::<Result<Vec<_>>>()?;
            Ok(FittedModel::Nonlinear(MomentModel { c, moments: LatentMoments { lags }, r }))
        }
    }
}

//! Simulate, fit and evaluate pipelines behind the `stitch` binary.

pub mod config;
pub mod error;

use std::fs;
use std::path::{Path, PathBuf};

use lds_stitch::eval::{
    fa_em, largest_principal_angle, posthoc_align, prediction_correlation, spectrum_report, subspace_projection_error,
    unobserved_pairs, EvalReport, SpectrumReport, TruthSource,
};
use lds_stitch::io::{self, Dataset};
use lds_stitch::model::{generate_random_lds, simulate, LatentMoments, MomentModel};
use lds_stitch::observation::{compute_cooccurrence_groups, MaskedTimeSeries, ObservationScheme};
use lds_stitch::rng::{substream, Stream};
use lds_stitch::s3id::{fit_s3id, FittedModel, Mode, S3idFit};
use lds_stitch::sem::{fit_sem, SemFit, SemInit};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use config::{load_config, EvalConfig, LoadedConfig, RunConfig, SchemeConfig};
pub use error::{CliError, ExitCode};

/// Iterations of per-session factor analysis in the post-hoc baseline.
pub const FA_ITERS: usize = 100;

pub const PARAMS_FILE: &str = "params.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const S3ID_TRACE_FILE: &str = "s3id_trace.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    S3id,
    Sem,
    S3idSem,
    FaPosthoc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::S3id => "s3id",
            Method::Sem => "sem",
            Method::S3idSem => "s3id+sem",
            Method::FaPosthoc => "fa-posthoc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "s3id" => Ok(Method::S3id),
            "sem" => Ok(Method::Sem),
            "s3id+sem" => Ok(Method::S3idSem),
            "fa-posthoc" => Ok(Method::FaPosthoc),
            other => Err(CliError::usage(format!(
                "unknown method {other:?}; expected one of s3id, sem, s3id+sem, fa-posthoc"
            ))),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Simulates a dataset as described by the `sim` and `scheme` sections.
pub fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let sim = cfg.require(&cfg.config.sim, "sim")?;
    let scheme_cfg = cfg.config.scheme.clone().unwrap_or(SchemeConfig::Full);
    let scheme = scheme_cfg.build(sim.p, sim.t).map_err(|e| cfg.error("scheme", e))?;
    let truth = generate_random_lds(sim).map_err(|e| cfg.error("sim", e))?;
    let (y, _) = simulate(&truth, sim.t, sim.seed)?;
    let data = MaskedTimeSeries::from_full(&y, scheme)?;
    io::write_dataset(out_dir, &data, Some(&truth))?;
    log::info!("wrote p={} T={} dataset to {}", sim.p, sim.t, out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    method: &'a str,
    exit_code: i32,
    error: &'a str,
}

/// Fits `method` to the dataset in `data_dir` and writes parameters and traces into `out_dir`.
pub fn cmd_fit(data_dir: &Path, method: Method, config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let dataset = io::read_dataset(data_dir)?;
    create_dir(out_dir)?;
    let result = run_fit(&dataset, method, &cfg, out_dir);
    if let Err(e) = &result {
        if e.code == ExitCode::Numerical {
            let diag = Diagnostics { method: method.name(), exit_code: e.exit_code(), error: &e.message };
            io::write_json(&out_dir.join(DIAGNOSTICS_FILE), &diag)?;
        }
    }
    result
}

fn run_fit(dataset: &Dataset, method: Method, cfg: &LoadedConfig, out_dir: &Path) -> Result<(), CliError> {
    let data = &dataset.data;
    let params_path = out_dir.join(PARAMS_FILE);
    let trace_path = out_dir.join(TRACE_FILE);
    match method {
        Method::S3id => {
            let s3 = cfg.require(&cfg.config.s3id, "s3id")?;
            let fit = fit_s3id(data, s3)?;
            io::write_params_tagged(&params_path, &fit.fitted, Some(method.name()))?;
            write_csv(&trace_path, &fit.trace)?;
        }
        Method::Sem => {
            let sem = cfg.require(&cfg.config.sem, "sem")?;
            let fit = fit_sem(data, sem, &SemInit::Random)?;
            write_sem(&fit, method, &params_path, &trace_path)?;
        }
        Method::S3idSem => {
            let mut s3 = cfg.require(&cfg.config.s3id, "s3id")?.clone();
            let sem = cfg.require(&cfg.config.sem, "sem")?;
            if s3.mode != Mode::Linear {
                return Err(cfg.error("s3id", "s3id+sem needs linear mode to initialize the dynamics"));
            }
            if s3.n != sem.n {
                return Err(cfg.error("sem", format!("n = {} differs from s3id n = {}", sem.n, s3.n)));
            }
            s3.passes = 1;
            let init: S3idFit = fit_s3id(data, &s3)?;
            write_csv(&out_dir.join(S3ID_TRACE_FILE), &init.trace)?;
            let params = init.fitted.as_params().expect("linear mode exports params").clone();
            let fit = fit_sem(data, sem, &SemInit::Params(params))?;
            write_sem(&fit, method, &params_path, &trace_path)?;
        }
        Method::FaPosthoc => {
            let n = match (&cfg.config.s3id, &cfg.config.sem) {
                (Some(s), _) => s.n,
                (None, Some(s)) => s.n,
                (None, None) => return Err(CliError::usage("fa-posthoc takes n from the s3id or sem section")),
            };
            let seed = cfg.config.s3id.as_ref().map_or_else(|| cfg.config.sem.as_ref().map_or(0, |s| s.seed), |s| s.seed);
            let (model, trace) = fa_posthoc(data, n, seed)?;
            io::write_params_tagged(&params_path, &model, Some(method.name()))?;
            write_csv(&trace_path, &trace)?;
        }
    }
    log::info!("{} fit written to {}", method.name(), out_dir.display());
    Ok(())
}

fn write_sem(fit: &SemFit, method: Method, params: &Path, trace: &Path) -> Result<(), CliError> {
    io::write_params_tagged(params, &FittedModel::Linear(fit.params.clone()), Some(method.name()))?;
    write_csv(trace, &fit.trace)
}

#[derive(Debug, Clone, Serialize)]
pub struct FaTracePoint {
    pub session: usize,
    pub iter: usize,
    pub loglik: f64,
}

/// Per-session factor analysis followed by chained alignment onto session 0.
pub fn fa_posthoc(data: &MaskedTimeSeries, n: usize, seed: u64) -> lds_stitch::Result<(FittedModel, Vec<FaTracePoint>)> {
    let p = data.p();
    let mut estimates = Vec::new();
    let mut r_sum = DVector::<f64>::zeros(p);
    let mut r_count = vec![0usize; p];
    let mut trace = Vec::new();
    for (k, seg) in data.scheme.segments.iter().enumerate() {
        let idx: Vec<usize> = seg.indices().collect();
        let block = DMatrix::from_fn(idx.len(), seg.len(), |r, c| data.row(seg.start + c)[idx[r]]);
        let fit = fa_em(&block, n, FA_ITERS, seed.wrapping_add(k as u64))?;
        for (iter, ll) in fit.loglik.iter().enumerate() {
            trace.push(FaTracePoint { session: k, iter, loglik: *ll });
        }
        for (r, &i) in idx.iter().enumerate() {
            r_sum[i] += fit.r[r];
            r_count[i] += 1;
        }
        estimates.push((idx, fit.c));
    }
    let c = posthoc_align(&estimates, 0, p)?;
    let r = DVector::from_fn(p, |i, _| if r_count[i] > 0 { r_sum[i] / r_count[i] as f64 } else { 0.0 });
    let moments = LatentMoments { lags: vec![DMatrix::identity(n, n)] };
    Ok((FittedModel::Nonlinear(MomentModel { c, moments, r }), trace))
}

/// Ground truth for evaluation.
pub enum Truth {
    Params(FittedModel),
    HeldOut(MaskedTimeSeries),
}

/// Reads truth parameters from a file, or held-out data from a dataset directory.
pub fn load_truth(path: &Path) -> Result<Truth, CliError> {
    if path.is_dir() {
        Ok(Truth::HeldOut(io::read_dataset(path)?.data))
    } else {
        Ok(Truth::Params(io::read_params(path)?))
    }
}

/// Builds the evaluation report of `model` against `truth` under `scheme`.
pub fn evaluate(
    model: &FittedModel,
    method: &str,
    truth: &Truth,
    scheme: &ObservationScheme,
    cfg: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let p = model.c().nrows();
    if scheme.p != p {
        return Err(CliError::usage(format!("model has p = {p}, scheme has p = {}", scheme.p)));
    }
    let truth_p = match truth {
        Truth::Params(t) => t.c().nrows(),
        Truth::HeldOut(d) => d.p(),
    };
    if truth_p != p {
        return Err(CliError::usage(format!("model has p = {p}, truth has p = {truth_p}")));
    }
    let (projection_error, largest_principal_angle) = match truth {
        Truth::Params(t) => {
            if t.c().ncols() == 0 {
                (None, None)
            } else {
                (
                    Some(subspace_projection_error(t.c(), model.c())?),
                    Some(largest_principal_angle(t.c(), model.c()).map_err(CliError::from)?),
                )
            }
        }
        Truth::HeldOut(_) => (None, None),
    };
    let source = match truth {
        Truth::Params(t) => TruthSource::Model(t.as_lagged()),
        Truth::HeldOut(d) => TruthSource::HeldOut(d),
    };
    let groups = compute_cooccurrence_groups(scheme, cfg.max_lag);
    let mut rng = substream(cfg.seed, Stream::Eval);
    let lags_available = |m: Option<usize>, s: usize| m.is_none_or(|max| s <= max);
    let truth_lags = match truth {
        Truth::Params(t) => t.max_lag(),
        Truth::HeldOut(_) => None,
    };
    let mut corr = Vec::with_capacity(cfg.max_lag + 1);
    let mut counts = Vec::with_capacity(cfg.max_lag + 1);
    for s in 0..=cfg.max_lag {
        if !lags_available(model.max_lag(), s) || !lags_available(truth_lags, s) {
            corr.push(None);
            counts.push(0);
            continue;
        }
        match unobserved_pairs(&groups, s, cfg.pair_sample, &mut rng) {
            Ok(pairs) => {
                let c = match prediction_correlation(model.as_lagged(), &source, s, &pairs) {
                    Ok(c) => Some(c),
                    Err(lds_stitch::Error::UndefinedMetric(msg)) => {
                        log::warn!("lag {s}: {msg}");
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                corr.push(c);
                counts.push(pairs.len());
            }
            Err(lds_stitch::Error::UndefinedMetric(msg)) => {
                log::warn!("{msg}");
                corr.push(None);
                counts.push(0);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let spectra = spectrum_report(model.pi0(), model.as_params().map(|m| &m.a));
    Ok(EvalReport {
        method: method.to_owned(),
        projection_error,
        largest_principal_angle,
        prediction_correlation_per_lag: corr,
        pairs_per_lag: counts,
        spectra,
    })
}

#[derive(Serialize)]
struct SpectrumRow {
    k: usize,
    pi0_eigenvalue: f64,
    pi0_ratio: Option<f64>,
    a_modulus: Option<f64>,
}

#[derive(Serialize)]
struct CorrelationRow {
    lag: usize,
    correlation: Option<f64>,
    pairs: usize,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn spectrum_rows(s: &SpectrumReport) -> Vec<SpectrumRow> {
    s.pi0_eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &v)| SpectrumRow {
            k: k + 1,
            pi0_eigenvalue: v,
            pi0_ratio: s.pi0_ratios.get(k).copied(),
            a_modulus: s.a_moduli.get(k).copied(),
        })
        .collect()
}

/// Evaluates a parameter file and writes the report JSON plus spectra and
/// correlation CSVs (`<stem>_spectra.csv`, `<stem>_correlation.csv`).
pub fn cmd_eval(
    params_path: &Path,
    truth_path: &Path,
    scheme_path: &Path,
    out_path: &Path,
    cfg: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let (model, method) = io::read_params_tagged(params_path)?;
    let truth = load_truth(truth_path)?;
    let scheme = io::read_scheme(scheme_path)?;
    let method = method.unwrap_or_else(|| "unknown".into());
    let report = evaluate(&model, &method, &truth, &scheme, cfg)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    io::write_json(out_path, &report)?;
    write_csv(&sibling(out_path, "spectra"), &spectrum_rows(&report.spectra))?;
    let rows: Vec<CorrelationRow> = report
        .prediction_correlation_per_lag
        .iter()
        .zip(&report.pairs_per_lag)
        .enumerate()
        .map(|(lag, (c, &pairs))| CorrelationRow { lag, correlation: *c, pairs })
        .collect();
    write_csv(&sibling(out_path, "correlation"), &rows)?;
    Ok(report)
}

/// Sets the worker count: `--threads`, else `STITCH_THREADS`, else rayon's default.
pub fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

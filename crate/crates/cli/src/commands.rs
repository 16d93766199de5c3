//! `fit`, `predict` and `eval`.

use std::path::{Path, PathBuf};

use mbll_core::metrics::{evaluate, summarize, write_calibration_csv, EvalReport, SeedSummary};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{csv_writer, fmt, write_json, write_samples, write_trace};
use crate::pipeline::{fit, FitOutput, FitSummary, ModelArtifact};

pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CALIBRATION_FILE: &str = "calibration.csv";

/// Writes every artifact of a fit. Only `timings.json` varies between
/// identical runs.
pub fn write_fit(out: &Path, cfg: &RunConfig, res: &FitOutput) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let mut model = res.artifact.to_json()?;
    model.push('\n');
    std::fs::write(out.join(MODEL_FILE), model)?;
    write_json(&out.join("config.json"), cfg)?;
    write_trace(&out.join(TRACE_FILE), &res.trace)?;
    write_json(&out.join(SUMMARY_FILE), &res.summary)?;
    write_json(&out.join(TIMINGS_FILE), &res.timings)?;
    let a = &res.artifact;
    for (file, d) in [(TRAIN_FILE, &res.data.train), (TEST_FILE, &res.data.test)] {
        let x = a.x_scaler.invert(&d.x)?;
        let y = a.y_scaler.invert(&d.y)?;
        write_samples(&out.join(file), "mbll-data", &[(&a.x_names, &x), (&a.y_names, &y)])?;
    }
    if let Some(rep) = &res.pretrain {
        let header = ["epoch", "train_loss", "val_loss"].map(String::from);
        let mut wr = csv_writer(&out.join("pretrain.csv"), "mbll-pretrain", &header)?;
        for (i, (t, v)) in rep.train_loss.iter().zip(&rep.val_loss).enumerate() {
            wr.write_record([(i + 1).to_string(), fmt(*t), fmt(*v)])?;
        }
        wr.flush()?;
    }
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<FitSummary, CliError> {
    let res = fit(cfg)?;
    write_fit(out, cfg, &res)?;
    Ok(res.summary)
}

/// Predictions in data units.
#[derive(Clone, Debug)]
pub struct PredictionTable {
    pub mean: DMatrix<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub dof: Option<f64>,
}

impl PredictionTable {
    pub fn total(&self) -> Vec<f64> {
        self.aleatoric.iter().zip(&self.epistemic).map(|(a, e)| a + e).collect()
    }
}

pub fn predict_raw(a: &ModelArtifact, x_raw: &DMatrix<f64>) -> Result<PredictionTable, CliError> {
    if x_raw.nrows() != a.d_x() {
        return Err(CliError::Input(format!("model expects {} inputs, got {}", a.d_x(), x_raw.nrows())));
    }
    if x_raw.ncols() == 0 {
        return Ok(PredictionTable { mean: DMatrix::zeros(a.p(), 0), aleatoric: vec![], epistemic: vec![], dof: None });
    }
    let pred = a.predict_std(&a.x_scaler.apply(x_raw)?)?;
    let (aleatoric, epistemic) = a.raw_point_traces(&pred).into_iter().unzip();
    Ok(PredictionTable { mean: a.y_scaler.invert(pred.mean())?, aleatoric, epistemic, dof: pred.dof() })
}

pub fn write_predictions(path: &Path, a: &ModelArtifact, x_raw: &DMatrix<f64>, t: &PredictionTable) -> Result<(), CliError> {
    let mut header: Vec<String> = a.x_names.clone();
    header.extend(a.y_names.iter().map(|n| format!("mean_{n}")));
    header.extend(["aleatoric", "epistemic", "total"].map(String::from));
    let is_t = a.hyper.psi().is_some();
    if is_t {
        header.push("dof".into());
    }
    let mut wr = csv_writer(path, "mbll-predictions", &header)?;
    let total = t.total();
    for j in 0..x_raw.ncols() {
        let mut row: Vec<String> = x_raw.column(j).iter().map(|v| fmt(*v)).collect();
        row.extend(t.mean.column(j).iter().map(|v| fmt(*v)));
        row.extend([fmt(t.aleatoric[j]), fmt(t.epistemic[j]), fmt(total[j])]);
        if is_t {
            row.push(fmt(t.dof.unwrap_or(f64::NAN)));
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn cmd_predict(model: &Path, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let a = ModelArtifact::load(model)?;
    let x = crate::io::read_columns(data, &[&a.x_names])?.remove(0);
    let t = predict_raw(&a, &x)?;
    let path = out.join(PREDICTIONS_FILE);
    write_predictions(&path, &a, &x, &t)?;
    Ok(path)
}

/// Metrics in data units: densities carry the log-Jacobian of the output
/// scaling, ECE is invariant to it.
pub fn evaluate_raw(a: &ModelArtifact, x_raw: &DMatrix<f64>, y_raw: &DMatrix<f64>) -> Result<EvalReport, CliError> {
    let x = a.x_scaler.apply(x_raw)?;
    let y = a.y_scaler.apply(y_raw)?;
    let pred = a.predict_std(&x)?;
    let points = pred.points()?;
    let le = a.log_evidence_std(&x, &y)?;
    let mut r = evaluate(&points, &y, &a.y_names, Some(le))?;
    let jac = a.log_jacobian();
    r.nll += jac;
    r.nlev = r.nlev.map(|v| v + jac);
    let mean_raw = a.y_scaler.invert(pred.mean())?;
    r.rmse = mbll_core::metrics::rmse(&mean_raw, y_raw)?;
    for (i, o) in r.per_output.iter_mut().enumerate() {
        let s = a.y_scaler.scale[i];
        o.nll += s.ln();
        o.rmse *= s;
    }
    Ok(r)
}

pub fn write_report(out: &Path, r: &EvalReport) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join(REPORT_FILE), r)?;
    let mut w = crate::io::create(&out.join(CALIBRATION_FILE))?;
    use std::io::Write;
    writeln!(w, "# mbll-calibration v{}", crate::io::SCHEMA_VERSION)?;
    write_calibration_csv(&r.calibration, &mut w)?;
    Ok(())
}

pub fn cmd_eval(model: &Path, data: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let a = ModelArtifact::load(model)?;
    let mut m = crate::io::read_columns(data, &[&a.x_names, &a.y_names])?;
    let y = m.pop().expect("two groups");
    let x = m.pop().expect("two groups");
    let r = evaluate_raw(&a, &x, &y)?;
    write_report(out, &r)?;
    Ok(r)
}

#[derive(Serialize)]
pub struct BatchReport {
    pub base_seed: u64,
    pub summary: SeedSummary,
    pub reports: Vec<EvalReport>,
}

/// Fits and evaluates seeds `seed, seed+1, …` in parallel; each run writes
/// into `out/seed_<s>`.
pub fn cmd_eval_batch(cfg: &RunConfig, seeds: usize, out: &Path) -> Result<BatchReport, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let results: Vec<Result<EvalReport, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..seeds as u64)
            .map(|k| {
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(k);
                s.spawn(move || -> Result<EvalReport, CliError> {
                    let dir = out.join(format!("seed_{}", c.seed));
                    let res = fit(&c)?;
                    write_fit(&dir, &c, &res)?;
                    let a = &res.artifact;
                    let x = a.x_scaler.invert(&res.data.test.x)?;
                    let y = a.y_scaler.invert(&res.data.test.y)?;
                    let r = evaluate_raw(a, &x, &y)?;
                    write_report(&dir, &r)?;
                    Ok(r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let batch = BatchReport { base_seed: cfg.seed, summary: summarize(&reports)?, reports };
    write_json(&out.join("batch_summary.json"), &batch)?;
    Ok(batch)
}

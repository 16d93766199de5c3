//! RMSE, predictive NLL, per-sample negative log evidence and expected
//! calibration error.
//!
//! Calibration uses central intervals of the univariate marginal of each
//! output at each test point; standardized residuals are pooled over
//! outputs. A residual lies inside the level-`α` interval iff its
//! probability integral transform `u` satisfies `|2u - 1| ≤ α`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::bll_normal::PredictiveNormal;
use crate::bll_t::PredictiveT;
use crate::error::{check_dims, MbllError, Result};
use crate::matvar::{MatNormal, MatT};

/// `{0.05, 0.10, …, 0.95}`.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Predictive law of one test point (a `p × 1` matrix-variate law).
#[derive(Clone, Debug)]
pub enum PointPredictive {
    Normal(MatNormal),
    T(MatT),
}

impl PointPredictive {
    pub fn from_normal(pred: &PredictiveNormal) -> Result<Vec<Self>> {
        (0..pred.mean.ncols()).map(|j| pred.point(j).map(Self::Normal)).collect()
    }

    pub fn from_t(pred: &PredictiveT) -> Result<Vec<Self>> {
        (0..pred.mean.ncols()).map(|j| pred.point(j).map(Self::T)).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let m = match self {
            Self::Normal(d) => d.mean(),
            Self::T(d) => d.mean(),
        };
        m.column(0).into_owned()
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Normal(d) => d.shape().0,
            Self::T(d) => d.shape().0,
        }
    }

    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        let y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        match self {
            Self::Normal(d) => d.logpdf(&y),
            Self::T(d) => d.logpdf(&y),
        }
    }

    /// Central interval of output `i` holding probability `level`.
    pub fn central_interval(&self, i: usize, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(MbllError::InvalidParameter(format!("interval level {level} must lie in (0, 1)")));
        }
        let m = self.marginal(i)?;
        let a = 0.5 * (1.0 - level);
        Ok((m.inverse_cdf(a), m.inverse_cdf(1.0 - a)))
    }

    /// Univariate marginal of output `i`. The matrix-T row marginal keeps
    /// the dof, so a single entry is Student-t with scale² `Σᵢᵢω/ν`.
    fn marginal(&self, i: usize) -> Result<Marginal> {
        match self {
            Self::Normal(d) => Ok(Marginal::Normal(
                Normal::new(d.mean()[(i, 0)], (d.row_cov()[(i, i)] * d.col_cov()[(0, 0)]).sqrt())
                    .map_err(|e| MbllError::InvalidParameter(e.to_string()))?,
            )),
            Self::T(d) => {
                let nu = d.dof();
                Ok(Marginal::T(
                    StudentsT::new(d.mean()[(i, 0)], (d.row_scale()[(i, i)] * d.col_scale()[(0, 0)] / nu).sqrt(), nu)
                        .map_err(|e| MbllError::DegreesOfFreedom { dof: nu, requirement: e.to_string() })?,
                ))
            }
        }
    }
}

enum Marginal {
    Normal(Normal),
    T(StudentsT),
}

impl Marginal {
    fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Normal(d) => d.cdf(x),
            Self::T(d) => d.cdf(x),
        }
    }
    fn inverse_cdf(&self, u: f64) -> f64 {
        match self {
            Self::Normal(d) => d.inverse_cdf(u),
            Self::T(d) => d.inverse_cdf(u),
        }
    }
    fn ln_pdf(&self, x: f64) -> f64 {
        match self {
            Self::Normal(d) => d.ln_pdf(x),
            Self::T(d) => d.ln_pdf(x),
        }
    }
}

/// `sqrt(mean_j ‖ŷ_j - y_j‖²)`.
pub fn rmse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_dims("rmse targets", pred.shape(), y.shape())?;
    if y.ncols() == 0 {
        return Err(MbllError::Data("empty test set".into()));
    }
    Ok(((pred - y).norm_squared() / y.ncols() as f64).sqrt())
}

fn check_preds(preds: &[PointPredictive], y: &DMatrix<f64>) -> Result<()> {
    if preds.is_empty() {
        return Err(MbllError::Data("empty test set".into()));
    }
    if preds.len() != y.ncols() {
        return Err(MbllError::DimensionMismatch {
            context: "predictives vs targets",
            expected: preds.len().to_string(),
            got: y.ncols().to_string(),
        });
    }
    if let Some(bad) = preds.iter().find(|d| d.dim() != y.nrows()) {
        return Err(MbllError::DimensionMismatch {
            context: "predictive output dimension",
            expected: y.nrows().to_string(),
            got: bad.dim().to_string(),
        });
    }
    Ok(())
}

/// Mean of `-ln p(y_j)` under each point's joint predictive.
pub fn nll(preds: &[PointPredictive], y: &DMatrix<f64>) -> Result<f64> {
    check_preds(preds, y)?;
    let mut s = 0.0;
    for (j, d) in preds.iter().enumerate() {
        s -= d.logpdf(&y.column(j).into_owned())?;
    }
    Ok(s / preds.len() as f64)
}

/// `-ln p(Y | θ) / N`.
pub fn nlev(log_evidence: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(MbllError::Data("empty data set".into()));
    }
    Ok(-log_evidence / n as f64)
}

fn pit(preds: &[PointPredictive], y: &DMatrix<f64>, output: Option<usize>) -> Result<Vec<f64>> {
    let outs: Vec<usize> = match output {
        Some(i) => vec![i],
        None => (0..y.nrows()).collect(),
    };
    let mut u = Vec::with_capacity(preds.len() * outs.len());
    for (j, d) in preds.iter().enumerate() {
        for &i in &outs {
            u.push(d.marginal(i)?.cdf(y[(i, j)]));
        }
    }
    Ok(u)
}

fn curve_from_pit(u: &[f64], levels: &[f64]) -> (f64, Vec<(f64, f64)>) {
    let n = u.len() as f64;
    let curve: Vec<(f64, f64)> = levels
        .iter()
        .map(|&a| (a, u.iter().filter(|&&v| (2.0 * v - 1.0).abs() <= a).count() as f64 / n))
        .collect();
    let ece = curve.iter().map(|(a, c)| (c - a).abs()).sum::<f64>() / curve.len() as f64;
    (ece, curve)
}

/// Expected calibration error and the `(nominal, empirical)` curve.
pub fn ece(preds: &[PointPredictive], y: &DMatrix<f64>, levels: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    check_preds(preds, y)?;
    if levels.is_empty() || levels.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(MbllError::InvalidParameter("levels must be non-empty and in [0, 1]".into()));
    }
    Ok(curve_from_pit(&pit(preds, y, None)?, levels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputReport {
    pub name: String,
    pub rmse: f64,
    /// Mean negative log marginal density of this output.
    pub nll: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub nll: f64,
    pub nlev: Option<f64>,
    pub ece: f64,
    pub calibration: Vec<(f64, f64)>,
    pub per_output: Vec<OutputReport>,
}

/// All metrics for one test set. `log_evidence` is `ln p(Y_test | θ)` when
/// available.
pub fn evaluate(
    preds: &[PointPredictive],
    y: &DMatrix<f64>,
    names: &[String],
    log_evidence: Option<f64>,
) -> Result<EvalReport> {
    check_preds(preds, y)?;
    let levels = default_levels();
    let means = DMatrix::from_columns(&preds.iter().map(|d| d.mean()).collect::<Vec<_>>());
    let (e, curve) = ece(preds, y, &levels)?;
    let mut per_output = Vec::with_capacity(y.nrows());
    for i in 0..y.nrows() {
        let mut nl = 0.0;
        for (j, d) in preds.iter().enumerate() {
            nl -= d.marginal(i)?.ln_pdf(y[(i, j)]);
        }
        per_output.push(OutputReport {
            name: names.get(i).cloned().unwrap_or_else(|| format!("y{i}")),
            rmse: rmse(&means.rows(i, 1).into_owned(), &y.rows(i, 1).into_owned())?,
            nll: nl / preds.len() as f64,
            ece: curve_from_pit(&pit(preds, y, Some(i))?, &levels).0,
        });
    }
    Ok(EvalReport {
        n: y.ncols(),
        rmse: rmse(&means, y)?,
        nll: nll(preds, y)?,
        nlev: log_evidence.map(|le| nlev(le, y.ncols())).transpose()?,
        ece: e,
        calibration: curve,
        per_output,
    })
}

pub fn write_calibration_csv<W: Write>(curve: &[(f64, f64)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["nominal", "empirical"])?;
    for (a, c) in curve {
        wr.write_record([format!("{a:.2}"), format!("{c}")])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n - 1)-normalized standard deviation.
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: usize,
    pub rmse: MeanStd,
    pub nll: MeanStd,
    pub nlev: Option<MeanStd>,
    pub ece: MeanStd,
}

pub fn summarize(reports: &[EvalReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(MbllError::Data("no reports to summarize".into()));
    }
    let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let nlevs: Option<Vec<f64>> = reports.iter().map(|r| r.nlev).collect();
    Ok(SeedSummary {
        seeds: reports.len(),
        rmse: col(|r| r.rmse),
        nll: col(|r| r.nll),
        nlev: nlevs.map(|v| MeanStd::of(&v)),
        ece: col(|r| r.ece),
    })
}

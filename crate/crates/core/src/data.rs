//! Synthetic generators, CSV ingestion, standardization and VARX embedding.
//!
//! Matrices are column-per-sample: `x` is `d_x × N`, `y` is `p × N`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bll_normal::Design;
use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{rowmajor, Chol};
use crate::matvar::MatNormal;

/// Per-row affine map `z = (v - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Row means and population standard deviations; a zero scale becomes 1.
    pub fn fit(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.ncols();
        if n == 0 {
            return Err(MbllError::Data("cannot fit a scaler on zero samples".into()));
        }
        let mut mean = Vec::with_capacity(m.nrows());
        let mut scale = Vec::with_capacity(m.nrows());
        for r in m.row_iter() {
            let mu = r.mean();
            let sd = (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
            mean.push(mu);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("scaler input", (self.dim(), m.ncols()), m.shape())?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[i]) / self.scale[i]))
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("scaler input", (self.dim(), m.ncols()), m.shape())?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.scale[i] + self.mean[i]))
    }

    /// Maps a covariance in standardized units back to data units.
    pub fn invert_cov(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dims("scaler covariance", (self.dim(), self.dim()), c.shape())?;
        Ok(DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * self.scale[i] * self.scale[j]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "rowmajor")]
    pub x: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub y: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    /// Set when `x`/`y` hold standardized values.
    pub x_scaler: Option<Scaler>,
    pub y_scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let x_names = (0..x.nrows()).map(|i| format!("x{i}")).collect();
        let y_names = (0..y.nrows()).map(|i| format!("y{i}")).collect();
        Self::with_names(x, y, x_names, y_names)
    }

    pub fn with_names(x: DMatrix<f64>, y: DMatrix<f64>, x_names: Vec<String>, y_names: Vec<String>) -> Result<Self> {
        check_dims("targets vs inputs", (y.nrows(), x.ncols()), y.shape())?;
        if x_names.len() != x.nrows() || y_names.len() != y.nrows() {
            return Err(MbllError::Data("column names do not match dimensions".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(MbllError::NonFinite("dataset".into()));
        }
        Ok(Self { x, y, x_names, y_names, x_scaler: None, y_scaler: None })
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }
    pub fn d_x(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            y: self.y.select_columns(idx),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            x_scaler: self.x_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
        }
    }

    /// Applies the given scalers; fails if already standardized.
    pub fn standardized(&self, xs: &Scaler, ys: &Scaler) -> Result<Dataset> {
        if self.x_scaler.is_some() || self.y_scaler.is_some() {
            return Err(MbllError::Data("dataset is already standardized".into()));
        }
        Ok(Dataset {
            x: xs.apply(&self.x)?,
            y: ys.apply(&self.y)?,
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            x_scaler: Some(xs.clone()),
            y_scaler: Some(ys.clone()),
        })
    }

    /// Inverse of [`Dataset::standardized`].
    pub fn destandardized(&self) -> Result<Dataset> {
        let x = match &self.x_scaler {
            Some(s) => s.invert(&self.x)?,
            None => self.x.clone(),
        };
        let y = match &self.y_scaler {
            Some(s) => s.invert(&self.y)?,
            None => self.y.clone(),
        };
        Ok(Dataset { x, y, x_names: self.x_names.clone(), y_names: self.y_names.clone(), x_scaler: None, y_scaler: None })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s)?;
        check_dims("targets vs inputs", (d.y.nrows(), d.x.ncols()), d.y.shape())?;
        Ok(d)
    }
}

/// Centers of the four unit sampling intervals of the interpolation task.
pub const INTERP_CENTERS: [f64; 4] = [-3.5, -1.5, 1.5, 3.5];

/// Ground-truth mean of the interpolation task (chosen, not given by the
/// source material).
pub fn interp_mean(x: f64) -> f64 {
    (2.0 * x).sin() + 0.5 * (3.0 * x).cos()
}

/// Ground-truth noise standard deviation of the interpolation task.
pub fn interp_scale(x: f64) -> f64 {
    0.1 + 0.4 * x.cos().powi(2)
}

/// `n` points drawn uniformly on the four unit intervals around
/// [`INTERP_CENTERS`], with `y = f(x) + s(x)·ε`.
pub fn gen_interp1d(n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(MbllError::InvalidParameter(format!("interpolation demo needs n >= 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(1, n);
    let mut y = DMatrix::zeros(1, n);
    for i in 0..n {
        let c = INTERP_CENTERS[rng.random_range(0..4)];
        let xi = c + rng.random_range(-0.5..0.5);
        let e: f64 = rng.sample(StandardNormal);
        x[(0, i)] = xi;
        y[(0, i)] = interp_mean(xi) + interp_scale(xi) * e;
    }
    Dataset::with_names(x, y, vec!["x".into()], vec!["y".into()])
}

/// Parameters of a synthetic draw from the model itself.
#[derive(Clone, Debug)]
pub struct LinearSpec {
    pub m: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Noise scale when `hetero` is off.
    pub sigma2: f64,
    /// Per-sample `σ²ᵢ` drawn log-uniformly on `[1/4, 4]`.
    pub hetero: bool,
}

#[derive(Clone, Debug)]
pub struct LinearDraw {
    pub design: Design,
    pub a: DMatrix<f64>,
}

/// Draws `A ~ MN(M, V, K)` once, features `Φ` with iid standard normal
/// entries, then `yᵢ = Aφᵢ + σᵢ V^{1/2} zᵢ`.
pub fn gen_linear_mvn(spec: &LinearSpec, n: usize, seed: u64) -> Result<LinearDraw> {
    let (p, d_t) = spec.m.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = MatNormal::new(spec.m.clone(), spec.v.clone(), spec.k.clone())?.sample(&mut rng);
    let phi = DMatrix::from_fn(d_t, n, |_, _| rng.sample(StandardNormal));
    let d = if spec.hetero {
        DVector::from_fn(n, |_, _| (rng.random_range(-1.0..1.0) * 4f64.ln()).exp())
    } else {
        if !(spec.sigma2 > 0.0) {
            return Err(MbllError::InvalidParameter("sigma2 must be positive".into()));
        }
        DVector::from_element(n, spec.sigma2)
    };
    let lv = Chol::new(&spec.v, "noise covariance V")?.l();
    let z = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut noise = lv * z;
    for (i, mut c) in noise.column_iter_mut().enumerate() {
        c *= d[i].sqrt();
    }
    let y = &a * &phi + noise;
    Ok(LinearDraw { design: Design::new(phi, y, d)?, a })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Sizes `(round(f₀N), round(f₁N), rest)`.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(MbllError::InvalidParameter(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n_tr = (a * n as f64).round() as usize;
    let n_va = ((b * n as f64).round() as usize).min(n - n_tr);
    let n_te = n - n_tr - n_va;
    if n_tr == 0 || n_va == 0 || n_te == 0 {
        return Err(MbllError::Data(format!("empty split: {n_tr}/{n_va}/{n_te} of {n} rows")));
    }
    Ok((n_tr, n_va, n_te))
}

/// Random split, then standardization fitted on the training part.
pub fn split_standardize(all: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (n_tr, n_va, _) = split_sizes(all.n(), fractions)?;
    let mut idx: Vec<usize> = (0..all.n()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, rest) = idx.split_at(n_tr);
    let (va, te) = rest.split_at(n_va);
    let raw_tr = all.select(tr);
    let xs = Scaler::fit(&raw_tr.x)?;
    let ys = Scaler::fit(&raw_tr.y)?;
    Ok(Splits {
        train: raw_tr.standardized(&xs, &ys)?,
        val: all.select(va).standardized(&xs, &ys)?,
        test: all.select(te).standardized(&xs, &ys)?,
    })
}

/// Header and raw string cells of a comma-separated file.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok((headers, rows))
}

fn column_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| MbllError::Data(format!("missing column '{name}'")))
}

/// Numeric table: `targets` become `y`, every other column becomes `x`.
pub fn load_dataset(path: &Path, targets: &[String]) -> Result<Dataset> {
    let (headers, rows) = read_table(path)?;
    if targets.is_empty() {
        return Err(MbllError::Data("no target columns given".into()));
    }
    let t_idx: Vec<usize> = targets.iter().map(|t| column_index(&headers, t)).collect::<Result<_>>()?;
    let x_idx: Vec<usize> = (0..headers.len()).filter(|i| !t_idx.contains(i)).collect();
    let n = rows.len();
    let mut x = DMatrix::zeros(x_idx.len(), n);
    let mut y = DMatrix::zeros(t_idx.len(), n);
    for (r, row) in rows.iter().enumerate() {
        let cell = |c: usize| -> Result<f64> {
            row.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| MbllError::Data(format!("non-numeric cell at row {}, column '{}'", r + 2, headers[c])))
        };
        for (i, &c) in x_idx.iter().enumerate() {
            x[(i, r)] = cell(c)?;
        }
        for (i, &c) in t_idx.iter().enumerate() {
            y[(i, r)] = cell(c)?;
        }
    }
    Dataset::with_names(
        x,
        y,
        x_idx.iter().map(|&i| headers[i].clone()).collect(),
        t_idx.iter().map(|&i| headers[i].clone()).collect(),
    )
}

/// [`load_dataset`] followed by [`split_standardize`].
pub fn load_csv(path: &Path, targets: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    split_standardize(&load_dataset(path, targets)?, fractions, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarxSpec {
    /// Input lag order.
    pub p_lag: usize,
    /// Output lag order.
    pub q_lag: usize,
}

impl VarxSpec {
    pub fn new(p_lag: usize, q_lag: usize) -> Result<Self> {
        if p_lag == 0 || q_lag == 0 {
            return Err(MbllError::InvalidParameter("VARX lag orders must be >= 1".into()));
        }
        Ok(Self { p_lag, q_lag })
    }

    pub fn embedded_dim(&self, d_u: usize, p: usize) -> usize {
        self.p_lag * d_u + self.q_lag * p
    }

    /// First time index with a complete lag window.
    pub fn start(&self) -> usize {
        (self.p_lag - 1).max(self.q_lag)
    }
}

/// Sample `t` has input `[u_t, …, u_{t-P+1}, y_{t-1}, …, y_{t-Q}]` and
/// target `y_t`; samples whose window touches an invalid step are skipped.
pub fn varx_embed_valid(u: &DMatrix<f64>, y: &DMatrix<f64>, valid: &[bool], spec: VarxSpec) -> Result<Dataset> {
    let t_len = u.ncols();
    check_dims("VARX outputs", (y.nrows(), t_len), y.shape())?;
    if valid.len() != t_len {
        return Err(MbllError::Data("validity mask length differs from series length".into()));
    }
    if t_len <= spec.p_lag.max(spec.q_lag) {
        return Err(MbllError::Data(format!(
            "series of length {t_len} too short for lags P={}, Q={}",
            spec.p_lag, spec.q_lag
        )));
    }
    let (d_u, p) = (u.nrows(), y.nrows());
    let d_x = spec.embedded_dim(d_u, p);
    let start = spec.start();
    let mut cols_x = Vec::new();
    let mut cols_y = Vec::new();
    for t in start..t_len {
        let lo = t - start;
        if !valid[lo..=t].iter().all(|&v| v) {
            continue;
        }
        let mut xt = DVector::zeros(d_x);
        let mut k = 0;
        for l in 0..spec.p_lag {
            xt.rows_mut(k, d_u).copy_from(&u.column(t - l));
            k += d_u;
        }
        for l in 1..=spec.q_lag {
            xt.rows_mut(k, p).copy_from(&y.column(t - l));
            k += p;
        }
        cols_x.push(xt);
        cols_y.push(y.column(t).into_owned());
    }
    let n = cols_x.len();
    let x = if n == 0 { DMatrix::zeros(d_x, 0) } else { DMatrix::from_columns(&cols_x) };
    let yy = if n == 0 { DMatrix::zeros(p, 0) } else { DMatrix::from_columns(&cols_y) };
    let mut names = Vec::with_capacity(d_x);
    for l in 0..spec.p_lag {
        names.extend((0..d_u).map(|i| format!("u{i}_t-{l}")));
    }
    for l in 1..=spec.q_lag {
        names.extend((0..p).map(|i| format!("y{i}_t-{l}")));
    }
    Dataset::with_names(x, yy, names, (0..p).map(|i| format!("y{i}")).collect())
}

pub fn varx_embed(u: &DMatrix<f64>, y: &DMatrix<f64>, spec: VarxSpec) -> Result<Dataset> {
    varx_embed_valid(u, y, &vec![true; u.ncols()], spec)
}

/// Pollutant outputs of the multi-site air-quality files.
pub const BEIJING_OUTPUTS: [&str; 6] = ["PM2.5", "PM10", "SO2", "NO2", "CO", "O3"];
/// Meteorological inputs.
pub const BEIJING_INPUTS: [&str; 5] = ["TEMP", "PRES", "DEWP", "RAIN", "WSPM"];
/// Longest run of missing steps that is forward-filled.
pub const MAX_FILL: usize = 3;

#[derive(Clone, Debug)]
pub struct Series {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// False for steps inside a gap longer than [`MAX_FILL`].
    pub valid: Vec<bool>,
}

/// Forward-fills runs of at most [`MAX_FILL`] missing values; longer runs
/// (and a leading gap) stay `None`.
fn forward_fill(col: &mut [Option<f64>]) {
    let mut last = None;
    let mut i = 0;
    while i < col.len() {
        if col[i].is_some() {
            last = col[i];
            i += 1;
            continue;
        }
        let run = col[i..].iter().take_while(|v| v.is_none()).count();
        if run <= MAX_FILL && last.is_some() {
            for v in &mut col[i..i + run] {
                *v = last;
            }
        }
        i += run;
    }
}

/// Reads one station file of the hourly air-quality schema in file order.
/// Missing cells are `NA` or empty.
pub fn load_beijing(path: &Path) -> Result<Series> {
    let (headers, rows) = read_table(path)?;
    let pick = |names: &[&str]| -> Result<Vec<Vec<Option<f64>>>> {
        names
            .iter()
            .map(|name| {
                let c = column_index(&headers, name)?;
                rows.iter()
                    .enumerate()
                    .map(|(r, row)| {
                        let s = row.get(c).map(String::as_str).unwrap_or("");
                        if s.is_empty() || s.eq_ignore_ascii_case("na") {
                            return Ok(None);
                        }
                        s.parse::<f64>()
                            .map(Some)
                            .map_err(|_| MbllError::Data(format!("non-numeric cell at row {}, column '{name}'", r + 2)))
                    })
                    .collect()
            })
            .collect()
    };
    let mut uc = pick(&BEIJING_INPUTS)?;
    let mut yc = pick(&BEIJING_OUTPUTS)?;
    for c in uc.iter_mut().chain(yc.iter_mut()) {
        forward_fill(c);
    }
    let t_len = rows.len();
    let valid: Vec<bool> = (0..t_len).map(|t| uc.iter().chain(yc.iter()).all(|c| c[t].is_some())).collect();
    let to_mat = |cs: &Vec<Vec<Option<f64>>>| DMatrix::from_fn(cs.len(), t_len, |i, t| cs[i][t].unwrap_or(0.0));
    Ok(Series { u: to_mat(&uc), y: to_mat(&yc), valid })
}

/// Row-wise standardization of a series with statistics from its valid
/// steps among the first `fit_len`.
pub fn standardize_series(s: &Series, fit_len: usize) -> Result<(Series, Scaler, Scaler)> {
    let idx: Vec<usize> = (0..fit_len.min(s.valid.len())).filter(|&t| s.valid[t]).collect();
    let us = Scaler::fit(&s.u.select_columns(&idx))?;
    let ys = Scaler::fit(&s.y.select_columns(&idx))?;
    Ok((Series { u: us.apply(&s.u)?, y: ys.apply(&s.y)?, valid: s.valid.clone() }, us, ys))
}

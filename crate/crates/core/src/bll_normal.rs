//! Bayesian last layer with known baseline noise covariance `V`.
//!
//! Model: `y_i = A φ(x_i) + ε_i`, `ε_i ~ N(0, σ²(x_i) V)`, prior
//! `A ~ MN(M, V, K)`. Everything is closed form; the `N×N` matrix
//! `Ω = D + ΦᵀKΦ` is only formed when `N ≤ d_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{scale_columns, symmetrize, Chol, Structure};
use crate::matvar::MatNormal;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observed data: features `Φ` (`d_t×N`), targets `Y` (`p×N`) and the
/// per-sample noise scales `D = diag(σ²(x_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub phi: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl Design {
    pub fn new(phi: DMatrix<f64>, y: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        let n = phi.ncols();
        check_dims("targets vs features", (y.nrows(), n), y.shape())?;
        check_dims("noise scales", (n, 1), (d.len(), 1))?;
        if d.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(MbllError::InvalidParameter(
                "noise scales sigma^2(x_i) must be positive and finite".into(),
            ));
        }
        if phi.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(MbllError::NonFinite("features or targets".into()));
        }
        Ok(Self { phi, y, d })
    }

    pub fn homoscedastic(phi: DMatrix<f64>, y: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let n = phi.ncols();
        Self::new(phi, y, DVector::from_element(n, sigma2))
    }

    pub fn n(&self) -> usize {
        self.phi.ncols()
    }
    pub fn p(&self) -> usize {
        self.y.nrows()
    }
    pub fn d_t(&self) -> usize {
        self.phi.nrows()
    }

    pub fn d_inv(&self) -> DVector<f64> {
        self.d.map(|s| 1.0 / s)
    }

    /// `ΦD⁻¹Φᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        symmetrize(&(scale_columns(&self.phi, &self.d_inv()) * self.phi.transpose()))
    }

    pub fn select(&self, idx: &[usize]) -> Design {
        Design {
            phi: self.phi.select_columns(idx),
            y: self.y.select_columns(idx),
            d: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.d[i])),
        }
    }
}

/// [`Design`] together with the known baseline noise covariance `V`.
#[derive(Clone, Debug)]
pub struct DesignBlock {
    pub data: Design,
    pub v: DMatrix<f64>,
}

impl DesignBlock {
    pub fn new(data: Design, v: DMatrix<f64>) -> Result<Self> {
        let p = data.p();
        check_dims("noise covariance V", (p, p), v.shape())?;
        Chol::new(&v, "noise covariance V")?;
        Ok(Self { data, v })
    }
}

impl std::ops::Deref for DesignBlock {
    type Target = Design;
    fn deref(&self) -> &Design {
        &self.data
    }
}

/// Prior parameters `θ = (M, K)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormalHyper {
    #[serde(with = "crate::linalg::rowmajor")]
    pub m: DMatrix<f64>,
    #[serde(with = "crate::linalg::rowmajor")]
    pub k: DMatrix<f64>,
    #[serde(default)]
    pub k_constraint: Structure,
}

impl NormalHyper {
    pub fn new(m: DMatrix<f64>, k: DMatrix<f64>, k_constraint: Structure) -> Result<Self> {
        let d_t = m.ncols();
        check_dims("prior column covariance K", (d_t, d_t), k.shape())?;
        if !k_constraint.admits(&k, 1e-12) {
            return Err(MbllError::InvalidParameter(format!(
                "K does not satisfy the {k_constraint:?} constraint"
            )));
        }
        Chol::new(&k, "prior column covariance K")?;
        Ok(Self { m, k, k_constraint })
    }

    /// `M = 0`, `K = k·I`.
    pub fn isotropic(p: usize, d_t: usize, k: f64) -> Result<Self> {
        Self::new(
            DMatrix::zeros(p, d_t),
            DMatrix::identity(d_t, d_t) * k,
            Structure::Isotropic,
        )
    }
}

/// Inverse-Wishart hyperprior `IW(Λ, κ)` on `K`, used unnormalized.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HyperPrior {
    #[serde(with = "crate::linalg::rowmajor")]
    pub lambda: DMatrix<f64>,
    pub kappa: f64,
}

impl HyperPrior {
    pub fn new(lambda: DMatrix<f64>, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(MbllError::InvalidParameter(format!("kappa must be > 0, got {kappa}")));
        }
        Chol::new(&lambda, "hyperprior location Lambda")?;
        Ok(Self { lambda, kappa })
    }

    /// `-(κ/2) ln|K| - ½ tr(K⁻¹Λ)`.
    pub fn log_density(&self, k: &DMatrix<f64>) -> Result<f64> {
        check_dims("hyperprior argument", self.lambda.shape(), k.shape())?;
        let kc = Chol::new(k, "prior column covariance K")?;
        Ok(-0.5 * self.kappa * kc.logdet() - 0.5 * kc.solve(&self.lambda).trace())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// `N > d_t`: everything through `S_xx`.
    Woodbury,
    /// `N ≤ d_t`: `Ω` formed and factorized directly.
    Direct,
}

/// Data statistics given `(M, K)`. Independent of `V`.
#[derive(Clone, Debug)]
pub struct SuffStats {
    /// `YD⁻¹Φᵀ + MK⁻¹`.
    pub syx: DMatrix<f64>,
    /// `K⁻¹ + ΦD⁻¹Φᵀ`.
    pub sxx: DMatrix<f64>,
    pub sxx_inv: DMatrix<f64>,
    /// `S_yx S_xx⁻¹`.
    pub post_mean: DMatrix<f64>,
    /// `YD⁻¹Yᵀ + MK⁻¹Mᵀ`.
    pub syy: DMatrix<f64>,
    /// `(Y-MΦ) Ω⁻¹ (Y-MΦ)ᵀ`.
    pub sycx: DMatrix<f64>,
    /// `ln|Ω|`.
    pub omega_logdet: f64,
    pub route: Route,
    pub n: usize,
}

impl SuffStats {
    pub fn compute(data: &Design, m: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<Self> {
        let route = if data.n() > data.d_t() { Route::Woodbury } else { Route::Direct };
        Self::compute_with(data, m, k, route)
    }

    /// Forces a computation route. Both routes agree to rounding.
    pub fn compute_with(
        data: &Design,
        m: &DMatrix<f64>,
        k: &DMatrix<f64>,
        route: Route,
    ) -> Result<Self> {
        let (p, d_t, n) = (data.p(), data.d_t(), data.n());
        check_dims("prior mean M", (p, d_t), m.shape())?;
        check_dims("prior column covariance K", (d_t, d_t), k.shape())?;
        let k_chol = Chol::new(k, "prior column covariance K")?;
        let k_inv = k_chol.inverse();
        let d_inv = data.d_inv();
        let phi_dinv = scale_columns(&data.phi, &d_inv);
        let gram = symmetrize(&(&phi_dinv * data.phi.transpose()));
        let sxx = symmetrize(&(&k_inv + &gram));
        let e = &data.y - m * &data.phi;

        let (sxx_inv, post_mean, omega_logdet, sycx) = match route {
            Route::Woodbury => {
                let sxx_chol = Chol::new(&sxx, "S_xx")?;
                let sxx_inv = sxx_chol.inverse();
                // S_yx - M S_xx = E D⁻¹ Φᵀ
                let post_mean = m + &e * phi_dinv.transpose() * &sxx_inv;
                let logdet_d: f64 = data.d.iter().map(|s| s.ln()).sum();
                let omega_logdet = logdet_d + k_chol.logdet() + sxx_chol.logdet();
                // E Ω⁻¹ Eᵀ as a sum of two PSD terms at the posterior mean
                let r = &data.y - &post_mean * &data.phi;
                let f = &post_mean - m;
                let sycx = symmetrize(
                    &(scale_columns(&r, &d_inv) * r.transpose() + &f * &k_inv * f.transpose()),
                );
                (sxx_inv, post_mean, omega_logdet, sycx)
            }
            Route::Direct => {
                let omega = symmetrize(
                    &(DMatrix::from_diagonal(&data.d) + data.phi.transpose() * k * &data.phi),
                );
                let omega_chol = Chol::new(&omega, "Omega")?;
                let kphi = k * &data.phi;
                let sxx_inv = symmetrize(&(k - omega_chol.quad_form(&kphi.transpose())));
                let post_mean = m + omega_chol.solve(&e.transpose()).transpose() * kphi.transpose();
                let sycx = omega_chol.quad_form(&e.transpose());
                (sxx_inv, post_mean, omega_chol.logdet(), sycx)
            }
        };
        let syx = scale_columns(&data.y, &d_inv) * data.phi.transpose() + m * &k_inv;
        let syy = symmetrize(&(scale_columns(&data.y, &d_inv) * data.y.transpose() + m * &k_inv * m.transpose()));
        debug_assert_eq!(sycx.shape(), (p, p));
        Ok(Self {
            syx,
            sxx,
            sxx_inv,
            post_mean,
            syy,
            sycx,
            omega_logdet,
            route,
            n,
        })
    }

    pub fn p(&self) -> usize {
        self.post_mean.nrows()
    }

    /// `tr(Φ*ᵀ S_xx⁻¹ Φ*)` per column of `Φ*`.
    pub fn epistemic_factors(&self, phi_star: &DMatrix<f64>) -> Vec<f64> {
        quad_factors(&self.sxx_inv, phi_star)
    }
}

/// `φⱼᵀ S φⱼ` for each column of `phi`.
pub(crate) fn quad_factors(s: &DMatrix<f64>, phi: &DMatrix<f64>) -> Vec<f64> {
    let sp = s * phi;
    phi.column_iter().zip(sp.column_iter()).map(|(a, b)| a.dot(&b)).collect()
}

/// `Ω = D + ΦᵀKΦ`, formed explicitly.
pub fn omega(data: &Design, k: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(DMatrix::from_diagonal(&data.d) + data.phi.transpose() * k * &data.phi))
}

/// `ln p(Y | M, K, V)` with `Y ~ MN(MΦ, V, Ω)`.
pub fn log_evidence(block: &DesignBlock, h: &NormalHyper) -> Result<f64> {
    let s = SuffStats::compute(block, &h.m, &h.k)?;
    log_evidence_from(&s, &block.v)
}

pub fn log_evidence_from(s: &SuffStats, v: &DMatrix<f64>) -> Result<f64> {
    let p = s.p();
    check_dims("noise covariance V", (p, p), v.shape())?;
    let vc = Chol::new(v, "noise covariance V")?;
    let n = s.n as f64;
    Ok(-0.5 * p as f64 * n * LN_2PI
        - 0.5 * n * vc.logdet()
        - 0.5 * p as f64 * s.omega_logdet
        - 0.5 * vc.solve(&s.sycx).trace())
}

/// `A | Y ~ MN(S_yx S_xx⁻¹, V, S_xx⁻¹)`.
pub fn posterior(block: &DesignBlock, h: &NormalHyper) -> Result<MatNormal> {
    let s = SuffStats::compute(block, &h.m, &h.k)?;
    MatNormal::new(s.post_mean, block.v.clone(), s.sxx_inv)
}

/// Posterior predictive `Y* | Y ~ MN(S_yx S_xx⁻¹ Φ*, V, D* + Φ*ᵀ S_xx⁻¹ Φ*)`.
#[derive(Clone, Debug)]
pub struct PredictiveNormal {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
    pub col_scale: DMatrix<f64>,
    /// `tr(D*) V`.
    pub aleatoric: DMatrix<f64>,
    /// `tr(Φ*ᵀ S_xx⁻¹ Φ*) V`.
    pub epistemic: DMatrix<f64>,
    /// `σ²*` per prediction point.
    pub aleatoric_factors: Vec<f64>,
    /// `φ*ᵀ S_xx⁻¹ φ*` per prediction point.
    pub epistemic_factors: Vec<f64>,
}

impl PredictiveNormal {
    pub fn total(&self) -> DMatrix<f64> {
        &self.aleatoric + &self.epistemic
    }

    pub fn distribution(&self) -> Result<MatNormal> {
        MatNormal::new(self.mean.clone(), self.row_cov.clone(), self.col_scale.clone())
    }

    /// Predictive of the single point `j`: `N(mean_j, (σ²*_j + φ_jᵀS_xx⁻¹φ_j) V)`.
    pub fn point(&self, j: usize) -> Result<MatNormal> {
        let c = self.aleatoric_factors[j] + self.epistemic_factors[j];
        MatNormal::new(
            self.mean.columns(j, 1).into_owned(),
            self.row_cov.clone(),
            DMatrix::from_element(1, 1, c),
        )
    }
}

pub fn predict(
    block: &DesignBlock,
    h: &NormalHyper,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveNormal> {
    let s = SuffStats::compute(block, &h.m, &h.k)?;
    predict_from(&s, &block.v, phi_star, dstar)
}

pub fn predict_from(
    s: &SuffStats,
    v: &DMatrix<f64>,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveNormal> {
    predict_parts(&s.post_mean, &s.sxx_inv, v, phi_star, dstar)
}

/// Predictive from the posterior mean `S_yx S_xx⁻¹` and `S_xx⁻¹` alone.
pub fn predict_parts(
    post_mean: &DMatrix<f64>,
    sxx_inv: &DMatrix<f64>,
    v: &DMatrix<f64>,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveNormal> {
    let d_t = sxx_inv.nrows();
    let l = phi_star.ncols();
    check_dims("prediction features", (d_t, l), phi_star.shape())?;
    check_dims("prediction noise scales", (l, 1), (dstar.len(), 1))?;
    if dstar.iter().any(|&x| !(x > 0.0)) {
        return Err(MbllError::InvalidParameter("prediction noise scales must be positive".into()));
    }
    let col_scale = symmetrize(
        &(DMatrix::from_diagonal(dstar) + phi_star.transpose() * sxx_inv * phi_star),
    );
    let epistemic_factors = quad_factors(sxx_inv, phi_star);
    let ep_trace: f64 = epistemic_factors.iter().sum();
    Ok(PredictiveNormal {
        mean: post_mean * phi_star,
        row_cov: v.clone(),
        aleatoric: v * dstar.sum(),
        epistemic: v * ep_trace,
        col_scale,
        aleatoric_factors: dstar.iter().copied().collect(),
        epistemic_factors,
    })
}

/// Splits the epistemic term into the prior contribution
/// `tr(Φ*ᵀKΦ*) V` and the data-driven reduction
/// `tr(Φ*ᵀKΦ Ω⁻¹ ΦᵀKΦ*) V`. Forms `Ω`.
pub fn epistemic_decomposition(
    block: &DesignBlock,
    h: &NormalHyper,
    phi_star: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims("prediction features", (block.d_t(), phi_star.ncols()), phi_star.shape())?;
    let prior = (phi_star.transpose() * &h.k * phi_star).trace();
    let reduction = if block.n() == 0 {
        0.0
    } else {
        let oc = Chol::new(&omega(block, &h.k), "Omega")?;
        let cross = block.phi.transpose() * &h.k * phi_star;
        oc.quad_form(&cross).trace()
    };
    Ok((&block.v * prior, &block.v * reduction))
}

/// Weighted least squares `Â = YD⁻¹Φᵀ(ΦD⁻¹Φᵀ)⁻¹`.
pub fn least_squares(data: &Design) -> Result<DMatrix<f64>> {
    if data.n() < data.d_t() {
        return Err(MbllError::RankDeficient("fewer samples than features"));
    }
    let g = Chol::new(&data.gram(), "Phi D^-1 Phi^T")
        .map_err(|_| MbllError::RankDeficient("Phi D^-1 Phi^T is singular"))?;
    let rhs = scale_columns(&data.y, &data.d_inv()) * data.phi.transpose();
    Ok(g.solve(&rhs.transpose()).transpose())
}

/// Trace gap between the variance of the least-squares prediction and the
/// Bayesian posterior-mean prediction at `φ*`, when `Y` follows the
/// evidence: `φ*ᵀ((ΦD⁻¹Φᵀ)⁻¹ + S_xx⁻¹)φ* · tr(V)`.
pub fn variance_gap(block: &DesignBlock, h: &NormalHyper, phi_star: &DVector<f64>) -> Result<f64> {
    check_dims("prediction features", (block.d_t(), 1), (phi_star.len(), 1))?;
    if block.n() < block.d_t().max(block.p()) {
        return Err(MbllError::RankDeficient("need N >= max(d_t, p)"));
    }
    let g = Chol::new(&block.gram(), "Phi D^-1 Phi^T")
        .map_err(|_| MbllError::RankDeficient("Phi D^-1 Phi^T is singular"))?;
    let s = SuffStats::compute(block, &h.m, &h.k)?;
    let x = DMatrix::from_column_slice(phi_star.len(), 1, phi_star.as_slice());
    let q = g.quad_form(&x)[(0, 0)] + (x.transpose() * &s.sxx_inv * &x)[(0, 0)];
    Ok(q * block.v.trace())
}

/// `(p/2) ln|Ω| + ½ tr(Ω⁻¹EᵀV⁻¹E)`, plus `(κ/2) ln|K| + ½ tr(K⁻¹Λ)` when a
/// hyperprior is supplied.
pub fn evidential_loss(block: &DesignBlock, h: &NormalHyper, hp: Option<&HyperPrior>) -> Result<f64> {
    let s = SuffStats::compute(block, &h.m, &h.k)?;
    let vc = Chol::new(&block.v, "noise covariance V")?;
    let mut loss = 0.5 * block.p() as f64 * s.omega_logdet + 0.5 * vc.solve(&s.sycx).trace();
    if let Some(hp) = hp {
        loss -= hp.log_density(&h.k)?;
    }
    Ok(loss)
}

/// Degenerate global minimizer of the unregularized evidential loss.
/// `K̂ = 0` is not a valid [`NormalHyper`], so it is only carried here.
#[derive(Clone, Debug)]
pub struct DegenerateMle {
    pub m_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    pub degenerate: bool,
}

pub fn degenerate_mle(data: &Design) -> Result<DegenerateMle> {
    let m_hat = least_squares(data)?;
    Ok(DegenerateMle {
        m_hat,
        k_hat: DMatrix::zeros(data.d_t(), data.d_t()),
        degenerate: true,
    })
}

/// Orthogonal projector onto the kernel of `ΦD^{-½}`:
/// `P = I - (ΦD^{-½})⁺ ΦD^{-½}`.
pub fn projector_p(data: &Design) -> DMatrix<f64> {
    let n = data.n();
    if n == 0 || data.d_t() == 0 {
        return DMatrix::identity(n, n);
    }
    let b = scale_columns(&data.phi, &data.d.map(|s| 1.0 / s.sqrt()));
    let svd = b.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * data.d_t().max(n) as f64;
    let mut p = DMatrix::identity(n, n);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let row = v_t.row(i);
            p -= row.transpose() * row;
        }
    }
    symmetrize(&p)
}

//! Matrix-variate distributions: matrix-Normal, matrix-T and Inverse-Wishart.
//!
//! Conventions follow Gupta & Nagar. In particular the Inverse-Wishart
//! `IW(Ψ, ν)` used throughout this crate has density
//!
//! ```text
//! |Ψ|^((ν-p-1)/2) |W|^(-ν/2) exp(-½ tr(W⁻¹Ψ)) / (2^((ν-p-1)p/2) Γ_p((ν-p-1)/2))
//! ```
//!
//! so it is proper for `ν > 2p`, has mean `Ψ/(ν-2p-2)` and mode `Ψ/ν`. It
//! coincides with the more common parameterization with degrees of freedom
//! `m = ν - p - 1` (exponent `-(m+p+1)/2`).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{symmetrize, Chol};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Log multivariate gamma `ln Γ_p(a) = p(p-1)/4 ln π + Σⱼ ln Γ(a + (1-j)/2)`.
pub fn lmvgamma(p: usize, a: f64) -> Result<f64> {
    if p == 0 {
        return Ok(0.0);
    }
    if !(a > (p as f64 - 1.0) / 2.0) {
        return Err(MbllError::InvalidParameter(format!(
            "multivariate gamma needs a > (p-1)/2, got p={p}, a={a}"
        )));
    }
    let head = (p * (p - 1)) as f64 / 4.0 * LN_PI;
    Ok(head + (1..=p).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>())
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    nrows: usize,
    ncols: usize,
) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, ncols, |_, _| StandardNormal.sample(rng))
}

/// `MN(M, V, K)`: mean `p×n`, row covariance `V` (`p×p`), column covariance
/// `K` (`n×n`). Equivalent to `vec(A) ~ N(vec(M), K ⊗ V)`.
#[derive(Clone, Debug)]
pub struct MatNormal {
    mean: DMatrix<f64>,
    row_cov: DMatrix<f64>,
    col_cov: DMatrix<f64>,
    row_chol: Chol,
    col_chol: Chol,
}

impl MatNormal {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        let (p, n) = mean.shape();
        check_dims("matrix-Normal row covariance", (p, p), row_cov.shape())?;
        check_dims("matrix-Normal column covariance", (n, n), col_cov.shape())?;
        let row_chol = Chol::new(&row_cov, "matrix-Normal row covariance")?;
        let col_chol = Chol::new(&col_cov, "matrix-Normal column covariance")?;
        Ok(Self {
            mean,
            row_cov,
            col_cov,
            row_chol,
            col_chol,
        })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }
    pub fn row_cov(&self) -> &DMatrix<f64> {
        &self.row_cov
    }
    pub fn col_cov(&self) -> &DMatrix<f64> {
        &self.col_cov
    }
    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    /// `-(pn/2) ln 2π - (n/2) ln|V| - (p/2) ln|K| - ½ tr(V⁻¹(X-M)K⁻¹(X-M)ᵀ)`.
    pub fn logpdf(&self, x: &DMatrix<f64>) -> Result<f64> {
        check_dims("matrix-Normal argument", self.mean.shape(), x.shape())?;
        let (p, n) = self.shape();
        let r = x - &self.mean;
        // tr(V⁻¹ R K⁻¹ Rᵀ) = ‖L_V⁻¹ R L_K⁻ᵀ‖²
        let w = self.row_chol.whiten(&self.col_chol.whiten(&r.transpose()).transpose());
        let quad = w.norm_squared();
        Ok(-0.5 * (p * n) as f64 * LN_2PI
            - 0.5 * n as f64 * self.row_chol.logdet()
            - 0.5 * p as f64 * self.col_chol.logdet()
            - 0.5 * quad)
    }

    /// `M + L_V Z L_Kᵀ` with `Z` standard Normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (p, n) = self.shape();
        let z = standard_normal_matrix(rng, p, n);
        &self.mean + self.row_chol.l() * z * self.col_chol.l().transpose()
    }

    pub fn sample_seeded(&self, seed: u64) -> DMatrix<f64> {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `E[(A-M) Q (A-M)ᵀ] = tr(Qᵀ K) V`.
    pub fn second_moment(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.mean.ncols();
        check_dims("second-moment weight", (n, n), q.shape())?;
        Ok(&self.row_cov * (q.transpose() * &self.col_cov).trace())
    }
}

/// Matrix-T `MT(M, Σ, Ω, ν)` with density proportional to
/// `|Σ|^(-n/2) |Ω|^(-p/2) |I_p + Σ⁻¹(T-M)Ω⁻¹(T-M)ᵀ|^(-(ν+n+p-1)/2)`.
///
/// At `p = n = 1` this is a Student-t with `ν` degrees of freedom and squared
/// scale `ΣΩ/ν`.
#[derive(Clone, Debug)]
pub struct MatT {
    mean: DMatrix<f64>,
    row_scale: DMatrix<f64>,
    col_scale: DMatrix<f64>,
    dof: f64,
    row_chol: Chol,
    col_chol: Chol,
}

impl MatT {
    pub fn new(
        mean: DMatrix<f64>,
        row_scale: DMatrix<f64>,
        col_scale: DMatrix<f64>,
        dof: f64,
    ) -> Result<Self> {
        let (p, n) = mean.shape();
        check_dims("matrix-T row scale", (p, p), row_scale.shape())?;
        check_dims("matrix-T column scale", (n, n), col_scale.shape())?;
        if !(dof > 0.0) {
            return Err(MbllError::DegreesOfFreedom {
                dof,
                requirement: "matrix-T needs nu > 0".into(),
            });
        }
        let row_chol = Chol::new(&row_scale, "matrix-T row scale")?;
        let col_chol = Chol::new(&col_scale, "matrix-T column scale")?;
        Ok(Self {
            mean,
            row_scale,
            col_scale,
            dof,
            row_chol,
            col_chol,
        })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }
    pub fn row_scale(&self) -> &DMatrix<f64> {
        &self.row_scale
    }
    pub fn col_scale(&self) -> &DMatrix<f64> {
        &self.col_scale
    }
    pub fn dof(&self) -> f64 {
        self.dof
    }
    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    /// Log normalizing constant `ln Γ_p((ν+n+p-1)/2) - ln Γ_p((ν+p-1)/2) - (np/2) ln π`.
    pub fn log_norm_const(&self) -> f64 {
        let (p, n) = self.shape();
        let (pf, nf) = (p as f64, n as f64);
        lmvgamma(p, (self.dof + nf + pf - 1.0) / 2.0).expect("dof > 0 keeps the argument valid")
            - lmvgamma(p, (self.dof + pf - 1.0) / 2.0).expect("dof > 0 keeps the argument valid")
            - 0.5 * nf * pf * LN_PI
    }

    pub fn logpdf(&self, x: &DMatrix<f64>) -> Result<f64> {
        check_dims("matrix-T argument", self.mean.shape(), x.shape())?;
        let (p, n) = self.shape();
        let r = x - &self.mean;
        // I + W Wᵀ with W = L_Σ⁻¹ R L_Ω⁻ᵀ has the same determinant as
        // I + Σ⁻¹ R Ω⁻¹ Rᵀ.
        let w = self.row_chol.whiten(&self.col_chol.whiten(&r.transpose()).transpose());
        let inner = DMatrix::identity(p, p) + &w * w.transpose();
        let inner_logdet = Chol::new(&inner, "matrix-T kernel")?.logdet();
        let (pf, nf) = (p as f64, n as f64);
        Ok(self.log_norm_const()
            - 0.5 * nf * self.row_chol.logdet()
            - 0.5 * pf * self.col_chol.logdet()
            - 0.5 * (self.dof + nf + pf - 1.0) * inner_logdet)
    }

    /// Compound draw: `V ~ IW(Σ, ν + 2p)`, then `T | V ~ MN(M, V, Ω)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let p = self.mean.nrows() as f64;
        let iw = InvWishart {
            scale: self.row_scale.clone(),
            dof: self.dof + 2.0 * p,
            chol: self.row_chol.clone(),
        };
        let v = iw.sample(rng);
        let lv = Chol::new(&v, "sampled row covariance")
            .map(|c| c.l())
            .unwrap_or_else(|_| DMatrix::zeros(v.nrows(), v.ncols()));
        let z = standard_normal_matrix(rng, self.mean.nrows(), self.mean.ncols());
        &self.mean + lv * z * self.col_chol.l().transpose()
    }

    /// `E[(T-M) Q (T-M)ᵀ] = tr(Qᵀ Ω) Σ / (ν - 2)`, defined for `ν > 2`.
    pub fn second_moment(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.mean.ncols();
        check_dims("second-moment weight", (n, n), q.shape())?;
        if !(self.dof > 2.0) {
            return Err(MbllError::DegreesOfFreedom {
                dof: self.dof,
                requirement: "second moments need nu > 2".into(),
            });
        }
        Ok(&self.row_scale * ((q.transpose() * &self.col_scale).trace() / (self.dof - 2.0)))
    }
}

/// Inverse-Wishart `IW(Ψ, ν)` in the `ν > 2p` convention (see module docs).
#[derive(Clone, Debug)]
pub struct InvWishart {
    scale: DMatrix<f64>,
    dof: f64,
    chol: Chol,
}

impl InvWishart {
    pub fn new(scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        let p = scale.nrows();
        if !(dof > 2.0 * p as f64) {
            return Err(MbllError::DegreesOfFreedom {
                dof,
                requirement: format!("Inverse-Wishart needs nu > 2p = {}", 2 * p),
            });
        }
        let chol = Chol::new(&scale, "Inverse-Wishart scale")?;
        Ok(Self { scale, dof, chol })
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }
    pub fn dof(&self) -> f64 {
        self.dof
    }
    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }
    /// Degrees of freedom in the common parameterization, `ν' = ν - p - 1`.
    pub fn dof_prime(&self) -> f64 {
        self.dof - self.dim() as f64 - 1.0
    }

    pub fn logpdf(&self, w: &DMatrix<f64>) -> Result<f64> {
        let p = self.dim();
        check_dims("Inverse-Wishart argument", (p, p), w.shape())?;
        let wc = Chol::new(w, "Inverse-Wishart argument")?;
        let m = self.dof_prime();
        let tr = (wc.solve(&self.scale)).trace();
        Ok(0.5 * m * self.chol.logdet()
            - 0.5 * m * p as f64 * std::f64::consts::LN_2
            - lmvgamma(p, m / 2.0)?
            - 0.5 * self.dof * wc.logdet()
            - 0.5 * tr)
    }

    /// Bartlett decomposition of `Wishart(Ψ⁻¹, ν-p-1)` followed by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let p = self.dim();
        let m = self.dof_prime();
        // Ψ⁻¹ = L Lᵀ, W = (L A)(L A)ᵀ, W⁻¹ = (LA)⁻ᵀ (LA)⁻¹
        let l = Chol::new(&self.chol.inverse(), "Inverse-Wishart precision")
            .expect("inverse of an SPD matrix is SPD")
            .l();
        let mut a = DMatrix::zeros(p, p);
        for i in 0..p {
            let chi = ChiSquared::new(m - i as f64).expect("nu > 2p keeps dof positive");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = StandardNormal.sample(rng);
            }
        }
        let c = l * a;
        let c_inv = c
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .expect("Bartlett factor has a positive diagonal");
        symmetrize(&(c_inv.transpose() * c_inv))
    }

    pub fn sample_seeded(&self, seed: u64) -> DMatrix<f64> {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `Ψ / (ν - 2p - 2)`, defined for `ν > 2p + 2`.
    pub fn mean(&self) -> Result<DMatrix<f64>> {
        let p = self.dim() as f64;
        let denom = self.dof - 2.0 * p - 2.0;
        if !(denom > 0.0) {
            return Err(MbllError::DegreesOfFreedom {
                dof: self.dof,
                requirement: format!("Inverse-Wishart mean needs nu > 2p + 2 = {}", 2.0 * p + 2.0),
            });
        }
        Ok(&self.scale / denom)
    }

    pub fn mode(&self) -> DMatrix<f64> {
        &self.scale / self.dof
    }

    /// `E[W⁻¹] = (ν - p - 1) Ψ⁻¹`.
    pub fn mean_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse() * self.dof_prime()
    }
}

/// `KL(q ‖ p)` between two matrix-Normal laws of equal shape.
pub fn kl_matnormal(q: &MatNormal, p: &MatNormal) -> Result<f64> {
    check_dims("KL arguments", p.shape(), q.shape())?;
    let (rows, cols) = p.shape();
    let (rf, cf) = (rows as f64, cols as f64);
    let tr_v = p.row_chol.solve(&q.row_cov).trace();
    let tr_k = p.col_chol.solve(&q.col_cov).trace();
    let f = &p.mean - &q.mean;
    let w = p.row_chol.whiten(&p.col_chol.whiten(&f.transpose()).transpose());
    let kl = 0.5 * cf * p.row_chol.logdet() + 0.5 * rf * p.col_chol.logdet()
        + 0.5 * tr_v * tr_k
        + 0.5 * w.norm_squared()
        - 0.5 * cf * q.row_chol.logdet()
        - 0.5 * rf * q.col_chol.logdet()
        - 0.5 * rf * cf;
    Ok(kl.max(0.0))
}

/// Compound law `V ~ IW(Ψ, ν)`, `A | V ~ MN(M, V, K)`.
#[derive(Clone, Debug)]
pub struct NormalInvWishart {
    pub mean: DMatrix<f64>,
    pub col_cov: DMatrix<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl NormalInvWishart {
    pub fn new(
        mean: DMatrix<f64>,
        col_cov: DMatrix<f64>,
        scale: DMatrix<f64>,
        dof: f64,
    ) -> Result<Self> {
        let (p, n) = mean.shape();
        check_dims("Normal-Inverse-Wishart column covariance", (n, n), col_cov.shape())?;
        check_dims("Normal-Inverse-Wishart scale", (p, p), scale.shape())?;
        InvWishart::new(scale.clone(), dof)?;
        Chol::new(&col_cov, "Normal-Inverse-Wishart column covariance")?;
        Ok(Self {
            mean,
            col_cov,
            scale,
            dof,
        })
    }

    pub fn row_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dof_prime(&self) -> f64 {
        self.dof - self.row_dim() as f64 - 1.0
    }

    /// Marginal of `A`: `MT(M, Ψ, K, ν - 2p)`.
    pub fn marginal_a(&self) -> Result<MatT> {
        MatT::new(
            self.mean.clone(),
            self.scale.clone(),
            self.col_cov.clone(),
            self.dof - 2.0 * self.row_dim() as f64,
        )
    }

    pub fn marginal_v(&self) -> Result<InvWishart> {
        InvWishart::new(self.scale.clone(), self.dof)
    }

    /// Joint log density `ln MN(A; M, V, K) + ln IW(V; Ψ, ν)`.
    pub fn logpdf(&self, a: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
        let mn = MatNormal::new(self.mean.clone(), v.clone(), self.col_cov.clone())?;
        Ok(mn.logpdf(a)? + self.marginal_v()?.logpdf(v)?)
    }
}

/// KL divergence between two Normal-Inverse-Wishart joints over `(A, V)`, up
/// to terms that do not depend on the second argument's `(M, K, Ψ)`:
///
/// `(p/2)(ln|K| + tr(K⁻¹K̃)) + (ν̃'/2) tr(Ψ̃⁻¹((M-M̃)K⁻¹(M-M̃)ᵀ + Ψ)) - (ν'/2) ln|Ψ|`
///
/// with `q = (M̃, K̃, Ψ̃, ν̃)`, `p = (M, K, Ψ, ν)`.
pub fn kl_normal_invwishart_joint(q: &NormalInvWishart, p: &NormalInvWishart) -> Result<f64> {
    check_dims("KL arguments", p.mean.shape(), q.mean.shape())?;
    let rows = p.row_dim() as f64;
    let k_chol = Chol::new(&p.col_cov, "KL prior column covariance")?;
    let psi_chol = Chol::new(&p.scale, "KL prior scale")?;
    let q_psi_chol = Chol::new(&q.scale, "KL posterior scale")?;
    let f = &p.mean - &q.mean;
    let fkf = f.clone() * k_chol.solve(&f.transpose());
    let inner = symmetrize(&fkf) + &p.scale;
    Ok(0.5 * rows * (k_chol.logdet() + k_chol.solve(&q.col_cov).trace())
        + 0.5 * q.dof_prime() * q_psi_chol.solve(&inner).trace()
        - 0.5 * p.dof_prime() * psi_chol.logdet())
}

/// Gradient of [`kl_normal_invwishart_joint`] with respect to the prior
/// scale `Ψ` (treating its entries as independent):
/// `(ν̃'/2) Ψ̃⁻¹ - (ν'/2) Ψ⁻¹`.
pub fn kl_normal_invwishart_grad_scale(
    q: &NormalInvWishart,
    p: &NormalInvWishart,
) -> Result<DMatrix<f64>> {
    let psi_inv = Chol::new(&p.scale, "KL prior scale")?.inverse();
    let q_psi_inv = Chol::new(&q.scale, "KL posterior scale")?.inverse();
    Ok(q_psi_inv * (0.5 * q.dof_prime()) - psi_inv * (0.5 * p.dof_prime()))
}

/// Dense multivariate Normal log density, used by oracles and metrics.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = mean.len();
    check_dims("multivariate Normal argument", (n, 1), (x.len(), 1))?;
    let c = Chol::new(cov, "multivariate Normal covariance")?;
    let r = DMatrix::from_column_slice(n, 1, (x - mean).as_slice());
    let quad = c.whiten(&r).norm_squared();
    Ok(-0.5 * n as f64 * LN_2PI - 0.5 * c.logdet() - 0.5 * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, vec};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn lmvgamma_scalar_values() {
        assert!(lmvgamma(1, 1.0).unwrap().abs() < 1e-14);
        assert!((lmvgamma(1, 0.5).unwrap() - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!(lmvgamma(3, 0.9).is_err());
    }

    #[test]
    fn lmvgamma_matches_quadrature_at_p2() {
        // Γ_2(a) = ∫_{S≻0} e^{-tr S} |S|^{a-3/2} dS. Substituting the
        // off-diagonal z = √(xy) t factorizes the integral into
        // (∫ e^{-x} x^{a-1} dx)² · ∫_{-1}^{1} (1-t²)^{a-3/2} dt.
        let a = 2.0;
        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize| {
            let h = (hi - lo) / n as f64;
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(lo + i as f64 * h);
            }
            s * h / 3.0
        };
        let gx = simpson(&|x: f64| (-x).exp() * x.powf(a - 1.0), 0.0, 60.0, 20_000);
        let gt = simpson(&|t: f64| (1.0 - t * t).max(0.0).powf(a - 1.5), -1.0, 1.0, 20_000);
        let quad = (gx * gx * gt).ln();
        assert!((lmvgamma(2, a).unwrap() - quad).abs() < 1e-5, "{quad}");
    }

    #[test]
    fn matnormal_standard_scalar() {
        let d = MatNormal::new(DMatrix::zeros(1, 1), eye(1), eye(1)).unwrap();
        let lp = d.logpdf(&DMatrix::zeros(1, 1)).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn matnormal_at_mean_is_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, n) = (2, 3);
        let v = rand_spd(p, &mut rng);
        let k = rand_spd(n, &mut rng);
        let m = rand_mat(p, n, &mut rng);
        let d = MatNormal::new(m.clone(), v.clone(), k.clone()).unwrap();
        let expected = -(n as f64 / 2.0) * ((v.clone() * 2.0 * std::f64::consts::PI).determinant().ln())
            - (p as f64 / 2.0) * k.determinant().ln();
        assert!((d.logpdf(&m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matnormal_matches_vectorized_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = rand_spd(2, &mut rng);
        let k = rand_spd(2, &mut rng);
        let m = rand_mat(2, 2, &mut rng);
        let x = rand_mat(2, 2, &mut rng);
        let d = MatNormal::new(m.clone(), v.clone(), k.clone()).unwrap();
        let oracle = mvn_logpdf(&vec(&x), &vec(&m), &kron(&k, &v)).unwrap();
        assert!((d.logpdf(&x).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn matnormal_scale_ambiguity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_spd(2, &mut rng);
        let k = rand_spd(3, &mut rng);
        let m = rand_mat(2, 3, &mut rng);
        let x = rand_mat(2, 3, &mut rng);
        let a = MatNormal::new(m.clone(), v.clone(), k.clone()).unwrap();
        for c in [0.1, 3.0, 10.0] {
            let b = MatNormal::new(m.clone(), &v * c, &k / c).unwrap();
            assert!((a.logpdf(&x).unwrap() - b.logpdf(&x).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn matnormal_dimension_errors() {
        let d = MatNormal::new(DMatrix::zeros(2, 2), eye(2), eye(2)).unwrap();
        assert!(matches!(
            d.logpdf(&DMatrix::zeros(2, 3)),
            Err(MbllError::DimensionMismatch { .. })
        ));
        assert!(MatNormal::new(DMatrix::zeros(2, 2), eye(3), eye(2)).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            MatNormal::new(DMatrix::zeros(2, 2), bad, eye(2)),
            Err(MbllError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn matnormal_sampling_is_deterministic() {
        let d = MatNormal::new(DMatrix::zeros(2, 3), eye(2), eye(3)).unwrap();
        assert_eq!(d.sample_seeded(11), d.sample_seeded(11));
        assert_ne!(d.sample_seeded(11), d.sample_seeded(12));
    }

    #[test]
    fn matt_scalar_cauchy() {
        let d = MatT::new(DMatrix::zeros(1, 1), eye(1), eye(1), 1.0).unwrap();
        let lp = d.logpdf(&DMatrix::zeros(1, 1)).unwrap();
        assert!((lp - (1.0 / std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn matt_scalar_matches_student_t() {
        use statrs::distribution::{Continuous, StudentsT};
        let (sigma, omega, nu) = (2.0, 0.7, 4.5);
        let d = MatT::new(DMatrix::zeros(1, 1), eye(1) * sigma, eye(1) * omega, nu).unwrap();
        let st = StudentsT::new(0.0, (sigma * omega / nu).sqrt(), nu).unwrap();
        for x in [-3.0, -0.2, 0.0, 1.5] {
            let lp = d.logpdf(&DMatrix::from_element(1, 1, x)).unwrap();
            assert!((lp - st.ln_pdf(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn matt_at_mean_is_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = rand_spd(2, &mut rng);
        let o = rand_spd(3, &mut rng);
        let m = rand_mat(2, 3, &mut rng);
        let d = MatT::new(m.clone(), s.clone(), o.clone(), 3.5).unwrap();
        let expected = -1.5 * s.determinant().ln() - 1.0 * o.determinant().ln() + d.log_norm_const();
        assert!((d.logpdf(&m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matt_rejects_bad_dof() {
        assert!(MatT::new(DMatrix::zeros(1, 1), eye(1), eye(1), 0.0).is_err());
        assert!(MatT::new(DMatrix::zeros(1, 1), eye(1), eye(1), -1.0).is_err());
    }

    #[test]
    fn invwishart_moments() {
        let iw = InvWishart::new(eye(1) * 3.0, 5.0).unwrap();
        assert!((iw.mean().unwrap()[(0, 0)] - 3.0).abs() < 1e-14);
        assert!((iw.mean_inverse()[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((iw.mode()[(0, 0)] - 0.6).abs() < 1e-14);
        let low = InvWishart::new(eye(2), 5.0).unwrap();
        assert!(matches!(low.mean(), Err(MbllError::DegreesOfFreedom { .. })));
        assert!(InvWishart::new(eye(2), 4.0).is_err());
    }

    #[test]
    fn invwishart_scalar_density_integrates_to_one() {
        let iw = InvWishart::new(eye(1) * 2.0, 4.5).unwrap();
        // substitute w = e^u to cover the heavy right tail
        let (lo, hi, n) = (-12.0f64, 14.0f64, 40_000usize);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let u = lo + i as f64 * h;
            let w = u.exp();
            let f = iw.logpdf(&DMatrix::from_element(1, 1, w)).unwrap().exp() * w;
            let c = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += c * f * h;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn invwishart_logpdf_matches_inverse_gamma() {
        use statrs::distribution::{Continuous, InverseGamma};
        // p = 1: IW(ψ, ν) = InvGamma((ν-2)/2, ψ/2)
        let (psi, nu) = (3.0, 6.0);
        let iw = InvWishart::new(eye(1) * psi, nu).unwrap();
        let ig = InverseGamma::new((nu - 2.0) / 2.0, psi / 2.0).unwrap();
        for w in [0.3, 1.0, 4.0] {
            let lp = iw.logpdf(&DMatrix::from_element(1, 1, w)).unwrap();
            assert!((lp - ig.ln_pdf(w)).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_matnormal_values() {
        let a = MatNormal::new(DMatrix::zeros(1, 1), eye(1), eye(1)).unwrap();
        let b = MatNormal::new(DMatrix::from_element(1, 1, 1.0), eye(1), eye(1)).unwrap();
        assert!(kl_matnormal(&a, &a).unwrap().abs() < 1e-14);
        assert!((kl_matnormal(&a, &b).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kl_matnormal_matches_vectorized_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = MatNormal::new(rand_mat(2, 3, &mut rng), rand_spd(2, &mut rng), rand_spd(3, &mut rng)).unwrap();
        let p = MatNormal::new(rand_mat(2, 3, &mut rng), rand_spd(2, &mut rng), rand_spd(3, &mut rng)).unwrap();
        // Gaussian KL on vec form with Σ = K ⊗ V
        let sq = kron(q.col_cov(), q.row_cov());
        let sp = kron(p.col_cov(), p.row_cov());
        let sp_inv = sp.clone().try_inverse().unwrap();
        let dm = vec(p.mean()) - vec(q.mean());
        let k = 6.0;
        let oracle = 0.5
            * ((&sp_inv * &sq).trace() + (dm.transpose() * &sp_inv * &dm)[(0, 0)] - k
                + sp.determinant().ln()
                - sq.determinant().ln());
        assert!((kl_matnormal(&q, &p).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn niw_kl_quadratic_in_mean_shift() {
        let mk = |m: f64| {
            NormalInvWishart::new(DMatrix::from_element(1, 2, m), eye(2), eye(1) * 2.0, 6.0).unwrap()
        };
        let q = mk(0.0);
        let base = kl_normal_invwishart_joint(&q, &q).unwrap();
        let d1 = kl_normal_invwishart_joint(&q, &mk(1.0)).unwrap() - base;
        let d2 = kl_normal_invwishart_joint(&q, &mk(2.0)).unwrap() - base;
        assert!((d2 - 4.0 * d1).abs() < 1e-12);
        assert!(d1 > 0.0);
    }

    #[test]
    fn niw_kl_scale_gradient_matches_finite_differences() {
        let q = NormalInvWishart::new(DMatrix::from_element(1, 2, 0.3), eye(2), eye(1) * 1.7, 6.5).unwrap();
        let at = |psi: f64| {
            let p = NormalInvWishart::new(DMatrix::from_element(1, 2, -0.4), eye(2) * 1.3, eye(1) * psi, 5.0)
                .unwrap();
            kl_normal_invwishart_joint(&q, &p).unwrap()
        };
        let psi = 0.9;
        let h = 1e-5;
        let fd = (at(psi + h) - at(psi - h)) / (2.0 * h);
        let p = NormalInvWishart::new(DMatrix::from_element(1, 2, -0.4), eye(2) * 1.3, eye(1) * psi, 5.0).unwrap();
        let g = kl_normal_invwishart_grad_scale(&q, &p).unwrap()[(0, 0)];
        assert!((fd - g).abs() < 1e-6, "fd={fd} analytic={g}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matnormal_density_is_vec_gaussian(r in 1usize..4, c in 1usize..4, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, v) = (rand_spd(r, &mut rng), rand_spd(c, &mut rng));
            let mean = rand_mat(r, c, &mut rng);
            let x = rand_mat(r, c, &mut rng);
            let mn = MatNormal::new(mean.clone(), u.clone(), v.clone()).unwrap();
            let direct = mvn_logpdf(&vec(&x), &vec(&mean), &kron(&v, &u)).unwrap();
            prop_assert!((mn.logpdf(&x).unwrap() - direct).abs() < 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn matt_density_scale_invariance(r in 1usize..3, c in 1usize..3, k in 0.2f64..5.0, seed in 0u64..10_000) {
            // MT(M, kU, V/k, ν) is the same law as MT(M, U, V, ν)
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, v) = (rand_spd(r, &mut rng), rand_spd(c, &mut rng));
            let mean = rand_mat(r, c, &mut rng);
            let x = rand_mat(r, c, &mut rng);
            let nu = 2.0 * r as f64 + 3.0;
            let a = MatT::new(mean.clone(), u.clone(), v.clone(), nu).unwrap();
            let b = MatT::new(mean, u * k, v / k, nu).unwrap();
            let (la, lb) = (a.logpdf(&x).unwrap(), b.logpdf(&x).unwrap());
            prop_assert!((la - lb).abs() < 1e-9 * (1.0 + la.abs()));
        }
    }
}

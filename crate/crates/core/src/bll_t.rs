//! Bayesian last layer with unknown noise covariance: `V ~ IW(Ψ, ν)`,
//! `A | V ~ MN(M, V, K)`. Marginals over `V` are matrix-T.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bll_normal::{least_squares, omega, projector_p, quad_factors, Design, SuffStats};
use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{scale_columns, symmetrize, Chol, Structure};
use crate::matvar::{lmvgamma, InvWishart, MatNormal, MatT};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Prior parameters `(M, K, Ψ, ν)`. `ν` stays fixed during estimation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct THyper {
    #[serde(with = "crate::linalg::rowmajor")]
    pub m: DMatrix<f64>,
    #[serde(with = "crate::linalg::rowmajor")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::linalg::rowmajor")]
    pub psi: DMatrix<f64>,
    pub nu: f64,
    #[serde(default)]
    pub k_constraint: Structure,
    #[serde(default)]
    pub psi_constraint: Structure,
}

impl THyper {
    pub fn new(
        m: DMatrix<f64>,
        k: DMatrix<f64>,
        psi: DMatrix<f64>,
        nu: f64,
        k_constraint: Structure,
        psi_constraint: Structure,
    ) -> Result<Self> {
        let (p, d_t) = m.shape();
        check_dims("prior column covariance K", (d_t, d_t), k.shape())?;
        check_dims("prior scale Psi", (p, p), psi.shape())?;
        if !(nu > 2.0 * p as f64) {
            return Err(MbllError::DegreesOfFreedom {
                dof: nu,
                requirement: format!("prior needs nu > 2p = {}", 2 * p),
            });
        }
        for (a, c, what) in [(&k, k_constraint, "K"), (&psi, psi_constraint, "Psi")] {
            if !c.admits(a, 1e-12) {
                return Err(MbllError::InvalidParameter(format!(
                    "{what} does not satisfy the {c:?} constraint"
                )));
            }
        }
        Chol::new(&k, "prior column covariance K")?;
        Chol::new(&psi, "prior scale Psi")?;
        Ok(Self {
            m,
            k,
            psi,
            nu,
            k_constraint,
            psi_constraint,
        })
    }

    /// `ν = 2p + 3`.
    pub fn default_nu(p: usize) -> f64 {
        2.0 * p as f64 + 3.0
    }

    pub fn p(&self) -> usize {
        self.m.nrows()
    }
    pub fn d_t(&self) -> usize {
        self.m.ncols()
    }
    /// `ν' = ν - p - 1`.
    pub fn nu_prime(&self) -> f64 {
        self.nu - self.p() as f64 - 1.0
    }
}

/// [`SuffStats`] plus `H = Ψ + S_y·x`.
#[derive(Clone, Debug)]
pub struct TSuffStats {
    pub base: SuffStats,
    pub h: DMatrix<f64>,
    pub h_chol: Chol,
}

impl TSuffStats {
    pub fn compute(data: &Design, hyper: &THyper) -> Result<Self> {
        check_dims("prior mean M", (data.p(), data.d_t()), hyper.m.shape())?;
        let base = SuffStats::compute(data, &hyper.m, &hyper.k)?;
        let h = symmetrize(&(&hyper.psi + &base.sycx));
        let h_chol = Chol::new(&h, "Psi + S_y.x")?;
        Ok(Self { base, h, h_chol })
    }

    pub fn n(&self) -> usize {
        self.base.n
    }
}

/// `ln C_n = ln Γ_p((ν'+N)/2) - ln Γ_p(ν'/2) - (Np/2) ln π`.
pub fn log_cn(p: usize, n: usize, nu_prime: f64) -> Result<f64> {
    Ok(lmvgamma(p, (nu_prime + n as f64) / 2.0)? - lmvgamma(p, nu_prime / 2.0)?
        - 0.5 * (n * p) as f64 * LN_PI)
}

/// Evidence `Y ~ MT(MΦ, Ψ, Ω, ν - 2p)`. Forms the `N×N` matrix `Ω`.
pub fn t_evidence(data: &Design, hyper: &THyper) -> Result<MatT> {
    MatT::new(
        &hyper.m * &data.phi,
        hyper.psi.clone(),
        omega(data, &hyper.k),
        hyper.nu - 2.0 * hyper.p() as f64,
    )
}

/// `ln p(Y | M, K, Ψ, ν)` without forming `Ω`.
pub fn t_log_evidence(data: &Design, hyper: &THyper) -> Result<f64> {
    let s = TSuffStats::compute(data, hyper)?;
    t_log_evidence_from(&s, hyper)
}

pub fn t_log_evidence_from(s: &TSuffStats, hyper: &THyper) -> Result<f64> {
    Ok(-t_loss_from(s, hyper)?)
}

fn t_loss_from(s: &TSuffStats, hyper: &THyper) -> Result<f64> {
    let p = hyper.p();
    let n = s.n() as f64;
    let nu_p = hyper.nu_prime();
    let psi_logdet = Chol::new(&hyper.psi, "prior scale Psi")?.logdet();
    Ok(-log_cn(p, s.n(), nu_p)? - 0.5 * nu_p * psi_logdet
        + 0.5 * p as f64 * s.base.omega_logdet
        + 0.5 * (nu_p + n) * s.h_chol.logdet())
}

/// Negative log-evidence in the form
/// `-ln C_n - (ν'/2) ln|Ψ| + (p/2) ln|Ω| + ((ν'+N)/2) ln|Ψ + S_y·x|`.
/// The two agree exactly.
pub fn t_evidential_loss(data: &Design, hyper: &THyper) -> Result<f64> {
    let s = TSuffStats::compute(data, hyper)?;
    t_loss_from(&s, hyper)
}

/// `A | Y ~ MT(S_yx S_xx⁻¹, Ψ + S_y·x, S_xx⁻¹, ν + N - 2p)`.
pub fn t_posterior_a(data: &Design, hyper: &THyper) -> Result<MatT> {
    let s = TSuffStats::compute(data, hyper)?;
    MatT::new(
        s.base.post_mean,
        s.h,
        s.base.sxx_inv,
        hyper.nu + data.n() as f64 - 2.0 * hyper.p() as f64,
    )
}

/// `V | Y ~ IW(Ψ + S_y·x, ν + N)`.
pub fn t_posterior_v(data: &Design, hyper: &THyper) -> Result<InvWishart> {
    let s = TSuffStats::compute(data, hyper)?;
    InvWishart::new(s.h, hyper.nu + data.n() as f64)
}

/// `A | Y, V`: identical to the known-`V` posterior.
pub fn t_conditional_a(data: &Design, hyper: &THyper, v: &DMatrix<f64>) -> Result<MatNormal> {
    let s = SuffStats::compute(data, &hyper.m, &hyper.k)?;
    MatNormal::new(s.post_mean, v.clone(), s.sxx_inv)
}

/// `V | Y, A ~ IW(Ψ + S_y·x;A, ν + N + d_t)` with
/// `S_y·x;A = (Y-AΦ)D⁻¹(Y-AΦ)ᵀ + (A-M)K⁻¹(A-M)ᵀ`.
pub fn t_conditional_v(data: &Design, hyper: &THyper, a: &DMatrix<f64>) -> Result<InvWishart> {
    check_dims("regression matrix A", hyper.m.shape(), a.shape())?;
    let kc = Chol::new(&hyper.k, "prior column covariance K")?;
    let r = &data.y - a * &data.phi;
    let f = a - &hyper.m;
    let s = scale_columns(&r, &data.d_inv()) * r.transpose() + kc.quad_form(&f.transpose());
    InvWishart::new(
        symmetrize(&(&hyper.psi + s)),
        hyper.nu + (data.n() + data.d_t()) as f64,
    )
}

/// Posterior predictive
/// `Y* | Y ~ MT(S_yx S_xx⁻¹ Φ*, Ψ + S_y·x, D* + Φ*ᵀ S_xx⁻¹ Φ*, ν + N - 2p)`.
#[derive(Clone, Debug)]
pub struct PredictiveT {
    pub mean: DMatrix<f64>,
    pub row_scale: DMatrix<f64>,
    pub col_scale: DMatrix<f64>,
    pub dof: f64,
    /// `tr(D*) (Ψ + S_y·x) / (dof - 2)`; `None` when `dof ≤ 2`.
    pub aleatoric: Option<DMatrix<f64>>,
    pub epistemic: Option<DMatrix<f64>>,
    pub aleatoric_factors: Vec<f64>,
    pub epistemic_factors: Vec<f64>,
}

impl PredictiveT {
    pub fn distribution(&self) -> Result<MatT> {
        MatT::new(self.mean.clone(), self.row_scale.clone(), self.col_scale.clone(), self.dof)
    }

    /// Predictive of point `j`: `MT(mean_j, Ψ + S_y·x, σ²*_j + φ_jᵀS_xx⁻¹φ_j, dof)`.
    pub fn point(&self, j: usize) -> Result<MatT> {
        let c = self.aleatoric_factors[j] + self.epistemic_factors[j];
        MatT::new(
            self.mean.columns(j, 1).into_owned(),
            self.row_scale.clone(),
            DMatrix::from_element(1, 1, c),
            self.dof,
        )
    }

    pub fn uncertainties(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match (&self.aleatoric, &self.epistemic) {
            (Some(a), Some(e)) => Ok((a.clone(), e.clone())),
            _ => Err(MbllError::DegreesOfFreedom {
                dof: self.dof,
                requirement: "predictive variances need nu + N - 2p > 2".into(),
            }),
        }
    }
}

pub fn t_predict(
    data: &Design,
    hyper: &THyper,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveT> {
    let s = TSuffStats::compute(data, hyper)?;
    t_predict_from(&s, hyper, phi_star, dstar)
}

pub fn t_predict_from(
    s: &TSuffStats,
    hyper: &THyper,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveT> {
    t_predict_parts(&s.base.post_mean, &s.base.sxx_inv, &s.h, s.n(), hyper, phi_star, dstar)
}

/// Predictive from `S_yx S_xx⁻¹`, `S_xx⁻¹`, `Ψ + S_y·x` and the sample size.
pub fn t_predict_parts(
    post_mean: &DMatrix<f64>,
    sxx_inv: &DMatrix<f64>,
    h: &DMatrix<f64>,
    n: usize,
    hyper: &THyper,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<PredictiveT> {
    let l = phi_star.ncols();
    check_dims("prediction features", (hyper.d_t(), l), phi_star.shape())?;
    check_dims("prediction noise scales", (l, 1), (dstar.len(), 1))?;
    if dstar.iter().any(|&x| !(x > 0.0)) {
        return Err(MbllError::InvalidParameter("prediction noise scales must be positive".into()));
    }
    let dof = hyper.nu + n as f64 - 2.0 * hyper.p() as f64;
    let epistemic_factors = quad_factors(sxx_inv, phi_star);
    let col_scale = symmetrize(
        &(DMatrix::from_diagonal(dstar) + phi_star.transpose() * sxx_inv * phi_star),
    );
    let (aleatoric, epistemic) = if dof > 2.0 {
        let unit = h / (dof - 2.0);
        (
            Some(&unit * dstar.sum()),
            Some(&unit * epistemic_factors.iter().sum::<f64>()),
        )
    } else {
        (None, None)
    };
    Ok(PredictiveT {
        mean: post_mean * phi_star,
        row_scale: h.clone(),
        col_scale,
        dof,
        aleatoric,
        epistemic,
        aleatoric_factors: dstar.iter().copied().collect(),
        epistemic_factors,
    })
}

/// Aleatoric and epistemic parts of the predictive covariance.
pub fn t_uncertainties(
    data: &Design,
    hyper: &THyper,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    t_predict(data, hyper, phi_star, dstar)?.uncertainties()
}

/// Degenerate minimizer of the matrix-T evidential loss. `K̂ = 0`.
#[derive(Clone, Debug)]
pub struct TDegenerateMle {
    pub m_hat: DMatrix<f64>,
    pub psi_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    /// Always true: `K̂ = 0` is on the boundary.
    pub degenerate: bool,
    /// `Ψ̂` is singular (data explained exactly by the features).
    pub psi_singular: bool,
}

/// `M̂ = YD⁻¹Φᵀ(ΦD⁻¹Φᵀ)⁻¹`, `Ψ̂ = (ν'/N) Y D^{-½} P D^{-½} Yᵀ`.
pub fn t_degenerate_mle(data: &Design, nu: f64) -> Result<TDegenerateMle> {
    let p = data.p();
    let nu_prime = nu - p as f64 - 1.0;
    if !(nu > 2.0 * p as f64) {
        return Err(MbllError::DegreesOfFreedom {
            dof: nu,
            requirement: format!("prior needs nu > 2p = {}", 2 * p),
        });
    }
    let m_hat = least_squares(data)?;
    let proj = projector_p(data);
    let yd = scale_columns(&data.y, &data.d.map(|s| 1.0 / s.sqrt()));
    let psi_hat = symmetrize(&(&yd * proj * yd.transpose())) * (nu_prime / data.n() as f64);
    let scale = psi_hat.amax().max(f64::MIN_POSITIVE);
    let psi_singular = psi_hat.amax() < 1e-12 || Chol::new(&(&psi_hat / scale), "Psi hat").is_err();
    Ok(TDegenerateMle {
        m_hat,
        psi_hat,
        k_hat: DMatrix::zeros(data.d_t(), data.d_t()),
        degenerate: true,
        psi_singular,
    })
}

/// `E[Ψ̂] = ((N-q)/N) (ν'/(ν'-p-1)) Ψ` for data drawn from the prior model.
pub fn bias_factor(p: usize, q: usize, n: usize, nu_prime: f64) -> f64 {
    (n as f64 - q as f64) / n as f64 * (nu_prime / (nu_prime - p as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bll_normal::{predict, DesignBlock, NormalHyper};
    use crate::matvar::MatNormal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::*;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn scalar_case() -> (Design, THyper) {
        let data = Design::homoscedastic(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 2.0), 1.0)
            .unwrap();
        let h = THyper::new(DMatrix::zeros(1, 1), eye(1), eye(1), 7.0, Structure::Full, Structure::Full).unwrap();
        (data, h)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = rand_mat(n, n, rng);
        &a * a.transpose() + eye(n) * 0.5
    }

    fn random_instance(p: usize, d_t: usize, n: usize, seed: u64) -> (Design, THyper) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Design::new(
            rand_mat(d_t, n, &mut rng),
            rand_mat(p, n, &mut rng) * 2.0,
            DVector::from_fn(n, |_, _| rng.random_range(0.3..2.0)),
        )
        .unwrap();
        let h = THyper::new(
            rand_mat(p, d_t, &mut rng),
            rand_spd(d_t, &mut rng),
            rand_spd(p, &mut rng),
            2.0 * p as f64 + 1.5 + rng.random_range(0.0..4.0),
            Structure::Full,
            Structure::Full,
        )
        .unwrap();
        (data, h)
    }

    #[test]
    fn scalar_posteriors() {
        let (data, h) = scalar_case();
        let s = TSuffStats::compute(&data, &h).unwrap();
        assert!((s.base.sycx[(0, 0)] - 2.0).abs() < 1e-15);
        let a = t_posterior_a(&data, &h).unwrap();
        assert!((a.mean()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((a.row_scale()[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((a.col_scale()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(a.dof(), 6.0);
        let v = t_posterior_v(&data, &h).unwrap();
        assert!((v.scale()[(0, 0)] - 3.0).abs() < 1e-15);
        assert_eq!(v.dof(), 8.0);
        let pr = t_predict(&data, &h, &DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 1.0)).unwrap();
        assert!((pr.mean[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((pr.row_scale[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((pr.col_scale[(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(pr.dof, 6.0);
        let (al, ep) = pr.uncertainties().unwrap();
        assert!((al[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((ep[(0, 0)] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn no_data_gives_prior_predictive() {
        let (data, h) = random_instance(2, 3, 0, 1);
        let phi_star = DMatrix::from_element(3, 2, 0.4);
        let dstar = DVector::from_element(2, 0.5);
        let pr = t_predict(&data, &h, &phi_star, &dstar).unwrap();
        assert!((&pr.mean - &h.m * &phi_star).amax() < 1e-14);
        assert!((&pr.row_scale - &h.psi).amax() < 1e-14);
        let col = DMatrix::from_diagonal(&dstar) + phi_star.transpose() * &h.k * &phi_star;
        assert!((&pr.col_scale - col).amax() < 1e-12);
        assert_eq!(pr.dof, h.nu - 4.0);
    }

    #[test]
    fn efficient_evidence_matches_dense_matrix_t() {
        for (n, seed) in [(1, 2), (3, 3), (8, 4)] {
            let (data, h) = random_instance(2, 3, n, seed);
            let dense = t_evidence(&data, &h).unwrap().logpdf(&data.y).unwrap();
            let fast = t_log_evidence(&data, &h).unwrap();
            assert!((dense - fast).abs() < 1e-9, "{dense} vs {fast}");
            assert!((t_evidential_loss(&data, &h).unwrap() + fast).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_loss_hand_evaluation() {
        let (data, h) = scalar_case();
        // ν' = 5, N = 1, ln|Ω| = ln 2, H = 3
        let cn = crate::matvar::lmvgamma(1, 3.0).unwrap() - crate::matvar::lmvgamma(1, 2.5).unwrap() - LN_PI / 2.0;
        let expected = -cn - 0.0 + 0.5 * 2f64.ln() + 3.0 * 3f64.ln();
        assert!((t_evidential_loss(&data, &h).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn chain_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..200 {
            let (p, d_t, n) = (1 + i % 3, 1 + (i / 3) % 3, (i / 9) % 6);
            let (data, h) = random_instance(p, d_t, n, 1000 + i as u64);
            let a = rand_mat(p, d_t, &mut rng);
            let v = rand_spd(p, &mut rng);
            let lik: f64 = (0..n)
                .map(|j| {
                    let dist = MatNormal::new(
                        &a * data.phi.columns(j, 1),
                        &v * data.d[j],
                        eye(1),
                    )
                    .unwrap();
                    dist.logpdf(&data.y.columns(j, 1).into_owned()).unwrap()
                })
                .sum();
            let prior_a = MatNormal::new(h.m.clone(), v.clone(), h.k.clone()).unwrap().logpdf(&a).unwrap();
            let prior_v = InvWishart::new(h.psi.clone(), h.nu).unwrap().logpdf(&v).unwrap();
            let joint = lik + prior_a + prior_v;
            let chain = t_conditional_v(&data, &h, &a).unwrap().logpdf(&v).unwrap()
                + t_posterior_a(&data, &h).unwrap().logpdf(&a).unwrap()
                + t_log_evidence(&data, &h).unwrap();
            assert!((joint - chain).abs() < 1e-8, "instance {i}: {joint} vs {chain}");
            // and the other ordering through A | Y, V and V | Y
            let chain2 = t_conditional_a(&data, &h, &v).unwrap().logpdf(&a).unwrap()
                + t_posterior_v(&data, &h).unwrap().logpdf(&v).unwrap()
                + t_log_evidence(&data, &h).unwrap();
            assert!((joint - chain2).abs() < 1e-8, "instance {i}: {joint} vs {chain2}");
        }
    }

    #[test]
    fn dof_bookkeeping() {
        let (data, h) = random_instance(2, 3, 5, 6);
        let n = 5.0;
        assert_eq!(t_evidence(&data, &h).unwrap().dof(), h.nu - 4.0);
        assert_eq!(t_posterior_a(&data, &h).unwrap().dof(), h.nu + n - 4.0);
        assert_eq!(t_posterior_v(&data, &h).unwrap().dof(), h.nu + n);
        assert_eq!(t_conditional_v(&data, &h, &h.m).unwrap().dof(), h.nu + n + 3.0);
    }

    #[test]
    fn uncertainty_ratio_and_zero_features() {
        let (data, h) = random_instance(2, 3, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi_star = rand_mat(3, 3, &mut rng);
        let dstar = DVector::from_element(3, 0.8);
        let (al, ep) = t_uncertainties(&data, &h, &phi_star, &dstar).unwrap();
        let s = TSuffStats::compute(&data, &h).unwrap();
        let ratio = (phi_star.transpose() * &s.base.sxx_inv * &phi_star).trace() / dstar.sum();
        assert!((ep.trace() / al.trace() - ratio).abs() < 1e-12);
        let (_, ep0) = t_uncertainties(&data, &h, &DMatrix::zeros(3, 1), &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(ep0, DMatrix::zeros(2, 2));
    }

    #[test]
    fn low_dof_uncertainties_error() {
        let data = Design::homoscedastic(DMatrix::zeros(1, 0), DMatrix::zeros(1, 0), 1.0).unwrap();
        let h = THyper::new(DMatrix::zeros(1, 1), eye(1), eye(1), 3.5, Structure::Full, Structure::Full).unwrap();
        let r = t_uncertainties(&data, &h, &DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 1.0));
        assert!(matches!(r, Err(MbllError::DegreesOfFreedom { .. })));
    }

    #[test]
    fn large_dof_limit_matches_normal_case() {
        let (data, h0) = random_instance(2, 3, 6, 9);
        let v0 = h0.psi.clone();
        let nu = 1e5;
        let h = THyper::new(h0.m.clone(), h0.k.clone(), &v0 * (nu - 6.0), nu, Structure::Full, Structure::Full).unwrap();
        let phi_star = DMatrix::from_element(3, 2, 0.3);
        let dstar = DVector::from_element(2, 1.0);
        let pt = t_predict(&data, &h, &phi_star, &dstar).unwrap();
        let (al, ep) = pt.uncertainties().unwrap();
        let block = DesignBlock::new(data.clone(), v0).unwrap();
        let pn = predict(&block, &NormalHyper::new(h0.m.clone(), h0.k.clone(), Structure::Full).unwrap(), &phi_star, &dstar)
            .unwrap();
        let rel = (al + ep - pn.total()).norm() / pn.total().norm();
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn sycx_is_psd() {
        for seed in 0..20 {
            let (data, h) = random_instance(3, 2, seed as usize % 7, 50 + seed);
            let s = TSuffStats::compute(&data, &h).unwrap();
            let shifted = &s.base.sycx + eye(3) * 1e-12;
            assert!(Chol::new(&shifted, "sycx").is_ok() || s.base.sycx.amax() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mle_noiseless_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_mat(2, 3, &mut rng);
        let phi = rand_mat(3, 8, &mut rng);
        let data = Design::homoscedastic(phi.clone(), &a * &phi, 0.5).unwrap();
        let mle = t_degenerate_mle(&data, 7.0).unwrap();
        assert!(mle.psi_singular && mle.degenerate);
        assert!(mle.psi_hat.amax() < 1e-10);
        // scalar, q = 1, N = 3
        let y = [1.0, -0.5, 2.0];
        let data = Design::homoscedastic(DMatrix::from_element(1, 3, 1.0), DMatrix::from_row_slice(1, 3, &y), 1.0).unwrap();
        let nu = 7.0;
        let mean = y.iter().sum::<f64>() / 3.0;
        let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let mle = t_degenerate_mle(&data, nu).unwrap();
        assert!((mle.psi_hat[(0, 0)] - (nu - 2.0) / 3.0 * ss).abs() < 1e-12);
        assert!((mle.m_hat[(0, 0)] - mean).abs() < 1e-12);
    }

    #[test]
    fn bias_factor_value() {
        assert!((bias_factor(2, 3, 20, 6.0) - 1.7).abs() < 1e-14);
    }

    #[test]
    fn loss_decreases_towards_degenerate_point() {
        let (data, _) = random_instance(2, 3, 15, 11);
        let nu = 7.0;
        let mle = t_degenerate_mle(&data, nu).unwrap();
        let mut prev = f64::INFINITY;
        for c in [1.0, 0.1, 0.01, 0.001] {
            let h = THyper::new(mle.m_hat.clone(), eye(3) * c, mle.psi_hat.clone(), nu, Structure::Full, Structure::Full)
                .unwrap();
            let l = t_evidential_loss(&data, &h).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn loss_differences_equal_evidence_differences() {
        let (data, h1) = random_instance(2, 3, 6, 12);
        let mut h2 = h1.clone();
        h2.k = &h2.k * 2.0;
        h2.psi = &h2.psi * 0.5;
        let dl = t_evidential_loss(&data, &h1).unwrap() - t_evidential_loss(&data, &h2).unwrap();
        let de = t_evidence(&data, &h1).unwrap().logpdf(&data.y).unwrap()
            - t_evidence(&data, &h2).unwrap().logpdf(&data.y).unwrap();
        assert!((dl + de).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn evidence_without_omega_matches_dense(p in 1usize..3, d_t in 1usize..4, n in 1usize..9, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Design::new(
                rand_mat(d_t, n, &mut rng),
                rand_mat(p, n, &mut rng),
                DVector::from_fn(n, |_, _| rng.random_range(0.3..2.0)),
            )
            .unwrap();
            let h = THyper::new(rand_mat(p, d_t, &mut rng), rand_spd(d_t, &mut rng), rand_spd(p, &mut rng), 2.0 * p as f64 + 1.5, Structure::Full, Structure::Full).unwrap();
            let fast = t_log_evidence(&data, &h).unwrap();
            let dense = t_evidence(&data, &h).unwrap().logpdf(&data.y).unwrap();
            prop_assert!((fast - dense).abs() < 1e-9 * (1.0 + dense.abs()));
        }
    }
}

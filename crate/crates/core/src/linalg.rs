//! Dense SPD kernels shared by every model: guarded Cholesky factorization,
//! log-determinants, Kronecker products and structural projections.

use std::collections::BTreeSet;
use std::sync::Mutex;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{MbllError, Result};

/// Condition numbers above this are logged.
pub const COND_WARN: f64 = 1e8;
/// Condition numbers above this are rejected.
pub const COND_MAX: f64 = 1e13;
const JITTER_REL: f64 = 1e-10;

/// Cholesky factor of an SPD matrix, `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Chol {
    inner: Cholesky<f64, Dyn>,
    dim: usize,
}

/// Iterative fits refactorize the same matrix many times; one warning per
/// matrix kind is enough.
fn warn_once(what: &'static str, cond: f64) {
    static SEEN: Mutex<BTreeSet<&'static str>> = Mutex::new(BTreeSet::new());
    let first = SEEN.lock().map(|mut s| s.insert(what)).unwrap_or(true);
    if first {
        log::warn!("{what} is poorly conditioned (estimate {cond:.3e}); further warnings suppressed");
    } else {
        log::debug!("{what} is poorly conditioned (estimate {cond:.3e})");
    }
}

impl Chol {
    /// Factorizes `a`, retrying once with a relative diagonal jitter.
    ///
    /// The condition number is estimated from the spread of the factor's
    /// diagonal, `(max Lᵢᵢ / min Lᵢᵢ)²`, which is a lower bound on the true
    /// spectral condition number.
    pub fn new(a: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(MbllError::DimensionMismatch {
                context: what,
                expected: "square matrix".into(),
                got: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        let n = a.nrows();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(MbllError::NonFinite(format!("{what} has non-finite entries")));
        }
        let sym = symmetrize(a);
        let inner = match Cholesky::new(sym.clone()) {
            Some(c) => c,
            None => {
                let jitter = JITTER_REL * sym.trace().abs() / n.max(1) as f64;
                let mut shifted = sym;
                for i in 0..n {
                    shifted[(i, i)] += jitter;
                }
                Cholesky::new(shifted).ok_or(MbllError::NotPositiveDefinite { what })?
            }
        };
        let chol = Self { inner, dim: n };
        let cond = chol.condition_estimate();
        if cond > COND_MAX {
            return Err(MbllError::IllConditioned { what, cond });
        }
        if cond > COND_WARN {
            warn_once(what, cond);
        }
        Ok(chol)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.inner.l()
    }

    pub fn condition_estimate(&self) -> f64 {
        if self.dim == 0 {
            return 1.0;
        }
        let l = self.inner.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..self.dim {
            let d = l[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }

    /// `ln |A| = 2 Σ ln Lᵢᵢ`.
    pub fn logdet(&self) -> f64 {
        let l = self.inner.l_dirty();
        (0..self.dim).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        self.inner.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim == 0 {
            return DVector::zeros(0);
        }
        self.inner.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        if self.dim == 0 {
            return DMatrix::zeros(0, 0);
        }
        symmetrize(&self.inner.inverse())
    }

    /// `L⁻¹ B`, so that `Bᵀ A⁻¹ B = (L⁻¹B)ᵀ (L⁻¹B)` is PSD by construction.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        self.inner
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `Bᵀ A⁻¹ B` as an exactly symmetric matrix.
    pub fn quad_form(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.whiten(b);
        w.transpose() * w
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * a.amax().max(1.0)
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}

/// Diagonal `D⁻¹` scaling of columns: returns `A diag(w)`.
pub fn scale_columns(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= w[j];
    }
    out
}

/// Structural constraint on a covariance-type hyperparameter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Full,
    Diagonal,
    Isotropic,
}

impl Structure {
    /// Projects an unconstrained minimizer `B` of `ln|K| + tr(K⁻¹B)` onto the
    /// constraint set. For this objective the projection is the exact
    /// constrained minimizer: diagonal keeps `diag(B)`, isotropic uses the
    /// mean of the diagonal.
    pub fn project(self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = b.nrows();
        match self {
            Structure::Full => symmetrize(b),
            Structure::Diagonal => DMatrix::from_diagonal(&b.diagonal()),
            Structure::Isotropic => DMatrix::identity(n, n) * (b.trace() / n.max(1) as f64),
        }
    }

    pub fn admits(self, a: &DMatrix<f64>, tol: f64) -> bool {
        let n = a.nrows();
        match self {
            Structure::Full => is_symmetric(a, tol),
            Structure::Diagonal => {
                let off = a - DMatrix::from_diagonal(&a.diagonal());
                off.amax() <= tol * a.amax().max(1.0)
            }
            Structure::Isotropic => {
                let iso = DMatrix::identity(n, n) * (a.trace() / n.max(1) as f64);
                (a - iso).amax() <= tol * a.amax().max(1.0)
            }
        }
    }
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with `data` in
/// row-major order.
pub mod rowmajor {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Doc {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let data = m.transpose().as_slice().to_vec();
        Doc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let doc = Doc::deserialize(d)?;
        if doc.data.len() != doc.rows * doc.cols {
            return Err(D::Error::custom(format!(
                "matrix {}x{} needs {} entries, got {}",
                doc.rows,
                doc.cols,
                doc.rows * doc.cols,
                doc.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(doc.rows, doc.cols, &doc.data))
    }
}

/// Serde adapter storing a vector as a plain array.
pub mod plainvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod opt_rowmajor {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "crate::linalg::rowmajor")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(|m| Wrap(m.clone())).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn logdet_matches_determinant() {
        let a = spd(4, 1);
        let c = Chol::new(&a, "a").unwrap();
        assert!((c.logdet() - a.determinant().ln()).abs() < 1e-10);
    }

    #[test]
    fn quad_form_is_symmetric_and_correct() {
        let a = spd(3, 2);
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.0);
        let c = Chol::new(&a, "a").unwrap();
        let q = c.quad_form(&b);
        let direct = b.transpose() * a.try_inverse().unwrap() * &b;
        assert!((q.clone() - direct).amax() < 1e-10);
        assert_eq!(q, q.transpose());
    }

    #[test]
    fn jitter_rescues_semidefinite_input() {
        // rank-1 PSD: plain Cholesky fails, the jittered factor is accepted
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let a = &v * v.transpose();
        let c = Chol::new(&a, "rank1").unwrap();
        assert!((c.l() * c.l().transpose() - &a).amax() < 1e-8);
    }

    #[test]
    fn condition_guard_rejects() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(
            Chol::new(&a, "x"),
            Err(MbllError::IllConditioned { .. })
        ));
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Chol::new(&a, "x"),
            Err(MbllError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn empty_matrix_factorizes() {
        let c = Chol::new(&DMatrix::zeros(0, 0), "empty").unwrap();
        assert_eq!(c.logdet(), 0.0);
        assert_eq!(c.inverse().nrows(), 0);
    }

    #[test]
    fn projections() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 4.0]);
        assert_eq!(
            Structure::Diagonal.project(&b),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0])
        );
        assert_eq!(
            Structure::Isotropic.project(&b),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 3.0])
        );
    }

    #[test]
    fn vec_unvec_roundtrip() {
        let a = DMatrix::from_fn(2, 3, |i, j| (3 * i + j) as f64);
        assert_eq!(unvec(&vec(&a), 2, 3), a);
        // column stacking
        assert_eq!(vec(&a)[1], a[(1, 0)]);
    }

    #[test]
    fn rowmajor_round_trip() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct W {
            #[serde(with = "super::rowmajor")]
            m: DMatrix<f64>,
        }
        let w = W { m: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) };
        let js = serde_json::to_string(&w).unwrap();
        assert_eq!(js, r#"{"m":{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}}"#);
        let back: W = serde_json::from_str(&js).unwrap();
        assert_eq!(back.m, w.m);
        assert!(serde_json::from_str::<W>(r#"{"m":{"rows":2,"cols":2,"data":[1.0]}}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solve_round_trip(n in 1usize..7, seed in 0u64..10_000) {
            let a = spd(n, seed);
            let b = DMatrix::from_fn(n, 2, |i, j| (i as f64 - j as f64) * 0.3 + 1.0);
            let x = Chol::new(&a, "a").unwrap().solve(&b);
            prop_assert!((&a * x - &b).amax() < 1e-9);
        }

        #[test]
        fn kron_vec_identity(r in 1usize..4, c in 1usize..4, seed in 0u64..10_000) {
            let a = spd(r, seed);
            let b = spd(c, seed + 1);
            let x = DMatrix::from_fn(r, c, |i, j| ((i * 3 + j) as f64).sin());
            // vec(AXB) = (Bᵀ ⊗ A) vec(X)
            let lhs = vec(&(&a * &x * &b));
            let rhs = kron(&b.transpose(), &a) * vec(&x);
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn projections_are_idempotent_and_admitted(n in 1usize..6, seed in 0u64..10_000) {
            let a = spd(n, seed);
            for s in [Structure::Full, Structure::Diagonal, Structure::Isotropic] {
                let p = s.project(&a);
                prop_assert!((s.project(&p) - &p).amax() < 1e-14);
                prop_assert!(s.admits(&p, 1e-12));
                prop_assert!((p.trace() - a.trace()).abs() < 1e-10);
            }
        }
    }
}

//! Joint regularized criterion, its smooth gradient in `S`, and the
//! noise-level-based choice of regularization weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix, ReferenceSpectra, ScaleSeries};

/// Weight of the spectral-variability penalty, global or per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpectralWeight {
    Uniform(f64),
    PerSource(Vec<f64>),
}

impl SpectralWeight {
    pub fn for_source(&self, p: usize) -> f64 {
        match self {
            Self::Uniform(w) => *w,
            Self::PerSource(w) => w[p],
        }
    }

    pub fn diagonal(&self, sources: usize) -> DVector<f64> {
        DVector::from_fn(sources, |p, _| self.for_source(p))
    }

    fn check(&self, sources: usize) -> Result<()> {
        let values: &[f64] = match self {
            Self::Uniform(w) => std::slice::from_ref(w),
            Self::PerSource(w) => {
                if w.len() != sources {
                    return Err(dim_err(format!("{} spectral weights for {sources} sources", w.len())));
                }
                w
            }
        };
        if values.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(UnmixError::Config(format!("spectral weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Regularization weights, ADMM penalty, and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_s: SpectralWeight,
    pub lambda_a: f64,
    pub rho: f64,
    pub eps_s: f64,
    pub eps_a: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub admm_eps_abs: f64,
    pub admm_eps_rel: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_s: SpectralWeight::Uniform(1.0),
            lambda_a: 0.25,
            rho: 1.0,
            eps_s: 1e-6,
            eps_a: 1e-6,
            max_outer: 200,
            max_inner: 500,
            admm_eps_abs: 1e-6,
            admm_eps_rel: 1e-4,
        }
    }
}

impl Hyperparams {
    pub fn with_lambdas(lambda_s: f64, lambda_a: f64) -> Self {
        Self { lambda_s: SpectralWeight::Uniform(lambda_s), lambda_a, ..Self::default() }
    }

    pub fn validate(&self, sources: usize) -> Result<()> {
        self.lambda_s.check(sources)?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(self.lambda_a.is_finite() && self.lambda_a >= 0.0) {
            return Err(UnmixError::Config(format!("lambda_a = {} must be >= 0", self.lambda_a)));
        }
        if !positive(self.rho) {
            return Err(UnmixError::Config(format!("rho = {} must be > 0", self.rho)));
        }
        for (name, v) in [
            ("eps_s", self.eps_s),
            ("eps_a", self.eps_a),
            ("admm_eps_abs", self.admm_eps_abs),
            ("admm_eps_rel", self.admm_eps_rel),
        ] {
            if !positive(v) {
                return Err(UnmixError::Config(format!("{name} = {v} must be > 0")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(UnmixError::Config("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lambda_S = sigma_e^2 / sigma_v^2` and `lambda_A = sigma_e^2 / b`.
pub fn tune_hyperparameters(sigma_e: f64, sigma_v: f64, b: f64) -> Result<(f64, f64)> {
    if !(sigma_v > 0.0 && b > 0.0) {
        return Err(UnmixError::Domain(format!(
            "sigma_v ({sigma_v}) and b ({b}) must be strictly positive"
        )));
    }
    let ratio = sigma_e / sigma_v;
    Ok((ratio * ratio, sigma_e * (sigma_e / b)))
}

pub(crate) struct Problem<'a> {
    pub x: &'a FrameSequence,
    pub s0: &'a ReferenceSpectra,
}

impl Problem<'_> {
    pub(crate) fn check(
        &self,
        s: &EndmemberTrajectory,
        a: &AbundanceTrajectory,
        psi: &ScaleSeries,
    ) -> Result<()> {
        let k = self.x.len();
        let (l, n, p) = (self.x.channels(), self.x.pixels(), self.s0.sources());
        if self.s0.channels() != l {
            return Err(dim_err(format!("S0 has {} channels, data has {l}", self.s0.channels())));
        }
        if s.len() != k || a.len() != k || psi.frames() != k {
            return Err(dim_err(format!(
                "frame counts differ: X {k}, S {}, A {}, psi {}",
                s.len(),
                a.len(),
                psi.frames()
            )));
        }
        if psi.sources() != p {
            return Err(dim_err(format!("psi has {} sources, S0 has {p}", psi.sources())));
        }
        if s[0].shape() != (l, p) {
            return Err(dim_err(format!("S frames are {:?}, expected ({l}, {p})", s[0].shape())));
        }
        if a[0].shape() != (p, n) {
            return Err(dim_err(format!("A frames are {:?}, expected ({p}, {n})", a[0].shape())));
        }
        Ok(())
    }
}

/// Data-fit term `1/2 sum_k ||X_k - S_k A_k||_F^2`.
pub fn data_fit(x: &FrameSequence, s: &[Matrix], a: &[Matrix]) -> f64 {
    x.frames()
        .iter()
        .zip(s.iter().zip(a))
        .map(|(xk, (sk, ak))| 0.5 * (xk - sk * ak).norm_squared())
        .sum()
}

/// Spectral penalty `sum_k sum_p lambda_p / 2 ||s_k^p - psi_k^p s_0^p||^2`.
pub fn spectral_penalty(s: &[Matrix], psi: &ScaleSeries, s0: &ReferenceSpectra, weight: &SpectralWeight) -> f64 {
    s.iter()
        .enumerate()
        .map(|(k, sk)| {
            (0..sk.ncols())
                .map(|p| {
                    let w = weight.for_source(p);
                    let diff = sk.column(p) - s0.matrix().column(p) * psi.get(k, p);
                    0.5 * w * diff.norm_squared()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Temporal sparsity term `lambda_A sum_{k>=2} ||A_k - A_{k-1}||_1` (entrywise).
pub fn change_penalty(a: &[Matrix], lambda_a: f64) -> f64 {
    lambda_a * total_variation(a)
}

/// `sum_{k>=2} ||A_k - A_{k-1}||_1`.
pub fn total_variation(a: &[Matrix]) -> f64 {
    a.windows(2)
        .map(|w| w[1].iter().zip(w[0].iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum()
}

/// Evaluates the joint criterion for a candidate `(S, A, psi)`.
pub fn evaluate_objective(
    s: &EndmemberTrajectory,
    a: &AbundanceTrajectory,
    psi: &ScaleSeries,
    x: &FrameSequence,
    s0: &ReferenceSpectra,
    h: &Hyperparams,
) -> Result<f64> {
    Problem { x, s0 }.check(s, a, psi)?;
    h.lambda_s.check(s0.sources())?;
    Ok(data_fit(x, s.frames(), a.frames())
        + spectral_penalty(s.frames(), psi, s0, &h.lambda_s)
        + change_penalty(a.frames(), h.lambda_a))
}

/// Gradient in `S_k` of the two smooth terms:
/// `(S_k A_k - X_k) A_k^T + (S_k - S_0 psi_k) Lambda_S`.
pub fn gradient_smooth_s(
    s: &EndmemberTrajectory,
    a: &AbundanceTrajectory,
    psi: &ScaleSeries,
    x: &FrameSequence,
    s0: &ReferenceSpectra,
    h: &Hyperparams,
) -> Result<Vec<Matrix>> {
    Problem { x, s0 }.check(s, a, psi)?;
    h.lambda_s.check(s0.sources())?;
    let weights = h.lambda_s.diagonal(s0.sources());
    Ok((0..x.len())
        .map(|k| {
            let (sk, ak) = (&s[k], &a[k]);
            let mut prior = sk - s0.scaled(psi, k);
            for (p, mut col) in prior.column_iter_mut().enumerate() {
                col *= weights[p];
            }
            (sk * ak - &x.frames()[k]) * ak.transpose() + prior
        })
        .collect())
}

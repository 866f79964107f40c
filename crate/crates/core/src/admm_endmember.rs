//! Nonnegative endmember subproblem solved by ADMM with the split `S_k = M_k`.
//!
//! For fixed abundances and scale factors the criterion separates over
//! frames, so each frame runs its own ADMM loop (and its own stopping test).

use nalgebra::{Cholesky, Dyn};

use crate::error::{Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix, ReferenceSpectra, ScaleSeries};
use crate::objective::{Hyperparams, Problem, SpectralWeight};
use crate::par;

/// Iterates of the endmember ADMM, one entry per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberAdmmState {
    pub s: Vec<Matrix>,
    /// Nonnegative split variables; these are the reported endmembers.
    pub m: Vec<Matrix>,
    /// Scaled multipliers.
    pub u: Vec<Matrix>,
    pub primal_res: Vec<f64>,
    pub dual_res: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: bool,
}

impl EndmemberAdmmState {
    /// Starts from given endmembers with zero multipliers.
    pub fn from_endmembers(s: &EndmemberTrajectory) -> Self {
        let k = s.len();
        Self {
            s: s.frames().to_vec(),
            m: s.frames().to_vec(),
            u: s.frames().iter().map(|f| Matrix::zeros(f.nrows(), f.ncols())).collect(),
            primal_res: vec![0.0; k],
            dual_res: vec![0.0; k],
            iterations: vec![0; k],
            converged: false,
        }
    }
}

pub(crate) fn project_nonnegative(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Linear system of one frame: `S G = C + rho (M - U)` with
/// `G = A A^T + Lambda_S + rho I` and `C = X A^T + S_0 psi_k Lambda_S`.
struct FrameSystem {
    chol: Cholesky<f64, Dyn>,
    constant: Matrix,
    rho: f64,
}

impl FrameSystem {
    fn new(
        xk: &Matrix,
        ak: &Matrix,
        s0: &ReferenceSpectra,
        psi_k: &[f64],
        weight: &SpectralWeight,
        rho: f64,
    ) -> Result<Self> {
        let p = ak.nrows();
        let mut gram = ak * ak.transpose();
        for i in 0..p {
            gram[(i, i)] += weight.for_source(i) + rho;
        }
        let mut constant = xk * ak.transpose();
        for (i, mut col) in constant.column_iter_mut().enumerate() {
            col.axpy(weight.for_source(i) * psi_k[i], &s0.matrix().column(i), 1.0);
        }
        if gram.iter().chain(constant.iter()).any(|v| !v.is_finite()) {
            return Err(UnmixError::Numeric("non-finite entry in the endmember system".into()));
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| UnmixError::Numeric("endmember Gram matrix is not positive definite".into()))?;
        Ok(Self { chol, constant, rho })
    }

    fn solve(&self, m: &Matrix, u: &Matrix) -> Matrix {
        let rhs = &self.constant + (m - u) * self.rho;
        // G is symmetric, so S = rhs G^{-1} is the transpose of G^{-1} rhs^T.
        self.chol.solve(&rhs.transpose()).transpose()
    }
}

/// One endmember update for a single frame.
pub fn s_step(
    xk: &Matrix,
    ak: &Matrix,
    s0: &ReferenceSpectra,
    psi_k: &[f64],
    mk: &Matrix,
    uk: &Matrix,
    h: &Hyperparams,
) -> Result<Matrix> {
    if [xk, ak, mk, uk].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(UnmixError::Numeric("non-finite input to the endmember update".into()));
    }
    Ok(FrameSystem::new(xk, ak, s0, psi_k, &h.lambda_s, h.rho)?.solve(mk, uk))
}

struct FrameOutcome {
    s: Matrix,
    m: Matrix,
    u: Matrix,
    primal: f64,
    dual: f64,
    iterations: usize,
    converged: bool,
}

fn solve_frame(system: &FrameSystem, mut s: Matrix, mut m: Matrix, mut u: Matrix, h: &Hyperparams) -> FrameOutcome {
    let size_sqrt = (m.len() as f64).sqrt();
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    for it in 1..=h.max_inner {
        s = system.solve(&m, &u);
        let m_new = project_nonnegative(&(&s + &u));
        u += &s - &m_new;
        primal = (&s - &m_new).norm();
        dual = h.rho * (&m_new - &m).norm();
        m = m_new;
        let eps_pri = size_sqrt * h.admm_eps_abs + h.admm_eps_rel * s.norm().max(m.norm());
        let eps_dual = size_sqrt * h.admm_eps_abs + h.admm_eps_rel * h.rho * u.norm();
        if primal <= eps_pri && dual <= eps_dual {
            return FrameOutcome { s, m, u, primal, dual, iterations: it, converged: true };
        }
    }
    FrameOutcome { s, m, u, primal, dual, iterations: h.max_inner, converged: false }
}

/// Solves `min_S sum_k 1/2||X_k - S_k A_k||^2 + spectral penalty` s.t. `S >= 0`.
///
/// Without a warm start the split starts at `S_0 psi_k` with zero multipliers.
/// The returned endmembers are the projected `M` iterates, so they are exactly
/// nonnegative. Hitting `max_inner` is reported through `converged`.
pub fn solve_s(
    x: &FrameSequence,
    a: &AbundanceTrajectory,
    psi: &ScaleSeries,
    s0: &ReferenceSpectra,
    h: &Hyperparams,
    warm_start: Option<EndmemberAdmmState>,
) -> Result<(EndmemberTrajectory, EndmemberAdmmState)> {
    h.validate(s0.sources())?;
    let start = match warm_start {
        Some(state) => state,
        None => {
            let nominal: Vec<Matrix> = (0..x.len()).map(|k| project_nonnegative(&s0.scaled(psi, k))).collect();
            EndmemberAdmmState::from_endmembers(&EndmemberTrajectory::from_frames_unchecked(nominal))
        }
    };
    let start_s = EndmemberTrajectory::from_frames_unchecked(start.m.clone());
    Problem { x, s0 }.check(&start_s, a, psi)?;
    if start.u.len() != x.len() || start.u.iter().any(|u| u.shape() != start.m[0].shape()) {
        return Err(UnmixError::Dimension("warm-start multipliers do not match the endmembers".into()));
    }

    let outcomes = par::map_indexed(x.len(), |k| -> Result<FrameOutcome> {
        let psi_k: Vec<f64> = psi.matrix().row(k).iter().copied().collect();
        let system = FrameSystem::new(&x.frames()[k], &a[k], s0, &psi_k, &h.lambda_s, h.rho)?;
        Ok(solve_frame(&system, start.s[k].clone(), start.m[k].clone(), start.u[k].clone(), h))
    });

    let mut state = EndmemberAdmmState {
        s: Vec::with_capacity(x.len()),
        m: Vec::with_capacity(x.len()),
        u: Vec::with_capacity(x.len()),
        primal_res: Vec::with_capacity(x.len()),
        dual_res: Vec::with_capacity(x.len()),
        iterations: Vec::with_capacity(x.len()),
        converged: true,
    };
    for outcome in outcomes {
        let o = outcome?;
        state.s.push(o.s);
        state.m.push(o.m);
        state.u.push(o.u);
        state.primal_res.push(o.primal);
        state.dual_res.push(o.dual);
        state.iterations.push(o.iterations);
        state.converged &= o.converged;
    }
    Ok((EndmemberTrajectory::from_frames_unchecked(state.m.clone()), state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_update() {
        let s0 = ReferenceSpectra::new(scalar(1.0)).unwrap();
        let h = Hyperparams::with_lambdas(1.0, 0.0);
        let s = s_step(&scalar(2.0), &scalar(1.0), &s0, &[1.0], &scalar(0.0), &scalar(0.0), &h).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_penalty_pins_reference() {
        let s0 = ReferenceSpectra::new(Matrix::from_fn(6, 2, |i, j| 0.2 + ((i + 3 * j) % 5) as f64 * 0.3)).unwrap();
        let xk = Matrix::from_fn(6, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1);
        let ak = Matrix::from_fn(2, 5, |i, j| 0.1 + ((i + j) % 3) as f64 * 0.4);
        let h = Hyperparams::with_lambdas(1e12, 0.0);
        let zero = Matrix::zeros(6, 2);
        let psi_k = [1.3, 0.7];
        let s = s_step(&xk, &ak, &s0, &psi_k, &zero, &zero, &h).unwrap();
        let nominal = s0.scaled(&ScaleSeries::new(Matrix::from_row_slice(1, 2, &psi_k)).unwrap(), 0);
        assert!((&s - &nominal).norm() / nominal.norm() < 1e-6);
    }

    #[test]
    fn update_solves_normal_equations() {
        let s0 = ReferenceSpectra::new(Matrix::from_fn(7, 3, |i, j| 0.1 + ((i * 5 + j * 2) % 7) as f64 * 0.2)).unwrap();
        let xk = Matrix::from_fn(7, 9, |i, j| ((i * 3 + j * 5) % 13) as f64 * 0.07);
        let ak = Matrix::from_fn(3, 9, |i, j| ((i * 2 + j) % 4) as f64 * 0.3);
        let mk = Matrix::from_fn(7, 3, |i, j| (i + j) as f64 * 0.05);
        let uk = Matrix::from_fn(7, 3, |i, j| (i as f64 - j as f64) * 0.01);
        let h = Hyperparams { lambda_s: SpectralWeight::PerSource(vec![0.5, 2.0, 1.0]), rho: 1.7, ..Default::default() };
        let psi_k = [1.1, 0.9, 1.0];
        let s = s_step(&xk, &ak, &s0, &psi_k, &mk, &uk, &h).unwrap();
        // (S A - X) A^T + (S - S0 psi) Lambda + rho (S - M + U) = 0
        let nominal = s0.scaled(&ScaleSeries::new(Matrix::from_row_slice(1, 3, &psi_k)).unwrap(), 0);
        let mut prior = &s - nominal;
        for (p, mut c) in prior.column_iter_mut().enumerate() {
            c *= h.lambda_s.for_source(p);
        }
        let residual = (&s * &ak - &xk) * ak.transpose() + prior + (&s - &mk + &uk) * h.rho;
        let scale = (&xk * ak.transpose()).norm();
        assert!(residual.norm() / scale < 1e-10, "{}", residual.norm());
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let s0 = ReferenceSpectra::new(scalar(1.0)).unwrap();
        let r = s_step(&scalar(f64::NAN), &scalar(1.0), &s0, &[1.0], &scalar(0.0), &scalar(0.0), &Hyperparams::default());
        assert!(matches!(r, Err(UnmixError::Numeric(_))));
    }

    fn tight() -> Hyperparams {
        Hyperparams { max_inner: 20_000, admm_eps_abs: 1e-12, admm_eps_rel: 1e-10, ..Hyperparams::with_lambdas(0.0, 0.0) }
    }

    #[test]
    fn identity_design_recovers_data() {
        let xk = Matrix::from_fn(4, 3, |i, j| 0.5 + (i * 3 + j) as f64 * 0.25);
        let x = FrameSequence::new(vec![xk.clone()]).unwrap();
        let a = AbundanceTrajectory::new(vec![Matrix::identity(3, 3)]).unwrap();
        let s0 = ReferenceSpectra::new(Matrix::from_element(4, 3, 1.0)).unwrap();
        let (s, state) = solve_s(&x, &a, &ScaleSeries::ones(1, 3), &s0, &tight(), None).unwrap();
        assert!(state.converged);
        assert!((&s[0] - xk).amax() < 1e-6);
    }

    #[test]
    fn negative_target_is_clamped() {
        let x = FrameSequence::new(vec![scalar(-1.0)]).unwrap();
        let a = AbundanceTrajectory::new(vec![scalar(1.0)]).unwrap();
        let s0 = ReferenceSpectra::new(scalar(1.0)).unwrap();
        let (s, _) = solve_s(&x, &a, &ScaleSeries::ones(1, 1), &s0, &tight(), None).unwrap();
        assert_eq!(s[0][(0, 0)], 0.0);
    }
}

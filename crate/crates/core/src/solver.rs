//! Outer alternating driver: endmember block, abundance block, then the
//! closed-form scale-factor update, until the relative changes of `S` and `A`
//! fall below their tolerances.
//!
//! The inner ADMM solves are inexact, so a block result that would raise the
//! objective is set aside and the previous value kept; the ADMM state still
//! carries over, and the next outer iteration resumes refining from it.

use serde::{Deserialize, Serialize};

use crate::admm_abundance::{solve_a, AbundanceAdmmState};
use crate::admm_endmember::{solve_s, EndmemberAdmmState};
use crate::error::{dim_err, Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix, ReferenceSpectra, ScaleSeries};
use crate::objective::{evaluate_objective, Hyperparams, Problem};

/// `psi_k^p = <s_0^p, s_k^p> / <s_0^p, s_0^p>`.
pub fn update_psi(s: &EndmemberTrajectory, s0: &ReferenceSpectra) -> Result<ScaleSeries> {
    let p_count = s0.sources();
    if s.frames().iter().any(|sk| sk.shape() != s0.matrix().shape()) {
        return Err(dim_err("endmember frames do not match the reference spectra"));
    }
    let norms: Vec<f64> = s0.matrix().column_iter().map(|c| c.norm_squared()).collect();
    if let Some(p) = norms.iter().position(|v| !(*v > 0.0)) {
        return Err(UnmixError::Domain(format!("reference spectrum {p} has zero norm")));
    }
    let m = Matrix::from_fn(s.len(), p_count, |k, p| s0.matrix().column(p).dot(&s[k].column(p)) / norms[p]);
    ScaleSeries::new(m)
}

/// `sum_k ||new_k - old_k||^2 / sum_k ||old_k||^2`; `0/0` counts as zero.
pub fn relative_change(new: &[Matrix], old: &[Matrix]) -> Result<f64> {
    if new.len() != old.len() || new.iter().zip(old).any(|(a, b)| a.shape() != b.shape()) {
        return Err(dim_err("iterates have different shapes"));
    }
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = old.iter().map(|b| b.norm_squared()).sum();
    if den == 0.0 {
        return if num == 0.0 {
            Ok(0.0)
        } else {
            Err(UnmixError::Domain("relative change undefined: previous iterate is zero".into()))
        };
    }
    Ok(num / den)
}

/// Outer stopping rule: both relative changes below their tolerances.
pub fn outer_converged(
    s_new: &EndmemberTrajectory,
    s_old: &EndmemberTrajectory,
    a_new: &AbundanceTrajectory,
    a_old: &AbundanceTrajectory,
    h: &Hyperparams,
) -> Result<bool> {
    let rs = relative_change(s_new.frames(), s_old.frames())?;
    let ra = relative_change(a_new.frames(), a_old.frames())?;
    Ok(rs < h.eps_s && ra < h.eps_a)
}

/// Starting point of the alternating scheme.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    /// `S_k = S_0`, `psi = 1`, `A_k = 1/P` everywhere.
    #[default]
    Default,
    Given {
        s: EndmemberTrajectory,
        a: AbundanceTrajectory,
        psi: ScaleSeries,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverConfig {
    pub h: Hyperparams,
    pub init: Init,
    /// Keep per-iteration inner diagnostics.
    pub record_trace: bool,
}

/// Per-outer-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub objective: f64,
    pub residual_s: f64,
    pub residual_a: f64,
    pub inner_iterations_s: usize,
    pub inner_iterations_a: usize,
    pub inner_converged: bool,
    /// Whether the endmember and abundance candidates were kept.
    pub accepted_s: bool,
    pub accepted_a: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    pub s: EndmemberTrajectory,
    pub a: AbundanceTrajectory,
    pub psi: ScaleSeries,
    /// Objective at the initialization, then after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub residual_s: f64,
    pub residual_a: f64,
    pub steps: Vec<OuterStep>,
}

fn initial_point(x: &FrameSequence, s0: &ReferenceSpectra, init: &Init) -> Result<(EndmemberTrajectory, AbundanceTrajectory, ScaleSeries)> {
    let (k, n, p) = (x.len(), x.pixels(), s0.sources());
    let point = match init {
        Init::Default => (
            EndmemberTrajectory::from_frames_unchecked(vec![s0.matrix().clone(); k]),
            AbundanceTrajectory::from_frames_unchecked(vec![Matrix::from_element(p, n, 1.0 / p as f64); k]),
            ScaleSeries::ones(k, p),
        ),
        Init::Given { s, a, psi } => (s.clone(), a.clone(), psi.clone()),
    };
    Problem { x, s0 }.check(&point.0, &point.1, &point.2)?;
    Ok(point)
}

/// Jointly unmixes all frames.
pub fn joint_unmix(x: &FrameSequence, s0: &ReferenceSpectra, cfg: &SolverConfig) -> Result<UnmixResult> {
    let h = &cfg.h;
    let (l, n, p) = (x.channels(), x.pixels(), s0.sources());
    if p > l.min(n) {
        return Err(dim_err(format!("{p} sources exceed min(channels, pixels) = {}", l.min(n))));
    }
    h.validate(p)?;
    let (mut s, mut a, mut psi) = initial_point(x, s0, &cfg.init)?;

    let mut objective = evaluate_objective(&s, &a, &psi, x, s0, h)?;
    let mut trace = vec![objective];
    let mut steps = Vec::new();
    let mut s_state = EndmemberAdmmState::from_endmembers(&s);
    let mut a_state = AbundanceAdmmState::from_abundances(&a);
    let (mut residual_s, mut residual_a) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut outer = 0;

    while outer < h.max_outer {
        outer += 1;
        let (s_cand, s_st) = solve_s(x, &a, &psi, s0, h, Some(s_state))?;
        let j_s = evaluate_objective(&s_cand, &a, &psi, x, s0, h)?;
        let accepted_s = j_s <= objective;
        let (s_new, j_s) = if accepted_s { (s_cand, j_s) } else { (s.clone(), objective) };

        let (a_cand, a_st) = solve_a(x, &s_new, h, Some(a_state))?;
        let j_a = evaluate_objective(&s_new, &a_cand, &psi, x, s0, h)?;
        let accepted_a = j_a <= j_s;
        let (a_new, j_a) = if accepted_a { (a_cand, j_a) } else { (a.clone(), j_s) };

        // Exact minimizer in psi; the check only guards against rounding.
        let psi_cand = update_psi(&s_new, s0)?;
        let j_psi = evaluate_objective(&s_new, &a_new, &psi_cand, x, s0, h)?;
        let psi_new = if j_psi <= j_a { psi_cand } else { psi.clone() };
        if [j_s, j_a, j_psi].iter().any(|v| !v.is_finite()) {
            return Err(UnmixError::Numeric(format!("objective became non-finite at outer iteration {outer}")));
        }
        objective = j_psi.min(j_a);

        residual_s = relative_change(s_new.frames(), s.frames())?;
        residual_a = relative_change(a_new.frames(), a.frames())?;
        converged = accepted_s && accepted_a && residual_s < h.eps_s && residual_a < h.eps_a;
        trace.push(objective);
        if cfg.record_trace {
            steps.push(OuterStep {
                objective,
                residual_s,
                residual_a,
                inner_iterations_s: s_st.iterations.iter().copied().max().unwrap_or(0),
                inner_iterations_a: a_st.iterations,
                inner_converged: s_st.converged && a_st.converged,
                accepted_s,
                accepted_a,
            });
        }
        s_state = s_st;
        a_state = a_st;
        s = s_new;
        a = a_new;
        psi = psi_new;
        if converged {
            break;
        }
    }

    Ok(UnmixResult {
        s,
        a,
        psi,
        objective_trace: trace,
        outer_iterations: outer,
        converged,
        residual_s,
        residual_a,
        steps,
    })
}

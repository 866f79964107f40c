//! Abundance subproblem solved by ADMM with two splits: `A_k = Q_k` carries
//! nonnegativity and `A_k - A_{k-1} = D_k` carries the temporal l1 penalty.
//!
//! The `A` update minimizes the augmented Lagrangian over all frames at once.
//! For one pixel the unknowns of consecutive frames are coupled by a
//! block-tridiagonal matrix that is the same for every pixel, so a single
//! `KP x KP` factorization serves all columns. [`a_step`] is the per-frame
//! closed form with both neighbours held fixed.

use nalgebra::{Cholesky, Dyn};

use crate::admm_endmember::project_nonnegative;
use crate::error::{dim_err, Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix};
use crate::objective::Hyperparams;
use crate::par;

/// `sign(t) max(|t| - tau, 0)`.
pub fn soft_threshold(t: f64, tau: f64) -> f64 {
    if t > tau {
        t - tau
    } else if t < -tau {
        t + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &Matrix, tau: f64) -> Matrix {
    m.map(|v| soft_threshold(v, tau))
}

/// Iterates of the abundance ADMM. `d[j]` and `z[j]` belong to the
/// difference between frames `j + 1` and `j` (zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceAdmmState {
    pub a: Vec<Matrix>,
    /// Nonnegative split variables; these are the reported abundances.
    pub q: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub w: Vec<Matrix>,
    pub z: Vec<Matrix>,
    pub primal_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl AbundanceAdmmState {
    /// Starts at the given abundances: `Q = A`, `D = A_k - A_{k-1}`, zero multipliers.
    pub fn from_abundances(a: &AbundanceTrajectory) -> Self {
        let frames = a.frames();
        let zero = Matrix::zeros(frames[0].nrows(), frames[0].ncols());
        Self {
            a: frames.to_vec(),
            q: frames.to_vec(),
            d: frames.windows(2).map(|w| &w[1] - &w[0]).collect(),
            w: vec![zero.clone(); frames.len()],
            z: vec![zero; frames.len() - 1],
            primal_res: 0.0,
            dual_res: 0.0,
            iterations: 0,
            converged: false,
        }
    }

    fn zeros(frames: usize, sources: usize, pixels: usize) -> Self {
        let a = AbundanceTrajectory::from_frames_unchecked(vec![Matrix::zeros(sources, pixels); frames]);
        Self::from_abundances(&a)
    }

    fn check(&self, frames: usize, sources: usize, pixels: usize) -> Result<()> {
        let ok = |v: &[Matrix], len: usize| v.len() == len && v.iter().all(|m| m.shape() == (sources, pixels));
        if ok(&self.a, frames) && ok(&self.q, frames) && ok(&self.w, frames) && ok(&self.d, frames - 1) && ok(&self.z, frames - 1) {
            Ok(())
        } else {
            Err(dim_err(format!("abundance warm start does not match {frames} frames of {sources}x{pixels}")))
        }
    }
}

/// Per-frame linear system `(S_k^T S_k + c rho I) A_k = S_k^T X_k + rho R_k`,
/// where `c` counts the constraints touching frame `k`.
struct FrameSystem {
    chol: Cholesky<f64, Dyn>,
    stx: Matrix,
}

impl FrameSystem {
    fn new(xk: &Matrix, sk: &Matrix, couplings: usize, rho: f64) -> Result<Self> {
        let mut gram = sk.transpose() * sk;
        for i in 0..gram.nrows() {
            gram[(i, i)] += couplings as f64 * rho;
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(UnmixError::Numeric("non-finite entry in the abundance system".into()));
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| UnmixError::Numeric("abundance Gram matrix is not positive definite".into()))?;
        Ok(Self { chol, stx: sk.transpose() * xk })
    }
}

fn couplings(k: usize, frames: usize) -> usize {
    1 + usize::from(k > 0) + usize::from(k + 1 < frames)
}

/// `R_k`: the split, neighbour, and multiplier terms of the frame-`k` update.
fn coupling_rhs(k: usize, state: &AbundanceAdmmState) -> Matrix {
    let frames = state.a.len();
    let mut r = &state.q[k] - &state.w[k];
    if k > 0 {
        r += &state.a[k - 1];
        r += &state.d[k - 1];
        r -= &state.z[k - 1];
    }
    if k + 1 < frames {
        r += &state.a[k + 1];
        r -= &state.d[k];
        r += &state.z[k];
    }
    r
}

fn update_frame(system: &FrameSystem, k: usize, state: &AbundanceAdmmState, rho: f64) -> Matrix {
    let rhs = &system.stx + coupling_rhs(k, state) * rho;
    system.chol.solve(&rhs)
}

/// Cholesky factor of a symmetric positive definite band matrix with `bw`
/// nonzero sub-diagonals. Row `i` of `l` holds `L[i, i - bw..=i]`.
struct BandCholesky {
    l: Matrix,
    bw: usize,
}

impl BandCholesky {
    fn new(h: &Matrix, bw: usize) -> Option<Self> {
        let n = h.nrows();
        let mut l = Matrix::zeros(n, bw + 1);
        // Column `c` of `l` is the entry at distance `bw - c` left of the diagonal.
        let at = |i: usize, j: usize| bw + j - i;
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let mut sum = h[(i, j)];
                for k in i.saturating_sub(bw)..j {
                    sum -= l[(i, at(i, k))] * l[(j, at(j, k))];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    l[(i, bw)] = sum.sqrt();
                } else {
                    l[(i, at(i, j))] = sum / l[(j, bw)];
                }
            }
        }
        Some(Self { l, bw })
    }

    /// Solves in place, one right-hand side per column.
    fn solve_mut(&self, b: &mut Matrix) {
        let (n, bw, l) = (self.l.nrows(), self.bw, &self.l);
        for mut col in b.column_iter_mut() {
            for i in 0..n {
                let mut v = col[i];
                for k in i.saturating_sub(bw)..i {
                    v -= l[(i, bw + k - i)] * col[k];
                }
                col[i] = v / l[(i, bw)];
            }
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in i + 1..n.min(i + bw + 1) {
                    v -= l[(k, bw + i - k)] * col[k];
                }
                col[i] = v / l[(i, bw)];
            }
        }
    }
}

/// Stationarity of the augmented Lagrangian in all `A_k` jointly: frame blocks
/// `S_k^T S_k + c_k rho I` on the diagonal and `-rho I` between consecutive
/// frames, which gives a band matrix with `P` sub-diagonals.
struct TemporalSystem {
    chol: BandCholesky,
    /// `S_k^T X_k` stacked frame after frame.
    stx: Matrix,
    sources: usize,
}

/// Columns per parallel solve.
const COLUMN_CHUNK: usize = 64;

impl TemporalSystem {
    fn new(x: &FrameSequence, s: &EndmemberTrajectory, rho: f64) -> Result<Self> {
        let (frames, p, n) = (x.len(), s[0].ncols(), x.pixels());
        let mut h = Matrix::zeros(frames * p, frames * p);
        let mut stx = Matrix::zeros(frames * p, n);
        for k in 0..frames {
            let sk = &s[k];
            let mut block = sk.transpose() * sk;
            for i in 0..p {
                block[(i, i)] += couplings(k, frames) as f64 * rho;
            }
            h.view_mut((k * p, k * p), (p, p)).copy_from(&block);
            if k > 0 {
                for i in 0..p {
                    h[(k * p + i, (k - 1) * p + i)] = -rho;
                    h[((k - 1) * p + i, k * p + i)] = -rho;
                }
            }
            stx.view_mut((k * p, 0), (p, n)).copy_from(&(sk.transpose() * &x.frames()[k]));
        }
        if h.iter().chain(stx.iter()).any(|v| !v.is_finite()) {
            return Err(UnmixError::Numeric("non-finite entry in the abundance system".into()));
        }
        let chol = BandCholesky::new(&h, p)
            .ok_or_else(|| UnmixError::Numeric("abundance system is not positive definite".into()))?;
        Ok(Self { chol, stx, sources: p })
    }

    fn solve(&self, state: &AbundanceAdmmState, rho: f64) -> Vec<Matrix> {
        let (p, frames, n) = (self.sources, state.a.len(), self.stx.ncols());
        let mut rhs = self.stx.clone();
        for k in 0..frames {
            let mut r = &state.q[k] - &state.w[k];
            if k > 0 {
                r += &state.d[k - 1];
                r -= &state.z[k - 1];
            }
            if k + 1 < frames {
                r -= &state.d[k];
                r += &state.z[k];
            }
            let mut rows = rhs.view_mut((k * p, 0), (p, n));
            rows += r * rho;
        }
        let chunks = n.div_ceil(COLUMN_CHUNK);
        let solved = par::map_indexed(chunks, |c| {
            let start = c * COLUMN_CHUNK;
            let mut block = rhs.columns(start, COLUMN_CHUNK.min(n - start)).into_owned();
            self.chol.solve_mut(&mut block);
            block
        });
        let mut full = Matrix::zeros(frames * p, n);
        for (c, block) in solved.into_iter().enumerate() {
            full.columns_mut(c * COLUMN_CHUNK, block.ncols()).copy_from(&block);
        }
        (0..frames).map(|k| full.rows(k * p, p).into_owned()).collect()
    }
}

/// Closed-form update of `A_k` (zero-based `k`) with the neighbouring frames
/// taken from `state`.
pub fn a_step(k: usize, x: &FrameSequence, s: &EndmemberTrajectory, state: &AbundanceAdmmState, h: &Hyperparams) -> Result<Matrix> {
    let frames = x.len();
    if k >= frames {
        return Err(dim_err(format!("frame index {k} out of range for {frames} frames")));
    }
    if s.len() != frames || s[0].nrows() != x.channels() {
        return Err(dim_err("endmembers do not match the frame sequence"));
    }
    state.check(frames, s[0].ncols(), x.pixels())?;
    let system = FrameSystem::new(&x.frames()[k], &s[k], couplings(k, frames), h.rho)?;
    Ok(update_frame(&system, k, state, h.rho))
}

/// Solves `min_A sum_k 1/2||X_k - S_k A_k||^2 + lambda_A sum_k ||A_k - A_{k-1}||_1`
/// s.t. `A >= 0`, returning the projected `Q` iterates as the estimate.
pub fn solve_a(
    x: &FrameSequence,
    s: &EndmemberTrajectory,
    h: &Hyperparams,
    warm_start: Option<AbundanceAdmmState>,
) -> Result<(AbundanceTrajectory, AbundanceAdmmState)> {
    let frames = x.len();
    if s.len() != frames {
        return Err(dim_err(format!("{} endmember frames for {frames} data frames", s.len())));
    }
    let (l, n, p) = (x.channels(), x.pixels(), s[0].ncols());
    if s.frames().iter().any(|sk| sk.shape() != (l, p)) {
        return Err(dim_err(format!("endmember frames must all be {l}x{p}")));
    }
    h.validate(p)?;
    let mut state = warm_start.unwrap_or_else(|| AbundanceAdmmState::zeros(frames, p, n));
    state.check(frames, p, n)?;

    let system = TemporalSystem::new(x, s, h.rho)?;

    let rho = h.rho;
    let tau = h.lambda_a / rho;
    let n_a = (frames * p * n) as f64;
    let n_constraints = ((2 * frames - 1) * p * n) as f64;
    state.converged = false;

    for it in 1..=h.max_inner {
        let a_new = system.solve(&state, rho);

        let q_new = par::map_indexed(frames, |k| project_nonnegative(&(&a_new[k] + &state.w[k])));
        let diffs: Vec<Matrix> = par::map_indexed(frames - 1, |j| &a_new[j + 1] - &a_new[j]);
        let d_new = par::map_indexed(frames - 1, |j| soft_threshold_matrix(&(&diffs[j] + &state.z[j]), tau));

        // Residual pieces per frame, summed in index order below.
        let pieces = par::map_indexed(frames, |k| {
            let r_q = (&a_new[k] - &q_new[k]).norm_squared();
            let mut dual = &q_new[k] - &state.q[k];
            let mut mult = state.w[k].clone() + &a_new[k] - &q_new[k];
            let mut r_d = 0.0;
            let mut diff_norm = 0.0;
            let mut d_norm = 0.0;
            if k > 0 {
                let j = k - 1;
                let r = &diffs[j] - &d_new[j];
                r_d = r.norm_squared();
                diff_norm = diffs[j].norm_squared();
                d_norm = d_new[j].norm_squared();
                dual += &d_new[j] - &state.d[j];
                mult += &state.z[j] + r;
            }
            if k + 1 < frames {
                let j = k;
                dual -= &d_new[j] - &state.d[j];
                mult -= &state.z[j] + &diffs[j] - &d_new[j];
            }
            [
                r_q + r_d,
                dual.norm_squared(),
                a_new[k].norm_squared() + diff_norm,
                q_new[k].norm_squared() + d_norm,
                mult.norm_squared(),
            ]
        });
        let mut sums = [0.0; 5];
        for piece in &pieces {
            for (acc, v) in sums.iter_mut().zip(piece) {
                *acc += v;
            }
        }
        let [primal_sq, dual_sq, ax_sq, z_sq, mult_sq] = sums;

        par::for_each_indexed(&mut state.w, |k, w| *w += &a_new[k] - &q_new[k]);
        par::for_each_indexed(&mut state.z, |j, z| *z += &diffs[j] - &d_new[j]);
        state.a = a_new;
        state.q = q_new;
        state.d = d_new;

        state.primal_res = primal_sq.sqrt();
        state.dual_res = rho * dual_sq.sqrt();
        state.iterations = it;
        let eps_pri = n_constraints.sqrt() * h.admm_eps_abs + h.admm_eps_rel * ax_sq.sqrt().max(z_sq.sqrt());
        let eps_dual = n_a.sqrt() * h.admm_eps_abs + h.admm_eps_rel * rho * mult_sq.sqrt();
        if state.primal_res <= eps_pri && state.dual_res <= eps_dual {
            state.converged = true;
            break;
        }
    }
    Ok((AbundanceTrajectory::from_frames_unchecked(state.q.clone()), state))
}

//! Frame-by-frame baseline: successive-projection endmember extraction,
//! nonnegative least-squares abundances, and permutation alignment by
//! spectral angle.

use itertools::Itertools;
use nalgebra::SymmetricEigen;

use crate::admm_abundance::solve_a;
use crate::error::{dim_err, Result, UnmixError};
use crate::metrics::spectral_angle;
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix, ReferenceSpectra};
use crate::objective::{data_fit, Hyperparams};
use crate::par;
use crate::solver::{update_psi, UnmixResult};

/// Relative residual norm below which a selection step counts as degenerate.
const DEGENERACY_TOL: f64 = 1e-10;

/// Extracts `sources` pixel spectra at the vertices of the data simplex.
///
/// The frame is projected on the top eigenvectors of its second-moment matrix
/// `X X^T / N`; then, one vertex at a time, the pixel with the largest
/// component orthogonal to the span of the already selected pixels is kept
/// (lowest pixel index on ties). The original, unprojected spectra of the
/// selected pixels are returned, clamped at zero.
pub fn vca_extract(xk: &Matrix, sources: usize) -> Result<Matrix> {
    let (channels, pixels) = xk.shape();
    if sources == 0 || pixels < sources || channels < sources {
        return Err(dim_err(format!("cannot extract {sources} endmembers from a {channels}x{pixels} frame")));
    }
    let second_moment = (xk * xk.transpose()) / pixels as f64;
    let eig = SymmetricEigen::new(second_moment);
    let order: Vec<usize> = (0..channels)
        .sorted_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)))
        .take(sources)
        .collect();
    let basis = Matrix::from_fn(channels, sources, |l, p| eig.eigenvectors[(l, order[p])]);
    let mut residual = basis.transpose() * xk;

    let initial_max = residual.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if initial_max == 0.0 {
        return Err(UnmixError::Degenerate { step: "projection".into(), detail: "all pixels are zero".into() });
    }
    let mut selected = Vec::with_capacity(sources);
    for step in 0..sources {
        let mut best = (0, f64::NEG_INFINITY);
        for (n, c) in residual.column_iter().enumerate() {
            let v = c.norm_squared();
            if v > best.1 {
                best = (n, v);
            }
        }
        let norm = best.1.sqrt();
        if norm <= DEGENERACY_TOL * initial_max {
            return Err(UnmixError::Degenerate {
                step: format!("vertex selection {}", step + 1),
                detail: format!("largest orthogonal component {norm:e} vanishes; data span fewer than {sources} vertices"),
            });
        }
        let e = residual.column(best.0) / norm;
        let proj = e.transpose() * &residual;
        residual -= &e * proj;
        selected.push(best.0);
    }
    Ok(Matrix::from_fn(channels, sources, |l, p| xk[(l, selected[p])].max(0.0)))
}

/// Per-frame permutations: `frames[k][i]` is the reference index matched to
/// estimated source `i` at frame `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    pub frames: Vec<Vec<usize>>,
}

/// Matching of estimated to reference columns with the smallest total spectral angle.
pub fn align_permutation(s_est: &Matrix, s_ref: &Matrix) -> Result<Vec<usize>> {
    if s_est.shape() != s_ref.shape() {
        return Err(dim_err(format!("estimate is {:?}, reference is {:?}", s_est.shape(), s_ref.shape())));
    }
    let p = s_est.ncols();
    let mut angles = vec![vec![0.0; p]; p];
    for (i, row) in angles.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = spectral_angle(s_est.column(i).as_slice(), s_ref.column(j).as_slice())?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..p).permutations(p) {
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| angles[i][j]).sum();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, perm));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

/// Reorders columns of `s` and rows of `a` so that estimate `i` lands at `perm[i]`.
pub fn apply_permutation(s: &Matrix, a: &Matrix, perm: &[usize]) -> (Matrix, Matrix) {
    let mut s_out = s.clone();
    let mut a_out = a.clone();
    for (i, &j) in perm.iter().enumerate() {
        s_out.set_column(j, &s.column(i));
        a_out.set_row(j, &a.row(i));
    }
    (s_out, a_out)
}

/// NNLS settings used by the baseline when none are given.
pub fn default_nnls() -> Hyperparams {
    Hyperparams { lambda_a: 0.0, max_inner: 5000, admm_eps_abs: 1e-8, admm_eps_rel: 1e-6, ..Hyperparams::default() }
}

/// Separate unmixing with [`default_nnls`] settings.
pub fn separate_unmix(x: &FrameSequence, sources: usize, s_ref: &ReferenceSpectra) -> Result<(UnmixResult, PermutationMap)> {
    separate_unmix_with(x, sources, s_ref, &default_nnls())
}

/// Unmixes every frame on its own, then aligns sources to `s_ref`.
///
/// Scale factors are read off the aligned spectra against `s_ref`. The
/// objective trace holds a single entry: the total data-fit term.
pub fn separate_unmix_with(
    x: &FrameSequence,
    sources: usize,
    s_ref: &ReferenceSpectra,
    nnls: &Hyperparams,
) -> Result<(UnmixResult, PermutationMap)> {
    if s_ref.sources() != sources || s_ref.channels() != x.channels() {
        return Err(dim_err(format!(
            "reference spectra are {}x{}, expected {}x{sources}",
            s_ref.channels(),
            s_ref.sources(),
            x.channels()
        )));
    }
    let h = Hyperparams { lambda_a: 0.0, ..nnls.clone() };
    let per_frame = par::map_indexed(x.len(), |k| -> Result<(Matrix, Matrix, Vec<usize>, bool)> {
        let xk = &x.frames()[k];
        let endmembers = vca_extract(xk, sources)?;
        let single = FrameSequence::new(vec![xk.clone()])?;
        let s_traj = EndmemberTrajectory::from_frames_unchecked(vec![endmembers.clone()]);
        let (abund, state) = solve_a(&single, &s_traj, &h, None)?;
        let perm = align_permutation(&endmembers, s_ref.matrix())?;
        let (s_al, a_al) = apply_permutation(&endmembers, &abund[0], &perm);
        Ok((s_al, a_al, perm, state.converged))
    });

    let mut s = Vec::with_capacity(x.len());
    let mut a = Vec::with_capacity(x.len());
    let mut perms = Vec::with_capacity(x.len());
    let mut converged = true;
    for frame in per_frame {
        let (sk, ak, perm, ok) = frame?;
        s.push(sk);
        a.push(ak);
        perms.push(perm);
        converged &= ok;
    }
    let fit = data_fit(x, &s, &a);
    let s = EndmemberTrajectory::from_frames_unchecked(s);
    let a = AbundanceTrajectory::from_frames_unchecked(a);
    let psi = update_psi(&s, s_ref)?;
    let result = UnmixResult {
        s,
        a,
        psi,
        objective_trace: vec![fit],
        outer_iterations: 0,
        converged,
        residual_s: 0.0,
        residual_a: 0.0,
        steps: Vec::new(),
    };
    Ok((result, PermutationMap { frames: perms }))
}

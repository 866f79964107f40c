//! Reference solvers and random instances shared by the integration tests.
//!
//! The oracles below only use plain projected-gradient steps and share no code
//! with the ADMM solvers they check.
#![allow(dead_code)]

use hsunmix::{
    AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Matrix, ReferenceSpectra, ScaleSeries, SpectralWeight,
};
use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Draw(ChaCha8Rng);

impl Draw {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }
}

/// A small random joint problem with nonnegative ingredients.
pub struct Instance {
    pub x: FrameSequence,
    pub s: EndmemberTrajectory,
    pub a: AbundanceTrajectory,
    pub psi: ScaleSeries,
    pub s0: ReferenceSpectra,
    pub lambda_s: Vec<f64>,
    pub lambda_a: f64,
}

pub fn instance(seed: u64, k: usize, l: usize, n: usize, p: usize) -> Instance {
    let mut d = Draw::new(seed);
    let s0 = d.matrix(l, p, 0.1, 1.0);
    let psi = d.matrix(k, p, 0.6, 1.4);
    let s: Vec<Matrix> = (0..k)
        .map(|f| {
            let mut sk = s0.clone();
            for c in 0..p {
                sk.column_mut(c).scale_mut(psi[(f, c)]);
            }
            sk + d.matrix(l, p, -0.05, 0.05)
        })
        .map(|m| m.map(|v| v.max(0.0)))
        .collect();
    let mut a = vec![d.matrix(p, n, 0.0, 1.0)];
    for f in 1..k {
        let jumps = Matrix::from_fn(p, n, |_, _| if d.uniform(0.0, 1.0) < 0.2 { d.uniform(-0.3, 0.3) } else { 0.0 });
        let next = (&a[f - 1] + jumps).map(|v| v.max(0.0));
        a.push(next);
    }
    let x: Vec<Matrix> = (0..k).map(|f| &s[f] * &a[f] + d.matrix(l, n, -0.05, 0.05)).collect();
    let lambda_s = (0..p).map(|_| d.uniform(0.1, 2.0)).collect();
    let lambda_a = d.uniform(0.05, 0.5);
    Instance {
        x: FrameSequence::new(x).unwrap(),
        s: EndmemberTrajectory::new(s).unwrap(),
        a: AbundanceTrajectory::new(a).unwrap(),
        psi: ScaleSeries::new(psi).unwrap(),
        s0: ReferenceSpectra::new(s0).unwrap(),
        lambda_s,
        lambda_a,
    }
}

impl Instance {
    pub fn weight(&self) -> SpectralWeight {
        SpectralWeight::PerSource(self.lambda_s.clone())
    }
}

fn largest_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.max()
}

/// `S_0 diag(psi_k)` without going through the library.
pub fn nominal(s0: &Matrix, psi: &Matrix, k: usize) -> Matrix {
    Matrix::from_fn(s0.nrows(), s0.ncols(), |i, j| s0[(i, j)] * psi[(k, j)])
}

/// `1/2 ||X - S A||^2 + sum_p w_p/2 ||s_p - n_p||^2` for one frame.
pub fn s_frame_objective(xk: &Matrix, sk: &Matrix, ak: &Matrix, nk: &Matrix, w: &[f64]) -> f64 {
    let fit = 0.5 * (xk - sk * ak).norm_squared();
    let prior: f64 = (0..sk.ncols()).map(|p| 0.5 * w[p] * (sk.column(p) - nk.column(p)).norm_squared()).sum();
    fit + prior
}

pub fn s_objective(inst: &Instance, s: &[Matrix], a: &[Matrix]) -> f64 {
    (0..s.len())
        .map(|k| {
            let nk = nominal(inst.s0.matrix(), inst.psi.matrix(), k);
            s_frame_objective(&inst.x.frames()[k], &s[k], &a[k], &nk, &inst.lambda_s)
        })
        .sum()
}

/// `1/2 sum ||X_k - S_k A_k||^2 + lambda sum |A_k - A_{k-1}|`.
pub fn a_objective(x: &[Matrix], s: &[Matrix], a: &[Matrix], lambda: f64) -> f64 {
    let fit: f64 = (0..x.len()).map(|k| 0.5 * (&x[k] - &s[k] * &a[k]).norm_squared()).sum();
    let tv: f64 = (1..a.len()).map(|k| (&a[k] - &a[k - 1]).abs().sum()).sum();
    fit + lambda * tv
}

fn projected_gradient_norm(z: &Matrix, g: &Matrix) -> f64 {
    z.zip_map(g, |zi, gi| zi - (zi - gi).max(0.0)).amax()
}

/// Accelerated projected gradient on one frame of the endmember subproblem.
pub fn s_oracle_frame(xk: &Matrix, ak: &Matrix, nk: &Matrix, w: &[f64], tol: f64) -> Matrix {
    let (l, p) = nk.shape();
    let gram = ak * ak.transpose();
    let wmax = w.iter().copied().fold(0.0, f64::max);
    let step = 1.0 / (largest_eigenvalue(&gram) + wmax);
    let xat = xk * ak.transpose();
    let grad = |s: &Matrix| {
        let mut g = s * &gram - &xat;
        for c in 0..p {
            for i in 0..l {
                g[(i, c)] += w[c] * (s[(i, c)] - nk[(i, c)]);
            }
        }
        g
    };
    let obj = |s: &Matrix| s_frame_objective(xk, s, ak, nk, w);
    let mut s = nk.map(|v| v.max(0.0));
    let mut y = s.clone();
    let mut t = 1.0f64;
    let mut f_prev = obj(&s);
    for _ in 0..2_000_000 {
        let s_next = (&y - grad(&y) * step).map(|v| v.max(0.0));
        let f_next = obj(&s_next);
        if f_next > f_prev && t > 1.0 {
            // Restart momentum; a plain step from the current point is always
            // taken since it can only fail to descend through rounding.
            y = s.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &s_next + (&s_next - &s) * ((t - 1.0) / t_next);
        s = s_next;
        t = t_next;
        f_prev = f_next;
        if projected_gradient_norm(&s, &grad(&s)) <= tol {
            break;
        }
    }
    s
}

pub fn s_oracle(inst: &Instance, a: &[Matrix], tol: f64) -> Vec<Matrix> {
    (0..inst.x.len())
        .map(|k| {
            let nk = nominal(inst.s0.matrix(), inst.psi.matrix(), k);
            s_oracle_frame(&inst.x.frames()[k], &a[k], &nk, &inst.lambda_s, tol)
        })
        .collect()
}

/// Accelerated projected gradient for `min 1/2 z^T H z + c^T z` over `z >= 0`,
/// stopped when the projected gradient is below `tol` in max norm.
pub fn box_qp(h: &Matrix, c: &DVector<f64>, start: DVector<f64>, tol: f64) -> DVector<f64> {
    let step = 1.0 / largest_eigenvalue(h).max(f64::MIN_POSITIVE);
    let obj = |z: &DVector<f64>| 0.5 * z.dot(&(h * z)) + c.dot(z);
    let grad = |z: &DVector<f64>| h * z + c;
    let mut z = start.map(|v| v.max(0.0));
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut f_prev = obj(&z);
    for _ in 0..5_000_000 {
        let g = grad(&z);
        if z.zip_map(&g, |zi, gi| zi - (zi - gi).max(0.0)).amax() <= tol {
            break;
        }
        let z_next = (&y - grad(&y) * step).map(|v| v.max(0.0));
        let f_next = obj(&z_next);
        if f_next > f_prev && t > 1.0 {
            // Restart momentum; a plain step from the current point is always
            // taken since it can only fail to descend through rounding.
            y = z.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &z_next + (&z_next - &z) * ((t - 1.0) / t_next);
        z = z_next;
        t = t_next;
        f_prev = f_next;
    }
    z
}

/// Abundance subproblem oracle. Pixels decouple, so each pixel is solved on
/// its own: the split `a_k - a_{k-1} = pos_k - neg_k` with `a, pos, neg >= 0`
/// turns the l1 term linear, and the equality is enforced by an augmented
/// Lagrangian whose inner problems go to [`box_qp`].
pub fn a_oracle(x: &[Matrix], s: &[Matrix], lambda: f64, tol: f64) -> Vec<Matrix> {
    let k = x.len();
    let (p, n) = (s[0].ncols(), x[0].ncols());
    let na = k * p;
    let nd = (k - 1) * p;
    let dim = na + 2 * nd;
    let mu = 2.0;

    // Data term and the constraint operator C z = D a - pos + neg.
    let mut fit = Matrix::zeros(dim, dim);
    for f in 0..k {
        fit.view_mut((f * p, f * p), (p, p)).copy_from(&(s[f].transpose() * &s[f]));
    }
    let mut cmat = Matrix::zeros(nd, dim);
    for j in 0..nd {
        cmat[(j, j + p)] = 1.0;
        cmat[(j, j)] = -1.0;
        cmat[(j, na + j)] = -1.0;
        cmat[(j, na + nd + j)] = 1.0;
    }
    let h = &fit + cmat.transpose() * &cmat * mu;

    let mut out = vec![Matrix::zeros(p, n); k];
    for col in 0..n {
        let mut lin = DVector::zeros(dim);
        for f in 0..k {
            lin.rows_mut(f * p, p).copy_from(&(-(s[f].transpose() * x[f].column(col))));
        }
        lin.rows_mut(na, 2 * nd).fill(lambda);
        let mut mult = DVector::<f64>::zeros(nd);
        let mut z = DVector::zeros(dim);
        for _ in 0..100_000 {
            let c = &lin + cmat.transpose() * &mult;
            z = box_qp(&h, &c, z, tol);
            let violation = &cmat * &z;
            mult += &violation * mu;
            if violation.amax() <= tol {
                break;
            }
        }
        for f in 0..k {
            out[f].set_column(col, &z.rows(f * p, p));
        }
    }
    out
}

/// The scalar two-frame fused problem `min 1/2(a1-y1)^2 + 1/2(a2-y2)^2 + lambda|a2-a1|`, `a >= 0`.
pub fn scalar_pair(y1: f64, y2: f64) -> (FrameSequence, EndmemberTrajectory) {
    let one = Matrix::from_element(1, 1, 1.0);
    (
        FrameSequence::new(vec![Matrix::from_element(1, 1, y1), Matrix::from_element(1, 1, y2)]).unwrap(),
        EndmemberTrajectory::new(vec![one.clone(), one]).unwrap(),
    )
}

pub fn rel_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(f64::MIN_POSITIVE)
}

//! Scaled mean square errors and spectral angles.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, Matrix, ScaleSeries};

/// `sum_k ||est_k - truth_k||_F^2 / sum_k ||truth_k||_F^2`.
pub fn scaled_mse(est: &[Matrix], truth: &[Matrix]) -> Result<f64> {
    if est.len() != truth.len() || est.iter().zip(truth).any(|(e, t)| e.shape() != t.shape()) {
        return Err(dim_err("estimate and truth have different shapes"));
    }
    let den: f64 = truth.iter().map(|t| t.norm_squared()).sum();
    if !(den > 0.0) {
        return Err(UnmixError::Domain("scaled MSE against an all-zero truth".into()));
    }
    let num: f64 = est.iter().zip(truth).map(|(e, t)| (e - t).norm_squared()).sum();
    Ok(num / den)
}

/// Angle in radians between two spectra, `acos(<u, v> / (|u| |v|))`.
///
/// Evaluated as `2 atan2(|u' - v'|, |u' + v'|)` on the unit vectors, which
/// stays accurate near 0 and pi where `acos` loses half the digits.
pub fn spectral_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(dim_err(format!("spectra of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(UnmixError::Domain("spectral angle of a zero vector".into()));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a / nu, b / nv);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).clamp(0.0, std::f64::consts::PI))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub e_s: f64,
    pub e_a: f64,
    pub e_psi: f64,
    pub e_s_per_frame: Vec<f64>,
    pub e_a_per_frame: Vec<f64>,
    /// `angles[p][k]`: angle between estimated and true spectrum `p` at frame `k`.
    pub spectral_angles: Vec<Vec<f64>>,
}

pub fn evaluate(
    s_est: &EndmemberTrajectory,
    a_est: &AbundanceTrajectory,
    psi_est: &ScaleSeries,
    s_true: &EndmemberTrajectory,
    a_true: &AbundanceTrajectory,
    psi_true: &ScaleSeries,
) -> Result<EvalReport> {
    let per_frame = |est: &[Matrix], truth: &[Matrix]| -> Result<Vec<f64>> {
        est.iter()
            .zip(truth)
            .map(|(e, t)| scaled_mse(std::slice::from_ref(e), std::slice::from_ref(t)))
            .collect()
    };
    let e_s = scaled_mse(s_est.frames(), s_true.frames())?;
    let e_a = scaled_mse(a_est.frames(), a_true.frames())?;
    let e_psi = scaled_mse(std::slice::from_ref(psi_est.matrix()), std::slice::from_ref(psi_true.matrix()))?;
    let sources = s_true[0].ncols();
    let spectral_angles = (0..sources)
        .map(|p| {
            (0..s_true.len())
                .map(|k| {
                    let (e, t) = (s_est[k].column(p), s_true[k].column(p));
                    spectral_angle(e.as_slice(), t.as_slice()).unwrap_or(std::f64::consts::FRAC_PI_2)
                })
                .collect()
        })
        .collect();
    Ok(EvalReport {
        e_s,
        e_a,
        e_psi,
        e_s_per_frame: per_frame(s_est.frames(), s_true.frames())?,
        e_a_per_frame: per_frame(a_est.frames(), a_true.frames())?,
        spectral_angles,
    })
}

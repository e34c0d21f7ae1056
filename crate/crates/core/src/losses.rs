//! Training objectives and their analytic gradients with respect to the
//! predicted fields.
//!
//! Every loss returns its value together with a gradient laid out exactly
//! like the prediction volume. Voxel reductions use a fixed pairwise order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::shape::dilate_with_argmax;
use crate::volume::Volume;

pub const DICE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub edge_k: usize,
    pub angle_eps_mm: f64,
    /// Average the displacement terms over the target brain mask instead of the whole crop.
    pub disp_in_mask: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.1, edge_k: 1, angle_eps_mm: 1e-3, disp_in_mask: false }
    }
}

impl LossWeights {
    pub fn validate(&self, errors: &mut Vec<String>) {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                errors.push(format!("loss.{name} must be a non-negative real, got {v}"));
            }
        }
        if !(self.angle_eps_mm > 0.0) {
            errors.push(format!("loss.angle_eps_mm must be positive, got {}", self.angle_eps_mm));
        }
    }

    pub fn any_active(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Per-term loss values for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub disp_mse: f64,
    pub theta: f64,
    pub phi: f64,
    pub mag: f64,
    pub dice: f64,
    pub edge: f64,
    pub sdf: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 8] = ["disp_mse", "theta", "phi", "mag", "dice", "edge", "sdf", "total"];

    pub fn values(&self) -> [f64; 8] {
        [self.disp_mse, self.theta, self.phi, self.mag, self.dice, self.edge, self.sdf, self.total]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct Term {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// The three spherical displacement terms.
#[derive(Clone, Debug)]
pub struct SphericalTerms {
    pub theta: Term,
    pub phi: Term,
    pub mag: Term,
}

/// Ground truth for one case.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub disp: &'a Volume,
    pub mask: &'a Volume,
    pub sdf: &'a Volume,
}

/// Predicted fields for one case.
#[derive(Clone, Copy, Debug)]
pub struct Predictions<'a> {
    pub disp: &'a Volume,
    pub mask: &'a Volume,
    pub sdf: &'a Volume,
}

/// Weighted gradients for each prediction head.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub disp: Vec<f64>,
    pub mask: Vec<f64>,
    pub sdf: Vec<f64>,
}

/// Sum in a fixed pairwise order, independent of how the inputs were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn check_pair(pred: &Volume, gt: &Volume, channels: usize, what: &str) -> Result<()> {
    pred.geometry().ensure_same(gt.geometry(), what)?;
    pred.ensure_channels(channels, what)?;
    gt.ensure_channels(channels, what)
}

/// Voxel weights (1 inside the averaging region) and the count N.
fn region_weights(region: Option<&Volume>, n: usize) -> (Vec<f64>, f64) {
    match region {
        None => (vec![1.0; n], n as f64),
        Some(r) => {
            let w: Vec<f64> = r.channel(0).iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
            let count = w.iter().sum::<f64>().max(1.0);
            (w, count)
        }
    }
}

/// Mean over voxels of the squared Euclidean norm of `pred - gt`.
pub fn loss_disp_mse(pred: &Volume, gt: &Volume) -> Result<Term> {
    loss_disp_mse_in(pred, gt, None)
}

pub fn loss_disp_mse_in(pred: &Volume, gt: &Volume, region: Option<&Volume>) -> Result<Term> {
    check_pair(pred, gt, 3, "displacement MSE")?;
    let n = pred.n_voxels();
    let (w, count) = region_weights(region, n);
    let (p, g) = (pred.data(), gt.data());
    let mut per = vec![0.0; n];
    let mut grad = vec![0.0; 3 * n];
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..3 {
            let d = p[c * n + i] - g[c * n + i];
            s += d * d;
            grad[c * n + i] = 2.0 * d * w[i] / count;
        }
        per[i] = s * w[i];
    }
    Ok(Term { value: pairwise_sum(&per) / count, grad })
}

/// Elevation `asin(z / max(|v|, eps))` in [-π/2, π/2] and its gradient.
pub fn elevation(v: [f64; 3], eps: f64) -> (f64, [f64; 3]) {
    let [x, y, z] = v;
    let r2 = x * x + y * y + z * z;
    let r = r2.sqrt();
    if r > eps {
        let theta = (z / r).clamp(-1.0, 1.0).asin();
        let rho = (x * x + y * y).sqrt();
        if rho == 0.0 {
            return (theta, [0.0; 3]);
        }
        (theta, [-z * x / (rho * r2), -z * y / (rho * r2), rho / r2])
    } else {
        let a = (z / eps).clamp(-1.0, 1.0);
        let denom = (eps * eps - z * z).sqrt();
        let dz = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        (a.asin(), [0.0, 0.0, dz])
    }
}

/// Azimuth `atan2(y, x)` in (-π, π] and its gradient.
pub fn azimuth(v: [f64; 3]) -> (f64, [f64; 3]) {
    let [x, y, _] = v;
    let rho2 = x * x + y * y;
    let phi = y.atan2(x);
    if rho2 == 0.0 {
        return (phi, [0.0; 3]);
    }
    (phi, [-y / rho2, x / rho2, 0.0])
}

/// `min(Δ², (2π - |Δ|)²)` and its derivative with respect to the predicted angle.
pub fn wrapped_sq_diff(phi_pred: f64, phi_gt: f64) -> (f64, f64) {
    let d = phi_pred - phi_gt;
    let direct = d * d;
    let w = 2.0 * PI - d.abs();
    let wrap = w * w;
    if direct <= wrap {
        (direct, 2.0 * d)
    } else {
        (wrap, -2.0 * w * d.signum())
    }
}

/// Elevation, azimuth and magnitude discrepancies. Voxels whose ground-truth
/// vector is shorter than `eps` contribute nothing to the two angular terms.
pub fn loss_disp_sph(pred: &Volume, gt: &Volume, eps: f64) -> Result<SphericalTerms> {
    loss_disp_sph_in(pred, gt, eps, None)
}

pub fn loss_disp_sph_in(pred: &Volume, gt: &Volume, eps: f64, region: Option<&Volume>) -> Result<SphericalTerms> {
    check_pair(pred, gt, 3, "spherical displacement loss")?;
    let n = pred.n_voxels();
    let (w, count) = region_weights(region, n);
    let mut per_t = vec![0.0; n];
    let mut per_p = vec![0.0; n];
    let mut per_m = vec![0.0; n];
    let mut g_t = vec![0.0; 3 * n];
    let mut g_p = vec![0.0; 3 * n];
    let mut g_m = vec![0.0; 3 * n];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let vp = pred.vector_at(i);
        let vg = gt.vector_at(i);
        let rp = (vp[0] * vp[0] + vp[1] * vp[1] + vp[2] * vp[2]).sqrt();
        let rg = (vg[0] * vg[0] + vg[1] * vg[1] + vg[2] * vg[2]).sqrt();

        let dm = rp - rg;
        per_m[i] = dm * dm;
        if rp > 0.0 {
            for c in 0..3 {
                g_m[c * n + i] = 2.0 * dm * vp[c] / rp / count;
            }
        }

        if rg < eps {
            continue;
        }
        let (tp, dtp) = elevation(vp, eps);
        let (tg, _) = elevation(vg, eps);
        let dt = tp - tg;
        per_t[i] = dt * dt;
        for c in 0..3 {
            g_t[c * n + i] = 2.0 * dt * dtp[c] / count;
        }

        let (pp, dpp) = azimuth(vp);
        let (pg, _) = azimuth(vg);
        let (val, dval) = wrapped_sq_diff(pp, pg);
        per_p[i] = val;
        for c in 0..3 {
            g_p[c * n + i] = dval * dpp[c] / count;
        }
    }
    Ok(SphericalTerms {
        theta: Term { value: pairwise_sum(&per_t) / count, grad: g_t },
        phi: Term { value: pairwise_sum(&per_p) / count, grad: g_p },
        mag: Term { value: pairwise_sum(&per_m) / count, grad: g_m },
    })
}

/// Soft Dice loss `1 - 2Σpg / (Σp² + Σg² + ε)`.
pub fn loss_dice(pred: &Volume, gt: &Volume) -> Result<Term> {
    check_pair(pred, gt, 1, "Dice loss")?;
    let (p, g) = (pred.data(), gt.data());
    let pg: Vec<f64> = p.iter().zip(g).map(|(a, b)| a * b).collect();
    let pp: Vec<f64> = p.iter().map(|a| a * a).collect();
    let gg: Vec<f64> = g.iter().map(|a| a * a).collect();
    let inter = pairwise_sum(&pg);
    let den = pairwise_sum(&pp) + pairwise_sum(&gg) + DICE_EPS;
    let value = 1.0 - 2.0 * inter / den;
    let grad = p.iter().zip(g).map(|(&pi, &gi)| -2.0 * gi / den + 4.0 * inter * pi / (den * den)).collect();
    Ok(Term { value, grad })
}

/// Mean absolute difference of the k-dilated masks. The gradient flows to
/// the voxel that attains each windowed max.
pub fn loss_edge(pred: &Volume, gt: &Volume, k: usize) -> Result<Term> {
    check_pair(pred, gt, 1, "edge loss")?;
    let n = pred.n_voxels();
    let dims = pred.dims();
    let (dp, arg) = dilate_with_argmax(pred.data(), dims, k);
    let (dg, _) = dilate_with_argmax(gt.data(), dims, k);
    let per: Vec<f64> = dp.iter().zip(&dg).map(|(a, b)| (a - b).abs()).collect();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let diff = dp[i] - dg[i];
        if diff != 0.0 {
            grad[arg[i]] += diff.signum() / n as f64;
        }
    }
    Ok(Term { value: pairwise_sum(&per) / n as f64, grad })
}

/// Mean squared difference of signed distance maps.
pub fn loss_sdf(pred: &Volume, gt: &Volume) -> Result<Term> {
    check_pair(pred, gt, 1, "SDF loss")?;
    let n = pred.n_voxels() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
    Ok(Term { value: pairwise_sum(&sq) / n, grad: diff.iter().map(|d| 2.0 * d / n).collect() })
}

/// `α(mse + θ + φ + mag) + γ·sdf + β(dice + edge)` with per-head gradients.
pub fn total_loss(pred: Predictions<'_>, target: Targets<'_>, w: &LossWeights) -> Result<(LossReport, LossGrads)> {
    let region = if w.disp_in_mask { Some(target.mask) } else { None };
    let mse = loss_disp_mse_in(pred.disp, target.disp, region)?;
    let sph = loss_disp_sph_in(pred.disp, target.disp, w.angle_eps_mm, region)?;
    let dice = loss_dice(pred.mask, target.mask)?;
    let edge = loss_edge(pred.mask, target.mask, w.edge_k)?;
    let sdf = loss_sdf(pred.sdf, target.sdf)?;

    let disp_sum = mse.value + sph.theta.value + sph.phi.value + sph.mag.value;
    let mask_sum = dice.value + edge.value;
    let report = LossReport {
        disp_mse: mse.value,
        theta: sph.theta.value,
        phi: sph.phi.value,
        mag: sph.mag.value,
        dice: dice.value,
        edge: edge.value,
        sdf: sdf.value,
        total: w.alpha * disp_sum + w.gamma * sdf.value + w.beta * mask_sum,
    };
    let disp = (0..mse.grad.len())
        .map(|i| w.alpha * (mse.grad[i] + sph.theta.grad[i] + sph.phi.grad[i] + sph.mag.grad[i]))
        .collect();
    let mask = dice.grad.iter().zip(&edge.grad).map(|(a, b)| w.beta * (a + b)).collect();
    let sdf_grad = sdf.grad.iter().map(|g| w.gamma * g).collect();
    Ok((report, LossGrads { disp, mask, sdf: sdf_grad }))
}

//! Central finite-difference checks of the analytic gradients, for the
//! losses and for the whole network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::Result;
use crate::losses::{
    loss_dice, loss_disp_mse, loss_disp_sph, loss_edge, loss_sdf, total_loss, LossGrads, LossWeights, Predictions, Targets, Term,
};
use crate::network::{backward, forward, NetParams};
use crate::volume::{Geometry, Volume};

/// Denominator floor: components whose analytic and numeric values are both
/// below it are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub seed: u64,
    pub checked: usize,
    /// Samples discarded because the perturbation crossed a non-smooth point.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<12} seed {:<4} checked {:<4} skipped {:<3} max rel err {:.3e} (tol {:.0e}) {}",
            self.suite,
            self.seed,
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const LOSS_STEP: f64 = 1e-6;
pub const NETWORK_STEP: f64 = 1e-4;

/// Random vectors with norm in [0.5, 2] and horizontal component ≥ 0.3, so
/// the angular terms stay away from their singular sets.
fn random_vector(rng: &mut impl Rng) -> [f64; 3] {
    let rho = rng.gen_range(0.3..1.5);
    let phi = rng.gen_range(-PI..PI);
    let z = rng.gen_range(-1.2..1.2);
    [rho * phi.cos(), rho * phi.sin(), z]
}

fn azimuth_gap_ok(a: [f64; 3], b: [f64; 3]) -> bool {
    let d = (a[1].atan2(a[0]) - b[1].atan2(b[0])).abs();
    (d - PI).abs() > 0.1
}

struct LossFixture {
    pred_disp: Volume,
    gt_disp: Volume,
    pred_mask: Volume,
    gt_mask: Volume,
    pred_sdf: Volume,
    gt_sdf: Volume,
}

fn loss_fixture(seed: u64) -> LossFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::centered([4, 4, 4], [1.0; 3]).expect("valid");
    let n = g.n_voxels();
    let mut pd = vec![0.0; 3 * n];
    let mut gd = vec![0.0; 3 * n];
    for i in 0..n {
        let (a, b) = loop {
            let a = random_vector(&mut rng);
            let b = random_vector(&mut rng);
            if azimuth_gap_ok(a, b) {
                break (a, b);
            }
        };
        for c in 0..3 {
            pd[c * n + i] = a[c];
            gd[c * n + i] = b[c];
        }
    }
    // distinct, well separated soft values keep the dilation winners stable
    let mut levels: Vec<f64> = (0..n).map(|k| 0.1 + 0.8 * k as f64 / (n - 1) as f64).collect();
    levels.shuffle(&mut rng);
    let gm: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let ps: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let gs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let vol = |c, d| Volume::new(g.clone(), c, d).expect("sized");
    LossFixture {
        pred_disp: vol(3, pd),
        gt_disp: vol(3, gd),
        pred_mask: vol(1, levels),
        gt_mask: vol(1, gm),
        pred_sdf: vol(1, ps),
        gt_sdf: vol(1, gs),
    }
}

/// Checks every component of `f`'s gradient with respect to `x`.
fn check_all(x: &Volume, f: &dyn Fn(&Volume) -> Result<Term>) -> Result<(usize, f64)> {
    let analytic = f(x)?.grad;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + LOSS_STEP;
        let up = f(&probe)?.value;
        probe.data_mut()[i] = orig - LOSS_STEP;
        let down = f(&probe)?.value;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * LOSS_STEP)));
    }
    Ok((x.data().len(), worst))
}

/// Every loss term and the weighted total, one seed.
pub fn check_losses(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = loss_fixture(seed);
    let eps = LossWeights::default().angle_eps_mm;
    let mut out = Vec::new();
    let mut push = |suite: &str, (checked, max): (usize, f64)| {
        out.push(CheckResult { suite: suite.into(), seed, checked, skipped: 0, max_rel_err: max, tolerance: LOSS_TOLERANCE });
    };
    push("disp_mse", check_all(&fx.pred_disp, &|p| loss_disp_mse(p, &fx.gt_disp))?);
    push("theta", check_all(&fx.pred_disp, &|p| Ok(loss_disp_sph(p, &fx.gt_disp, eps)?.theta))?);
    push("phi", check_all(&fx.pred_disp, &|p| Ok(loss_disp_sph(p, &fx.gt_disp, eps)?.phi))?);
    push("mag", check_all(&fx.pred_disp, &|p| Ok(loss_disp_sph(p, &fx.gt_disp, eps)?.mag))?);
    push("dice", check_all(&fx.pred_mask, &|p| loss_dice(p, &fx.gt_mask))?);
    push("edge", check_all(&fx.pred_mask, &|p| loss_edge(p, &fx.gt_mask, 1))?);
    push("sdf", check_all(&fx.pred_sdf, &|p| loss_sdf(p, &fx.gt_sdf))?);

    let w = LossWeights::default();
    let targets = Targets { disp: &fx.gt_disp, mask: &fx.gt_mask, sdf: &fx.gt_sdf };
    let total = |d: &Volume, m: &Volume, s: &Volume| -> Result<(f64, LossGrads)> {
        let (r, g) = total_loss(Predictions { disp: d, mask: m, sdf: s }, targets, &w)?;
        Ok((r.total, g))
    };
    let (_, grads) = total(&fx.pred_disp, &fx.pred_mask, &fx.pred_sdf)?;
    let d = check_all(&fx.pred_disp, &|p| {
        Ok(Term { value: total(p, &fx.pred_mask, &fx.pred_sdf)?.0, grad: grads.disp.clone() })
    })?;
    let m = check_all(&fx.pred_mask, &|p| Ok(Term { value: total(&fx.pred_disp, p, &fx.pred_sdf)?.0, grad: grads.mask.clone() }))?;
    let s = check_all(&fx.pred_sdf, &|p| Ok(Term { value: total(&fx.pred_disp, &fx.pred_mask, p)?.0, grad: grads.sdf.clone() }))?;
    push("total", (d.0 + m.0 + s.0, d.1.max(m.1).max(s.1)));
    Ok(out)
}

/// Whole-network parameter gradients on a 4³ input under a random linear
/// functional of the three outputs. Parameters whose ±h perturbation changes
/// a ReLU sign or a pooling winner sit on a kink and are redrawn.
pub fn check_network(seed: u64, n_params: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E65_7477);
    let g = Geometry::centered([4, 4, 4], [1.0; 3]).expect("valid");
    let n = g.n_voxels();
    let pmri = Volume::from_fn(g.clone(), 1, |_, o| o[0] = rng.gen_range(-1.0..1.0));
    let half = Volume::from_fn(g.clone(), 1, |p, o| o[0] = if p[0] > 0.0 { 1.0 } else { 0.0 });
    let mut params = NetParams::init(seed);
    for t in params.tensors_mut() {
        if t.name.ends_with(".bias") {
            t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let r = LossGrads {
        disp: (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mask: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        sdf: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let functional = |p: &NetParams| -> Result<(f64, Vec<u64>)> {
        let (out, acts) = forward(&pmri, &half, p)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let v = dot(out.disp.data(), &r.disp) + dot(out.mask_prob.data(), &r.mask) + dot(out.sdf.data(), &r.sdf);
        Ok((v, acts.pattern()))
    };

    let (_, acts) = forward(&pmri, &half, &params)?;
    let base_pattern = acts.pattern();
    let analytic = backward(&acts, &params, &r)?;

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut tried = std::collections::HashSet::new();
    while checked < n_params && tried.len() < total {
        let flat = rng.gen_range(0..total);
        if !tried.insert(flat) {
            continue;
        }
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let orig = params.tensors()[t].data[i];
        params.tensors_mut()[t].data[i] = orig + NETWORK_STEP;
        let (up, pu) = functional(&params)?;
        params.tensors_mut()[t].data[i] = orig - NETWORK_STEP;
        let (down, pd) = functional(&params)?;
        params.tensors_mut()[t].data[i] = orig;
        if pu != base_pattern || pd != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * NETWORK_STEP);
        worst = worst.max(relative_error(analytic.tensors[t][i], numeric));
        checked += 1;
    }
    Ok(CheckResult { suite: "network".into(), seed, checked, skipped, max_rel_err: worst, tolerance: NETWORK_TOLERANCE })
}

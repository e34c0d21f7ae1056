use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, backward, forward, predict, NetOutput, NetParams, OptimState};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights, Predictions, Targets};
use crate::synth::Case;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 3e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossWeights { beta: 10.0, gamma: 0.02, ..LossWeights::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("train.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            errors.push(format!("train.eps must be positive, got {}", self.eps));
        }
        self.loss.validate(errors);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub case: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,case");
        for f in LossReport::FIELDS {
            s.push(',');
            s.push_str(f);
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{}", r.step, r.epoch, r.case).unwrap();
            for v in r.report.values() {
                write!(s, ",{v:e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.total).collect()
    }
}

/// Per-case (batch 1) training from a seeded initialization. Step numbers start at 1.
pub fn train(cases: &[Case], cfg: &TrainConfig) -> Result<(NetParams, TrainLog)> {
    train_from(NetParams::init(cfg.seed), cases, cfg)
}

pub fn train_from(mut params: NetParams, cases: &[Case], cfg: &TrainConfig) -> Result<(NetParams, TrainLog)> {
    let first = cases.first().ok_or_else(|| Error::Cohort("training needs at least one case".into()))?;
    if let Some(c) = cases.iter().find(|c| c.pmri.dims() != first.pmri.dims()) {
        return Err(Error::Cohort(format!("case seed {} has dims {:?}, expected {:?}", c.seed, c.pmri.dims(), first.pmri.dims())));
    }
    let mut state = OptimState::new(&params, cfg.lr);
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.eps = cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &ci in &order {
            step += 1;
            let case = &cases[ci];
            let (out, acts) = forward(&case.pmri, &case.half_mask, &params)?;
            let (report, grads) = total_loss(
                Predictions { disp: &out.disp, mask: &out.mask_prob, sdf: &out.sdf },
                Targets { disp: &case.gt_disp, mask: &case.gt_mask_intra, sdf: &case.gt_sdf },
                &cfg.loss,
            )?;
            if let Some(term) = report.non_finite_term() {
                return Err(Error::NonFiniteLoss { term, step });
            }
            let pg = backward(&acts, &params, &grads)?;
            adam_step(&mut params, &pg, &mut state);
            log.rows.push(LogRow { step, epoch, case: ci, report });
        }
    }
    Ok((params, log))
}

pub fn predict_case(params: &NetParams, case: &Case) -> Result<NetOutput> {
    predict(&case.pmri, &case.half_mask, params)
}

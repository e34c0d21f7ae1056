//! Landmark TRE, mask Dice, k-fold cross-validation and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::network::{predict_case, train, NetParams, TrainConfig};
use crate::pipeline::{standardize_case, PipelineConfig};
use crate::synth::{warp_landmarks, warp_mask, Case, Side};
use crate::volume::Volume;

/// Mask probabilities above this count as brain.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Landmark stems evaluated on the resection side, followed by the midline ones.
pub const IPSILATERAL_STEMS: [&str; 4] = ["P1", "P2", "P4", "P6"];
pub const MIDLINE_NAMES: [&str; 2] = ["P3", "P5"];

/// Assignment of cases to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Shuffles the case indices with `seed` and deals them round-robin, so
    /// fold sizes differ by at most one.
    pub fn new(n_cases: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(vec![format!("folds must be at least 2, got {k}")]));
        }
        if n_cases < k {
            return Err(Error::Config(vec![format!("{k} folds need at least {k} cases, got {n_cases}")]));
        }
        let mut order: Vec<usize> = (0..n_cases).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignments = vec![0; n_cases];
        for (pos, &case) in order.iter().enumerate() {
            assignments[case] = pos % k;
        }
        Ok(FoldPlan { k, assignments, seed })
    }

    pub fn test_cases(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_cases(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.assignments.iter().filter(|&&a| a == f).count()).collect()
    }
}

/// Euclidean distance per named landmark, in the order of `names`.
pub fn tre(pred: &LandmarkSet, gt: &LandmarkSet, names: &[String]) -> Result<Vec<(String, f64)>> {
    names
        .iter()
        .map(|name| {
            let a = pred.get(name).ok_or_else(|| Error::MissingLandmark(name.clone()))?;
            let b = gt.get(name).ok_or_else(|| Error::MissingLandmark(name.clone()))?;
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            Ok((name.clone(), d))
        })
        .collect()
}

/// Ipsilateral P1, P2, P4, P6 on `side` plus the midline P3 and P5.
pub fn select_eval_landmarks(side: Side) -> Vec<String> {
    IPSILATERAL_STEMS
        .iter()
        .map(|s| format!("{s}{}", side.suffix()))
        .chain(MIDLINE_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

/// Landmark name without its side suffix.
fn stem(name: &str) -> &str {
    name.strip_suffix('L').or_else(|| name.strip_suffix('R')).unwrap_or(name)
}

/// `2|A∩B| / (|A|+|B|)` over voxels above 0.5; two empty masks give 1.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "dice")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.channel(0).iter().zip(b.channel(0)) {
        let (x, y) = (x > MASK_THRESHOLD, y > MASK_THRESHOLD);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Predicted displacement and mask probability for one case.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub disp: Volume,
    pub mask_prob: Volume,
}

pub trait Predictor {
    fn predict(&self, case: &Case) -> Result<Prediction>;
}

impl Predictor for NetParams {
    fn predict(&self, case: &Case) -> Result<Prediction> {
        let out = predict_case(self, case)?;
        Ok(Prediction { disp: out.disp, mask_prob: out.mask_prob })
    }
}

/// Returns the ground-truth field and the preoperative mask warped by it.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict(&self, case: &Case) -> Result<Prediction> {
        Ok(Prediction { disp: case.gt_disp.clone(), mask_prob: warp_mask(&case.mask_pre, &case.gt_disp)? })
    }
}

/// Predicts no deformation and the preoperative mask.
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn predict(&self, case: &Case) -> Result<Prediction> {
        Ok(Prediction { disp: Volume::zeros(case.gt_disp.geometry().clone(), 3), mask_prob: case.mask_pre.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: usize,
    pub seed: u64,
    pub side: Side,
    pub fold: usize,
    pub dice_pred: f64,
    pub dice_base: f64,
    /// Landmark → TRE after applying the predicted field.
    pub tre_pred: BTreeMap<String, f64>,
    /// Landmark → TRE of the undeformed preoperative position.
    pub tre_base: BTreeMap<String, f64>,
}

impl CaseMetrics {
    pub fn mean_tre_pred(&self) -> f64 {
        mean(&self.tre_pred.values().copied().collect::<Vec<_>>())
    }

    pub fn mean_tre_base(&self) -> f64 {
        mean(&self.tre_base.values().copied().collect::<Vec<_>>())
    }
}

/// Metrics of one held-out case on its evaluation landmarks.
pub fn evaluate_case(case: &Case, pred: &Prediction, index: usize, fold: usize) -> Result<CaseMetrics> {
    let names = select_eval_landmarks(case.side);
    let moved = warp_landmarks(&case.landmarks_pre, &pred.disp)?;
    let collect = |v: Vec<(String, f64)>| v.into_iter().collect::<BTreeMap<_, _>>();
    Ok(CaseMetrics {
        case: index,
        seed: case.seed,
        side: case.side,
        fold,
        dice_pred: dice(&pred.mask_prob, &case.gt_mask_intra)?,
        dice_base: dice(&case.mask_pre, &case.gt_mask_intra)?,
        tre_pred: collect(tre(&moved, &case.landmarks_intra, &names)?),
        tre_base: collect(tre(&case.landmarks_pre, &case.landmarks_intra, &names)?),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let m = mean(xs);
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        MeanStd { mean: m, std: var.sqrt(), n: xs.len() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dice_pred: f64,
    pub dice_base: f64,
    pub tre_pred: f64,
    pub tre_base: f64,
}

/// One row of the landmark table: a landmark on one resection side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRow {
    pub side: Side,
    pub landmark: String,
    pub base: MeanStd,
    pub pred: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub landmarks: Vec<LandmarkRow>,
    /// Across-fold aggregates of the per-fold means.
    pub dice_pred: MeanStd,
    pub dice_base: MeanStd,
    pub tre_pred: MeanStd,
    pub tre_base: MeanStd,
    pub folds: Vec<FoldSummary>,
    pub cases: Vec<CaseMetrics>,
}

impl EvalReport {
    /// Aggregates per-case metrics. Fold and case order do not matter.
    pub fn from_cases(k: usize, mut cases: Vec<CaseMetrics>, n_train: &[usize]) -> Self {
        cases.sort_by_key(|c| c.case);
        let by_fold = |f: usize| cases.iter().filter(move |c| c.fold == f);
        let mut folds = Vec::new();
        for f in 0..k {
            let fc: Vec<&CaseMetrics> = by_fold(f).collect();
            if fc.is_empty() {
                continue;
            }
            let avg = |g: &dyn Fn(&CaseMetrics) -> f64| mean(&fc.iter().map(|c| g(c)).collect::<Vec<_>>());
            folds.push(FoldSummary {
                fold: f,
                n_train: n_train.get(f).copied().unwrap_or(0),
                n_test: fc.len(),
                dice_pred: avg(&|c| c.dice_pred),
                dice_base: avg(&|c| c.dice_base),
                tre_pred: avg(&|c| c.mean_tre_pred()),
                tre_base: avg(&|c| c.mean_tre_base()),
            });
        }
        let across = |g: &dyn Fn(&FoldSummary) -> f64| MeanStd::of(&folds.iter().map(|f| g(f)).collect::<Vec<_>>());

        let mut landmarks = Vec::new();
        for side in [Side::Left, Side::Right] {
            for name in select_eval_landmarks(side) {
                let mut base = Vec::new();
                let mut pred = Vec::new();
                for f in 0..k {
                    let fc: Vec<&CaseMetrics> = by_fold(f).filter(|c| c.side == side).collect();
                    if fc.is_empty() {
                        continue;
                    }
                    base.push(mean(&fc.iter().map(|c| c.tre_base[&name]).collect::<Vec<_>>()));
                    pred.push(mean(&fc.iter().map(|c| c.tre_pred[&name]).collect::<Vec<_>>()));
                }
                if !base.is_empty() {
                    landmarks.push(LandmarkRow { side, landmark: name, base: MeanStd::of(&base), pred: MeanStd::of(&pred) });
                }
            }
        }
        EvalReport {
            k,
            landmarks,
            dice_pred: across(&|f| f.dice_pred),
            dice_base: across(&|f| f.dice_base),
            tre_pred: across(&|f| f.tre_pred),
            tre_base: across(&|f| f.tre_base),
            folds,
            cases,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text tables: landmark TRE by resection side, then mask Dice.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "Target registration error (mm), mean ± std across {} folds", self.k).unwrap();
        writeln!(s, "{:<6} {:<9} {:>16} {:>16}", "side", "landmark", "preop -> intra", "predicted").unwrap();
        for r in &self.landmarks {
            let side = match r.side {
                Side::Left => "left",
                Side::Right => "right",
            };
            writeln!(s, "{:<6} {:<9} {:>16} {:>16}", side, r.landmark, r.base.to_string(), r.pred.to_string()).unwrap();
        }
        writeln!(s, "{:<6} {:<9} {:>16} {:>16}", "all", "mean", self.tre_base.to_string(), self.tre_pred.to_string()).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "Intraoperative brain mask Dice, mean ± std across folds").unwrap();
        writeln!(s, "{:<26} {:>12}", "preop mask vs intra", format!("{:.3} ± {:.3}", self.dice_base.mean, self.dice_base.std)).unwrap();
        writeln!(s, "{:<26} {:>12}", "predicted mask vs intra", format!("{:.3} ± {:.3}", self.dice_pred.mean, self.dice_pred.std)).unwrap();
        s
    }

    /// One row per held-out case; TRE columns use side-free landmark names.
    pub fn to_csv(&self) -> String {
        let stems: Vec<&str> = IPSILATERAL_STEMS.iter().chain(MIDLINE_NAMES.iter()).copied().collect();
        let mut s = String::from("case,seed,side,fold,dice_pred,dice_base,tre_pred_mean,tre_base_mean");
        for st in &stems {
            write!(s, ",tre_pred_{st},tre_base_{st}").unwrap();
        }
        s.push('\n');
        for c in &self.cases {
            let side = if c.side == Side::Left { "left" } else { "right" };
            write!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                c.case,
                c.seed,
                side,
                c.fold,
                c.dice_pred,
                c.dice_base,
                c.mean_tre_pred(),
                c.mean_tre_base()
            )
            .unwrap();
            for st in &stems {
                let find = |m: &BTreeMap<String, f64>| m.iter().find(|(k, _)| stem(k) == *st).map(|(_, v)| *v).unwrap_or(f64::NAN);
                write!(s, ",{:.6},{:.6}", find(&c.tre_pred), find(&c.tre_base)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Cross-validation with an arbitrary per-fold trainer. Cases must already be standardized.
pub fn crossval_with<P: Predictor>(
    cases: &[Case],
    plan: &FoldPlan,
    mut fit: impl FnMut(usize, &[Case]) -> Result<P>,
) -> Result<EvalReport> {
    if plan.assignments.len() != cases.len() {
        return Err(Error::Config(vec![format!("fold plan covers {} cases, cohort has {}", plan.assignments.len(), cases.len())]));
    }
    let mut metrics = Vec::with_capacity(cases.len());
    let mut n_train = vec![0; plan.k];
    for fold in 0..plan.k {
        let test = plan.test_cases(fold);
        if test.is_empty() {
            continue;
        }
        let train_idx = plan.train_cases(fold);
        if train_idx.is_empty() {
            return Err(Error::FoldWithoutTraining { fold });
        }
        n_train[fold] = train_idx.len();
        let train_set: Vec<Case> = train_idx.iter().map(|&i| cases[i].clone()).collect();
        let model = fit(fold, &train_set)?;
        for &i in &test {
            let pred = model.predict(&cases[i])?;
            metrics.push(evaluate_case(&cases[i], &pred, i, fold)?);
        }
    }
    Ok(EvalReport::from_cases(plan.k, metrics, &n_train))
}

/// Standardizes every case, then trains the network on each fold's complement.
pub fn crossval(cases: &[Case], plan: &FoldPlan, train_cfg: &TrainConfig, pipeline: &PipelineConfig) -> Result<EvalReport> {
    let prepared = cases.iter().map(|c| standardize_case(c, pipeline)).collect::<Result<Vec<_>>>()?;
    crossval_with(&prepared, plan, |_, train_set| train(train_set, train_cfg).map(|(p, _)| p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_cohort, PhantomParams};
    use crate::volume::Geometry;

    #[test]
    fn fold_plan_partitions() {
        for (n, k) in [(27, 9), (10, 3), (5, 5)] {
            let p = FoldPlan::new(n, k, 4).unwrap();
            let sizes = p.fold_sizes();
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            assert_eq!(p, FoldPlan::new(n, k, 4).unwrap());
        }
        assert!(FoldPlan::new(3, 1, 0).is_err());
    }

    #[test]
    fn tre_cases() {
        let a = LandmarkSet::from_pairs([("P3", [1.0, 2.0, 3.0])]).unwrap();
        let b = LandmarkSet::from_pairs([("P3", [4.0, 6.0, 3.0])]).unwrap();
        let names = vec!["P3".to_string()];
        assert_eq!(tre(&a, &b, &names).unwrap()[0].1, 5.0);
        assert_eq!(tre(&a, &a, &names).unwrap()[0].1, 0.0);
        match tre(&a, &b, &["P5".to_string()]) {
            Err(Error::MissingLandmark(n)) => assert_eq!(n, "P5"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eval_landmark_sets() {
        let l = select_eval_landmarks(Side::Left);
        assert_eq!(l, ["P1L", "P2L", "P4L", "P6L", "P3", "P5"]);
        let r = select_eval_landmarks(Side::Right);
        assert_eq!(r.len(), 6);
        assert_eq!(l.iter().filter(|n| r.contains(n)).count(), 2);
    }

    #[test]
    fn dice_counts() {
        let g = Geometry::centered([10, 10, 2], [1.0; 3]).unwrap();
        let n = g.n_voxels();
        let a = Volume::new(g.clone(), 1, (0..n).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect()).unwrap();
        let b = Volume::new(g.clone(), 1, (0..n).map(|i| if (50..150).contains(&i) { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&b, &a).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let z = Volume::zeros(g, 1);
        assert_eq!(dice(&z, &z).unwrap(), 1.0);
        assert_eq!(dice(&z, &a).unwrap(), 0.0);
    }

    #[test]
    fn oracle_and_identity_predictors() {
        let p = PhantomParams { dims: [16, 16, 16], ..Default::default() };
        let cases = gen_cohort(3, 4, &p).unwrap();
        let plan = FoldPlan::new(4, 4, 0).unwrap();
        let report = crossval_with(&cases, &plan, |_, _| Ok(GroundTruthPredictor)).unwrap();
        assert_eq!(report.cases.len(), 4);
        for c in &report.cases {
            assert!(c.tre_pred.values().all(|&t| t < 1e-9));
            assert!(c.dice_pred >= c.dice_base);
        }
        let report = crossval_with(&cases, &plan, |_, _| Ok(IdentityPredictor)).unwrap();
        for c in &report.cases {
            assert_eq!(c.tre_pred, c.tre_base);
            assert_eq!(c.dice_pred, c.dice_base);
        }
        assert!(report.to_text().contains("predicted mask vs intra"));
        assert_eq!(report.to_csv().lines().count(), 5);
    }
}

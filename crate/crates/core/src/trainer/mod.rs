//! Set-prediction training of the tracker on synthetic scenes.

mod hungarian;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmot_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::model::{RmotModel, TrackerState};
use crate::scenegen::{valid_filters, ReferringQuery, SceneState};

pub use hungarian::{brute_force_assignment, hungarian, Assignment};

pub const MIN_TRAINING_SCENES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the first epoch.
    pub learning_rate: f64,
    /// Learning rate of the last epoch; the rate follows a cosine between.
    pub final_learning_rate: f64,
    pub box_weight: f64,
    pub refer_weight: f64,
    pub background_weight: f64,
    /// Cost reduction for keeping the previous frame's query/object pairs.
    pub continuity_bonus: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Draw a fresh referring query for every scene in every epoch.
    pub resample_queries: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 2e-3,
            final_learning_rate: 1e-5,
            box_weight: 5.0,
            refer_weight: 2.0,
            background_weight: 1.0,
            continuity_bonus: 10.0,
            optimizer: Optimizer::Adam,
            grad_clip: 1.0,
            resample_queries: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.box_weight, self.refer_weight, self.background_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CoreError::Config("training loss weights must be positive".into()));
        }
        let rates = [self.learning_rate, self.final_learning_rate];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if !(self.continuity_bonus >= 0.0 && self.grad_clip >= 0.0) {
            return Err(CoreError::Config("continuity bonus and clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub box_l1: f64,
    pub refer: f64,
    pub background: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights { box_l1: c.box_weight, refer: c.refer_weight, background: c.background_weight }
    }
}

/// Binary cross-entropy of a logit against a {0,1} target.
pub fn bce_with_logit(logit: f64, target: bool) -> f64 {
    // -log σ(x) = softplus(-x), computed stably.
    let z = if target { -logit } else { logit };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Matching cost of every (query, ground-truth) pair.
pub fn matching_cost(
    boxes: &[BBox],
    logits: &[f64],
    gt: &[BBox],
    referent: &[bool],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .zip(logits)
        .map(|(b, &s)| {
            gt.iter()
                .zip(referent)
                .map(|(g, &y)| {
                    let l1: f64 = b.to_array().iter().zip(g.to_array()).map(|(p, q)| (p - q).abs()).sum();
                    w.box_l1 * l1 + w.refer * bce_with_logit(s, y)
                })
                .collect()
        })
        .collect()
}

/// Hungarian-matched set loss for one frame.
///
/// Matched queries pay `box_l1·L1 + refer·BCE` averaged over the ground-truth
/// count; unmatched queries pay `background·BCE(ŝ, 0)` averaged over all
/// queries. `prior` pairs from the previous frame get their cost reduced by
/// `continuity_bonus`.
#[allow(clippy::too_many_arguments)]
pub fn match_loss<'t>(
    boxes: Var<'t>,
    logits: Var<'t>,
    gt: &[BBox],
    referent: &[bool],
    w: &LossWeights,
    prior: &[(usize, usize)],
    continuity_bonus: f64,
) -> Result<(Var<'t>, Assignment)> {
    if gt.is_empty() || gt.len() != referent.len() {
        return Err(CoreError::Invalid("ground truth must be non-empty with one flag per box".into()));
    }
    let tape = boxes.tape();
    let n = logits.numel();
    let bv: Vec<BBox> = boxes.value().data().chunks(4).map(BBox::from_slice).collect();
    let lv = logits.value().into_data();
    let mut cost = matching_cost(&bv, &lv, gt, referent, w);
    for &(j, k) in prior {
        if j < n && k < gt.len() {
            cost[j][k] -= continuity_bonus;
        }
    }
    let assignment = hungarian(&cost)?;
    let m = gt.len() as f64;

    let mut rows = Vec::with_capacity(assignment.pairs.len() * 4);
    let mut targets = Vec::with_capacity(assignment.pairs.len() * 4);
    let mut y = vec![0.0; n];
    let mut weight = vec![w.background / n as f64; n];
    for &(j, k) in &assignment.pairs {
        rows.extend((0..4).map(|c| j * 4 + c));
        targets.extend(gt[k].to_array());
        y[j] = referent[k] as u8 as f64;
        weight[j] = w.refer / m;
    }
    let matched = boxes.gather(rows.into(), &[targets.len()])?;
    let box_term = matched
        .sub(tape.constant(Tensor::from_vec(targets)))?
        .abs()
        .sum()
        .scale(w.box_l1 / m);
    // BCE = -(y·logσ(ŝ) + (1−y)·logσ(−ŝ))
    let y_pos = tape.constant(Tensor::from_vec(y.clone()));
    let y_neg = tape.constant(Tensor::from_vec(y.iter().map(|v| 1.0 - v).collect()));
    let bce = logits
        .log_sigmoid()
        .mul(y_pos)?
        .add(logits.neg().log_sigmoid().mul(y_neg)?)?
        .neg();
    let refer_term = bce.mul(tape.constant(Tensor::from_vec(weight)))?.sum();
    Ok((box_term.add(refer_term)?, assignment))
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub scene: SceneState,
    pub query: ReferringQuery,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    /// Mean per-frame loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingCurve {
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        self.epoch_losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: Optimizer, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState { kind, lr, m: zeros(), v: zeros(), step: 0 }
    }

    fn apply(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], scale: f64) {
        self.step += 1;
        let (b1, b2) = (Self::BETA1, Self::BETA2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match self.kind {
                Optimizer::Sgd => {
                    for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * scale * gi;
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                    for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gi = gi * scale;
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Cosine-annealed rate of `epoch` (0-based) out of `cfg.epochs`.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let frac = if cfg.epochs < 2 { 0.0 } else { epoch as f64 / (cfg.epochs - 1) as f64 };
    let (a, b) = (cfg.learning_rate, cfg.final_learning_rate);
    b + 0.5 * (a - b) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

/// Optimizer state carried across epochs.
pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &RmotModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: *cfg,
            weights: LossWeights::from(cfg),
            opt: OptimizerState::new(cfg.optimizer, cfg.learning_rate, model.params()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        })
    }

    /// One pass over `data` in shuffled order at the scheduled rate;
    /// returns the mean per-frame loss.
    pub fn run_epoch(&mut self, model: &mut RmotModel, data: &[TrainingExample]) -> Result<f64> {
        self.opt.lr = learning_rate_at(&self.cfg, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut frames) = (0.0, 0usize);
        for &i in &order {
            let ex = &data[i];
            let resampled = if self.cfg.resample_queries {
                valid_filters(&ex.scene).choose(&mut self.rng).map(|f| ReferringQuery::from_filter(&ex.scene, *f))
            } else {
                None
            };
            let query = resampled.as_ref().unwrap_or(&ex.query);
            total += train_scene(model, &ex.scene, query, &self.weights, &self.cfg, &mut self.opt)
                .map_err(|e| match e {
                    CoreError::Diverged { .. } => CoreError::Diverged { epoch: self.epoch },
                    e => e,
                })?;
            frames += ex.scene.length;
        }
        let mean = total / frames.max(1) as f64;
        if !mean.is_finite() {
            return Err(CoreError::Diverged { epoch: self.epoch });
        }
        self.epoch += 1;
        Ok(mean)
    }
}

/// Trains `model` in place with one parameter update per scene and
/// teacher-forced memory. Writes `epoch,loss` lines to `log` when given.
pub fn train(
    model: &mut RmotModel,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainingCurve> {
    cfg.validate()?;
    if data.len() < MIN_TRAINING_SCENES {
        return Err(CoreError::Config(format!(
            "training needs at least {MIN_TRAINING_SCENES} scenes, got {}",
            data.len()
        )));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut curve = TrainingCurve::default();
    for epoch in 0..cfg.epochs {
        let mean = trainer.run_epoch(model, data)?;
        curve.epoch_losses.push(mean);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{epoch},{mean:.10}")?;
        }
    }
    Ok(curve)
}

/// Runs the scene frame by frame and applies the clipped mean gradient once.
fn train_scene(
    model: &mut RmotModel,
    scene: &SceneState,
    query: &ReferringQuery,
    weights: &LossWeights,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let flags = query.referent_flags(scene);
    let mut state: TrackerState = model.new_state();
    let mut prior: Vec<(usize, usize)> = Vec::new();
    let mut total = 0.0;
    let mut sum: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for t in 0..scene.length {
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let text = model.encode_tokens(&p, &query.tokens)?;
        let frame = tape.constant(scene.frames[t].to_tensor());
        let mem: Vec<Var<'_>> =
            state.memory()?.slots().map(|s| tape.constant(s.clone())).collect();
        let out = model.forward_graph(&p, frame, &text, &mem)?;
        let gt = scene.boxes_at(t);
        let (loss, assignment) =
            match_loss(out.boxes, out.logits, &gt, &flags, weights, &prior, cfg.continuity_bonus)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { epoch: 0 });
        }
        total += value;
        let q_final = out.q_final.value();
        let mut grads = tape.backward(loss)?;
        for (acc, v) in sum.iter_mut().zip(&p) {
            let Some(g) = grads.take(v) else { continue };
            match acc {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                None => *acc = Some(g),
            }
        }
        state.memory_push(q_final)?;
        prior = assignment.pairs;
    }
    let n = scene.length.max(1) as f64;
    let grads: Vec<Option<Tensor>> = sum.into_iter().map(|g| g.map(|g| g.map(|x| x / n))).collect();
    let norm = grads.iter().flatten().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    opt.apply(model.params_mut(), &grads, scale);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w() -> LossWeights {
        LossWeights { box_l1: 5.0, refer: 2.0, background: 1.0 }
    }

    #[test]
    fn bce_matches_direct_formula() {
        for x in [-3.0, -0.2, 0.0, 1.5] {
            let s: f64 = 1.0 / (1.0 + f64::exp(-x));
            assert!((bce_with_logit(x, true) + s.ln()).abs() < 1e-12);
            assert!((bce_with_logit(x, false) + (1.0 - s).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_leave_background_term() {
        let t = Tape::new();
        let gt = [BBox::new(0.2, 0.3, 0.1, 0.1), BBox::new(0.7, 0.6, 0.2, 0.2)];
        let boxes = t.variable(
            Tensor::from_rows(&[gt[0].to_array().to_vec(), vec![0.5; 4], gt[1].to_array().to_vec()])
                .unwrap(),
        );
        let logits = t.variable(Tensor::from_vec(vec![40.0, 0.3, -40.0]));
        let (loss, a) = match_loss(boxes, logits, &gt, &[true, false], &w(), &[], 0.0).unwrap();
        assert_eq!(a.pairs, [(0, 0), (2, 1)]);
        let background = 1.0 / 3.0 * bce_with_logit(0.3, false);
        assert!((loss.item() - background).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_ground_truth_order() {
        let gt = [
            BBox::new(0.2, 0.3, 0.1, 0.1),
            BBox::new(0.7, 0.6, 0.2, 0.2),
            BBox::new(0.4, 0.8, 0.1, 0.2),
        ];
        let flags = [true, false, true];
        let eval = |order: &[usize]| {
            let t = Tape::new();
            let boxes = t.constant(Tensor::new(vec![4, 4], (0..16).map(|k| 0.05 * k as f64).collect()).unwrap());
            let logits = t.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.1]));
            let g: Vec<BBox> = order.iter().map(|&i| gt[i]).collect();
            let f: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
            match_loss(boxes, logits, &g, &f, &w(), &[], 0.0).unwrap().0.item()
        };
        let base = eval(&[0, 1, 2]);
        for order in [[2, 1, 0], [1, 2, 0], [0, 2, 1]] {
            assert!((eval(&order) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn three_query_two_gt_assignment_matches_exhaustive_search() {
        let boxes = [
            BBox::new(0.21, 0.3, 0.1, 0.1),
            BBox::new(0.5, 0.5, 0.3, 0.3),
            BBox::new(0.69, 0.61, 0.2, 0.2),
        ];
        let logits = [1.0, 0.0, -2.0];
        let gt = [BBox::new(0.7, 0.6, 0.2, 0.2), BBox::new(0.2, 0.3, 0.1, 0.1)];
        let flags = [false, true];
        let cost = matching_cost(&boxes, &logits, &gt, &flags, &w());
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, brute_force_assignment(&cost));
        assert_eq!(a.pairs, [(0, 1), (2, 0)]);
    }

    #[test]
    fn schedule_runs_from_initial_to_final_rate() {
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e-2, final_learning_rate: 1e-4, ..Default::default() };
        assert_eq!(learning_rate_at(&cfg, 0), 1e-2);
        assert!((learning_rate_at(&cfg, 4) - 1e-4).abs() < 1e-15);
        assert!((learning_rate_at(&cfg, 2) - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-15);
        let rates: Vec<f64> = (0..5).map(|e| learning_rate_at(&cfg, e)).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn too_few_scenes_is_rejected() {
        let mut m = RmotModel::new(crate::model::ModelConfig::micro(), 0).unwrap();
        let err = train(&mut m, &[], &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }
}

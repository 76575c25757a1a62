//! Projected sign-gradient optimization of a perturbation over the attack
//! window, with the tracker replayed through its memory every iteration.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rmot_autograd::{Tape, Tensor, Var};

use super::channels::{channel_aai, channel_eai, project_aai};
use super::losses::{
    loss_box, loss_distinct, loss_linguistic, loss_refer, loss_spatiotemp, loss_temporal, loss_total,
    loss_visual, SpatioTemporal, Term,
};
use super::targeting::{query_referents, TargetMasks};
use super::{AttackConfig, AttackKind, Perturbation};
use crate::error::{CoreError, Result};
use crate::model::{ForwardOutput, Predictions, RmotModel};
use crate::scenegen::{Frame, ReferringQuery, SceneState};

/// Number of frame evaluations in which each conditional term was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkipCounts {
    pub semantic: usize,
    pub spatial: usize,
    pub refer: usize,
    pub temporal: usize,
    pub distinct: usize,
}

impl SkipCounts {
    fn record(&mut self, o: &FrameObjective<'_>) {
        self.semantic += o.masks.semantic.is_none() as usize;
        self.spatial += o.masks.spatial.is_none() as usize;
        self.refer += o.refer.skipped as usize;
        self.temporal += o.st.temporal.skipped as usize;
        self.distinct += o.st.distinct.skipped as usize;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    /// The iterate with the highest loss.
    pub perturbation: Perturbation,
    /// `L_total` of every iterate, starting with the identity.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
    pub skips: SkipCounts,
}

/// Loss of one frame and its parts.
pub struct FrameObjective<'t> {
    pub total: Var<'t>,
    pub refer: Term<'t>,
    pub st: SpatioTemporal<'t>,
    pub masks: TargetMasks,
}

/// Attack loss for one frame. `memory` holds the buffer after this frame's
/// push (oldest first); `gt_referent` marks the queries standing for
/// referents.
pub fn frame_objective<'t>(
    out: &ForwardOutput<'t>,
    memory: &[Var<'t>],
    gt_referent: &[bool],
    cfg: &AttackConfig,
) -> Result<FrameObjective<'t>> {
    let preds = Predictions::from_output(out);
    let masks = TargetMasks::compute(&preds.q_final, &preds.boxes, &preds.logits, gt_referent, cfg);
    let weights = masks.weights(gt_referent, cfg);
    let refer = loss_refer(out.logits, &weights, gt_referent)?;
    let st = SpatioTemporal {
        temporal: loss_temporal(memory, out.logits)?,
        distinct: loss_distinct(out.q_final)?,
        visual: loss_visual(out.visual_attn)?,
        linguistic: loss_linguistic(out.logits, cfg.linguistic_mode),
        boxes: loss_box(out.boxes)?,
    };
    let total = loss_total(refer.value, loss_spatiotemp(&st, cfg)?, cfg)?;
    Ok(FrameObjective { total, refer, st, masks })
}

/// Pixel-space PGD under an ℓ∞ budget.
pub fn pgd_attack(
    model: &RmotModel,
    scene: &SceneState,
    query: &ReferringQuery,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    optimize(model, scene, query, cfg, AttackKind::Pixel)
}

/// PGD over the parameters of a physical channel.
pub fn pgd_physical(
    model: &RmotModel,
    scene: &SceneState,
    query: &ReferringQuery,
    kind: AttackKind,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    match kind {
        AttackKind::Aai | AttackKind::Eai => optimize(model, scene, query, cfg, kind),
        k => Err(CoreError::AttackConfig(format!("{k} is not a physical channel"))),
    }
}

struct Replay<'a> {
    model: &'a RmotModel,
    tokens: &'a [String],
    frames: &'a [Frame],
    cfg: &'a AttackConfig,
    kind: AttackKind,
    /// Memory slots before the first attacked frame.
    prefix: Vec<Tensor>,
    /// Per loss frame, which queries stand for referents in the clean run.
    flags: Vec<Vec<bool>>,
    start: usize,
    window_end: usize,
}

impl Replay<'_> {
    /// Loss of `params` and, when requested, its gradient.
    fn evaluate(&self, params: &[Tensor], skips: &mut SkipCounts, with_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.model.bind(&tape, false);
        let text = self.model.encode_tokens(&p, self.tokens)?;
        let capacity = self.model.config().mem_len;
        let mut mem: VecDeque<Var<'_>> = self.prefix.iter().map(|s| tape.constant(s.clone())).collect();
        let vars: Vec<Var<'_>> = params.iter().map(|t| tape.variable(t.clone())).collect();
        let mut total: Option<Var<'_>> = None;
        for (k, flags) in self.flags.iter().enumerate() {
            let t = self.start + k;
            let clean = tape.constant(self.frames[t].to_tensor());
            let x = if t < self.window_end { self.perturb(clean, vars[k])? } else { clean };
            let slots: Vec<Var<'_>> = mem.iter().copied().collect();
            let out = self.model.forward_graph(&p, x, &text, &slots)?;
            if mem.len() == capacity {
                mem.pop_front();
            }
            mem.push_back(out.q_final);
            let slots: Vec<Var<'_>> = mem.iter().copied().collect();
            let obj = frame_objective(&out, &slots, flags, self.cfg)?;
            skips.record(&obj);
            total = Some(match total {
                None => obj.total,
                Some(s) => s.add(obj.total)?,
            });
        }
        let total = total.expect("window is non-empty");
        let value = total.item();
        if !with_grad || !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(total)?;
        let g = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, g))
    }

    fn perturb<'t>(&self, clean: Var<'t>, param: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            AttackKind::Pixel => Ok(clean.add(param)?.clamp(0.0, 1.0)),
            AttackKind::Aai => Ok(channel_aai(clean, param)?.clamp(0.0, 1.0)),
            AttackKind::Eai => channel_eai(clean, param),
            AttackKind::None => Ok(clean),
        }
    }

    /// One ascent step on `L_total` followed by projection; asserts the
    /// feasible-set invariants.
    fn step(&self, params: &mut [Tensor], grads: &[Tensor]) {
        let cfg = self.cfg;
        let ratio = cfg.step / cfg.epsilon;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let clean = &self.frames[self.start + k].pixels;
            match self.kind {
                AttackKind::Pixel => {
                    for ((d, &gi), &c) in p.data_mut().iter_mut().zip(g.data()).zip(clean) {
                        let mut v = (*d + cfg.step * sign(gi)).clamp(-cfg.epsilon, cfg.epsilon);
                        v = (c + v).clamp(0.0, 1.0) - c;
                        *d = v.clamp(-cfg.epsilon, cfg.epsilon);
                    }
                    assert!(p.max_abs() <= cfg.epsilon, "ℓ∞ budget violated");
                    assert!(
                        p.data().iter().zip(clean).all(|(d, c)| (0.0..=1.0).contains(&(c + d).clamp(0.0, 1.0))),
                        "perturbed pixel outside [0, 1]"
                    );
                }
                AttackKind::Aai => {
                    let d = p.data_mut();
                    d[0] += ratio * cfg.blur_max * sign(g.data()[0]);
                    d[1] += ratio * PI * sign(g.data()[1]);
                    project_aai(d, cfg.blur_max);
                    assert!((0.0..=cfg.blur_max).contains(&d[0]), "blur length out of bounds");
                    assert!((0.0..PI).contains(&d[1]), "blur angle out of bounds");
                }
                AttackKind::Eai => {
                    let a = cfg.eai_amplitude;
                    for (d, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *d = (*d + ratio * a * sign(gi)).clamp(-a, a);
                    }
                    assert!(p.max_abs() <= a, "EAI amplitude violated");
                }
                AttackKind::None => {}
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn optimize(
    model: &RmotModel,
    scene: &SceneState,
    query: &ReferringQuery,
    cfg: &AttackConfig,
    kind: AttackKind,
) -> Result<AttackOutcome> {
    cfg.validate_bounds()?;
    let window = cfg.window();
    if window.end > scene.length {
        return Err(CoreError::AttackConfig(format!(
            "attack window {window:?} exceeds the {}-frame scene",
            scene.length
        )));
    }
    let loss_end = (window.end + cfg.horizon).min(scene.length);
    let object_flags = query.referent_flags(scene);

    // Clean pass: memory before the window and referent queries per loss frame.
    let mut state = model.new_state();
    let mut prefix = Vec::new();
    let mut flags = Vec::new();
    for t in 0..loss_end {
        if t == window.start {
            prefix = state.memory()?.slots().cloned().collect();
        }
        let preds = model.forward(&scene.frames[t], &query.tokens, &state)?;
        if t >= window.start {
            flags.push(query_referents(&preds.boxes, &scene.boxes_at(t), &object_flags));
        }
        state.memory_push(preds.q_final)?;
    }

    let first = &scene.frames[0];
    let mut params = Perturbation::identity(kind, window.start, cfg.delta_attack, first.height, first.width).params;
    let replay = Replay {
        model,
        tokens: &query.tokens,
        frames: &scene.frames,
        cfg,
        kind,
        prefix,
        flags,
        start: window.start,
        window_end: window.end,
    };

    let mut skips = SkipCounts::default();
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    let mut best = (f64::NEG_INFINITY, 0, params.clone());
    for it in 0..=cfg.iters {
        let (loss, grads) = replay.evaluate(&params, &mut skips, it < cfg.iters)?;
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: it });
        }
        trace.push(loss);
        if loss > best.0 {
            best = (loss, it, params.clone());
        }
        if it < cfg.iters {
            replay.step(&mut params, &grads);
        }
    }
    let (_, best_iteration, params) = best;
    Ok(AttackOutcome {
        perturbation: Perturbation { kind, t_attack: window.start, delta_attack: cfg.delta_attack, params },
        trace,
        best_iteration,
        skips,
    })
}

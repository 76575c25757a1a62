//! Finite-difference verification of the model and every attack loss on a
//! micro instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmot_autograd::{grad_check, AutogradError, Tape, Tensor, Var};

use crate::attack::{
    channel_aai, channel_eai, loss_box, loss_distinct, loss_linguistic, loss_refer, loss_spatiotemp, loss_temporal,
    loss_total, loss_visual, AttackConfig, LinguisticMode, SpatioTemporal, TargetMasks,
};
use crate::error::Result;
use crate::model::{ForwardOutput, ModelConfig, Predictions, RmotModel};
use crate::scenegen::VOCABULARY;

/// Tolerance on the relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy)]
enum Probe {
    Forward,
    Refer,
    Temporal,
    Distinct,
    Visual,
    Linguistic(LinguisticMode),
    Boxes,
    SpatioTemporal,
    Total,
}

impl Probe {
    const ALL: [Probe; 10] = [
        Probe::Forward,
        Probe::Refer,
        Probe::Temporal,
        Probe::Distinct,
        Probe::Visual,
        Probe::Linguistic(LinguisticMode::Magnitude),
        Probe::Linguistic(LinguisticMode::Uncertainty),
        Probe::Boxes,
        Probe::SpatioTemporal,
        Probe::Total,
    ];

    fn name(self) -> &'static str {
        match self {
            Probe::Forward => "forward",
            Probe::Refer => "loss_refer",
            Probe::Temporal => "loss_temporal",
            Probe::Distinct => "loss_distinct",
            Probe::Visual => "loss_visual",
            Probe::Linguistic(LinguisticMode::Magnitude) => "loss_linguistic_magnitude",
            Probe::Linguistic(LinguisticMode::Uncertainty) => "loss_linguistic_uncertainty",
            Probe::Boxes => "loss_box",
            Probe::SpatioTemporal => "loss_spatiotemp",
            Probe::Total => "loss_total",
        }
    }
}

struct Fixture {
    model: RmotModel,
    tokens: Vec<String>,
    frame: Tensor,
    memory: Vec<Tensor>,
    flags: Vec<bool>,
    /// Random projection turning every forward output into one scalar.
    coeffs: [Tensor; 4],
    cfg: AttackConfig,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let mc = ModelConfig::micro();
        let model = RmotModel::new(mc, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (n, d) = (mc.n_queries, mc.d_model);
        let tokens = vec![VOCABULARY[rng.gen_range(0..3)].to_string(), "car".to_string()];
        let frame = uniform(&mut rng, &[mc.height, mc.width, 3], 0.05, 0.95);
        let memory = (0..mc.mem_len - 1).map(|_| uniform(&mut rng, &[n, d], -1.0, 1.0)).collect();
        let first = rng.gen_bool(0.5);
        let flags = (0..n).map(|i| (i == 0) == first).collect();
        let coeffs = [
            uniform(&mut rng, &[n, 4], -1.0, 1.0),
            uniform(&mut rng, &[n], -1.0, 1.0),
            uniform(&mut rng, &[n, d], -1.0, 1.0),
            uniform(&mut rng, &[n, mc.n_patches()], -1.0, 1.0),
        ];
        Ok(Fixture { model, tokens, frame, memory, flags, coeffs, cfg: AttackConfig::default() })
    }

    fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], frame: Var<'t>) -> Result<(ForwardOutput<'t>, Vec<Var<'t>>)> {
        let text = self.model.encode_tokens(p, &self.tokens)?;
        let mem: Vec<Var<'t>> = self.memory.iter().map(|m| tape.constant(m.clone())).collect();
        let out = self.model.forward_graph(p, frame, &text, &mem)?;
        let mut after = mem;
        after.push(out.q_final);
        Ok((out, after))
    }

    /// Promotion weights at the unperturbed input; held fixed under
    /// differentiation exactly as during an attack.
    fn weights(&self) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.model.bind(&tape, false);
        let (out, _) = self.forward(&tape, &p, tape.constant(self.frame.clone()))?;
        let pr = Predictions::from_output(&out);
        let masks = TargetMasks::compute(&pr.q_final, &pr.boxes, &pr.logits, &self.flags, &self.cfg);
        Ok(masks.weights(&self.flags, &self.cfg))
    }

    fn scalar<'t>(&self, probe: Probe, weights: &[f64], tape: &'t Tape, p: &[Var<'t>], frame: Var<'t>) -> Result<Var<'t>> {
        let (out, mem) = self.forward(tape, p, frame)?;
        let st = |cfg: &AttackConfig| -> Result<SpatioTemporal<'t>> {
            Ok(SpatioTemporal {
                temporal: loss_temporal(&mem, out.logits)?,
                distinct: loss_distinct(out.q_final)?,
                visual: loss_visual(out.visual_attn)?,
                linguistic: loss_linguistic(out.logits, cfg.linguistic_mode),
                boxes: loss_box(out.boxes)?,
            })
        };
        Ok(match probe {
            Probe::Forward => {
                let parts = [out.boxes, out.logits, out.q_final, out.visual_attn];
                let mut acc = tape.scalar(0.0);
                for (v, c) in parts.iter().zip(&self.coeffs) {
                    acc = acc.add(v.mul(tape.constant(c.clone()))?.sum())?;
                }
                acc
            }
            Probe::Refer => loss_refer(out.logits, weights, &self.flags)?.value,
            Probe::Temporal => loss_temporal(&mem, out.logits)?.value,
            Probe::Distinct => loss_distinct(out.q_final)?.value,
            Probe::Visual => loss_visual(out.visual_attn)?,
            Probe::Linguistic(mode) => loss_linguistic(out.logits, mode),
            Probe::Boxes => loss_box(out.boxes)?,
            Probe::SpatioTemporal => loss_spatiotemp(&st(&self.cfg)?, &self.cfg)?,
            Probe::Total => {
                let refer = loss_refer(out.logits, weights, &self.flags)?.value;
                loss_total(refer, loss_spatiotemp(&st(&self.cfg)?, &self.cfg)?, &self.cfg)?
            }
        })
    }
}

fn lift<T>(r: Result<T>) -> rmot_autograd::Result<T> {
    r.map_err(|e| AutogradError::Invalid(e.to_string()))
}

fn check<F>(name: String, f: F, x: &Tensor) -> Result<GradientCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> rmot_autograd::Result<Var<'t>>,
{
    let r = grad_check(f, x, GRADIENT_TOLERANCE)?;
    Ok(GradientCheck { name, max_rel_error: r.max_rel_error, passed: r.passed })
}

/// Checks, for one random micro instance: the full forward pass with respect
/// to the frame and to every parameter tensor, every attack loss with
/// respect to the frame, and both physical channels with respect to their
/// parameters.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCheck>> {
    let fx = Fixture::new(seed)?;
    let w = fx.weights()?;
    let mut out = Vec::new();

    for probe in Probe::ALL {
        let name = format!("{}/frame", probe.name());
        out.push(check(
            name,
            |tape, x| {
                let p = fx.model.bind(tape, false);
                lift(fx.scalar(probe, &w, tape, &p, x))
            },
            &fx.frame,
        )?);
    }

    let mut worst = GradientCheck { name: "forward/params".into(), max_rel_error: 0.0, passed: true };
    for k in 0..fx.model.params().len() {
        let c = check(
            String::new(),
            |tape, x| {
                let mut p = fx.model.bind(tape, false);
                p[k] = x;
                let frame = tape.constant(fx.frame.clone());
                lift(fx.scalar(Probe::Forward, &w, tape, &p, frame))
            },
            &fx.model.params()[k],
        )?;
        worst.max_rel_error = worst.max_rel_error.max(c.max_rel_error);
        worst.passed &= c.passed;
    }
    out.push(worst);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
    let frame = fx.frame.clone();
    let blur = Tensor::from_vec(vec![rng.gen_range(0.5..5.0), rng.gen_range(0.1..3.0)]);
    out.push(check(
        "channel_aai/params".into(),
        |tape, x| {
            let y = lift(channel_aai(tape.constant(frame.clone()), x))?;
            y.mul(tape.constant(frame.clone())).map(|v| v.sum())
        },
        &blur,
    )?);
    let offsets = uniform(&mut rng, &[frame.shape()[0], 1, 3], -0.04, 0.04);
    out.push(check(
        "channel_eai/offsets".into(),
        |tape, x| Ok(lift(channel_eai(tape.constant(frame.clone()), x))?.square().sum()),
        &offsets,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let checks = gradient_suite(1).unwrap();
        assert_eq!(checks.len(), Probe::ALL.len() + 3);
        for c in &checks {
            assert!(c.passed, "{} {}", c.name, c.max_rel_error);
        }
    }
}

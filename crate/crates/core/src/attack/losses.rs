//! Adversarial objectives. PGD ascends the total, so the referring term is
//! written as a log-likelihood: higher values are more adversarial.

use rmot_autograd::{Tensor, Var};

use super::{AttackConfig, LinguisticMode};
use crate::error::{CoreError, Result};

/// A loss value plus whether its precondition failed (value is then 0).
#[derive(Debug, Clone, Copy)]
pub struct Term<'t> {
    pub value: Var<'t>,
    pub skipped: bool,
}

impl<'t> Term<'t> {
    fn active(value: Var<'t>) -> Self {
        Term { value, skipped: false }
    }

    fn skip(like: Var<'t>) -> Self {
        Term { value: like.tape().scalar(0.0), skipped: true }
    }
}

/// Negated weighted BCE toward the adversarial labeling (promoted decoys
/// toward 1, referents toward 0), normalized by the query count. At most 0.
pub fn loss_refer<'t>(logits: Var<'t>, weights: &[f64], gt_referent: &[bool]) -> Result<Term<'t>> {
    let n = logits.numel();
    if weights.len() != n || gt_referent.len() != n {
        return Err(CoreError::Invalid(format!(
            "refer loss needs {n} weights and flags, got {} and {}",
            weights.len(),
            gt_referent.len()
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(Term::skip(logits));
    }
    let tape = logits.tape();
    let promote = tape.constant(Tensor::from_vec(weights.to_vec()));
    let suppress =
        tape.constant(Tensor::from_vec(gt_referent.iter().map(|&r| r as u8 as f64).collect()));
    // −BCE(ŝ, 1) = log σ(ŝ); −BCE(ŝ, 0) = log σ(−ŝ)
    let up = logits.log_sigmoid().mul(promote)?;
    let down = logits.neg().log_sigmoid().mul(suppress)?;
    Ok(Term::active(up.add(down)?.sum().scale(1.0 / n as f64)))
}

/// Negative mean distance between consecutive memory slots, over the
/// valid slots. `slots` are `N×d`, oldest first.
pub fn loss_temporal<'t>(slots: &[Var<'t>], like: Var<'t>) -> Result<Term<'t>> {
    if slots.len() < 2 {
        return Ok(Term::skip(like));
    }
    let n = slots[0].shape()[0];
    let mut total: Option<Var<'t>> = None;
    for w in slots.windows(2) {
        let dist = w[1].sub(w[0])?.reduce(rmot_autograd::ReduceKind::L2Norm, Some(1))?.sum();
        total = Some(match total {
            None => dist,
            Some(t) => t.add(dist)?,
        });
    }
    let pairs = (slots.len() - 1) * n;
    Ok(Term::active(total.expect("at least one pair").scale(-1.0 / pairs as f64)))
}

/// Mean absolute cosine similarity over distinct query pairs.
pub fn loss_distinct(q_final: Var<'_>) -> Result<Term<'_>> {
    let n = q_final.shape()[0];
    if n < 2 {
        return Ok(Term::skip(q_final));
    }
    let rows: Vec<Var<'_>> = (0..n).map(|i| q_final.select(i)).collect::<std::result::Result<_, _>>()?;
    let mut total: Option<Var<'_>> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = rows[i].cosine_similarity(rows[j])?.abs();
            total = Some(match total {
                None => c,
                Some(t) => t.add(c)?,
            });
        }
    }
    let pairs = n * (n - 1) / 2;
    Ok(Term::active(total.expect("n ≥ 2").scale(1.0 / pairs as f64)))
}

/// `−Var(A) + mean(A)²` over every attention entry.
pub fn loss_visual(attn: Var<'_>) -> Result<Var<'_>> {
    Ok(attn.variance().neg().add(attn.mean().square())?)
}

pub fn loss_linguistic(logits: Var<'_>, mode: LinguisticMode) -> Var<'_> {
    let m = logits.abs().mean();
    match mode {
        LinguisticMode::Magnitude => m.neg(),
        LinguisticMode::Uncertainty => m,
    }
}

/// Population variance of all box coordinates plus the Frobenius distance
/// from the all-0.5 box matrix.
pub fn loss_box(boxes: Var<'_>) -> Result<Var<'_>> {
    Ok(boxes.variance().add(boxes.offset(-0.5).l2norm())?)
}

/// The five spatio-temporal components of one frame.
#[derive(Debug, Clone, Copy)]
pub struct SpatioTemporal<'t> {
    pub temporal: Term<'t>,
    pub distinct: Term<'t>,
    pub visual: Var<'t>,
    pub linguistic: Var<'t>,
    pub boxes: Var<'t>,
}

pub fn loss_spatiotemp<'t>(c: &SpatioTemporal<'t>, cfg: &AttackConfig) -> Result<Var<'t>> {
    let parts = [
        (c.temporal.value, cfg.alpha_temporal),
        (c.distinct.value, cfg.alpha_distinct),
        (c.visual, cfg.alpha_visual),
        (c.linguistic, cfg.alpha_linguistic),
        (c.boxes, cfg.alpha_box),
    ];
    let mut total = parts[0].0.scale(parts[0].1);
    for &(v, a) in &parts[1..] {
        total = total.add(v.scale(a))?;
    }
    Ok(total)
}

pub fn loss_total<'t>(refer: Var<'t>, spatiotemp: Var<'t>, cfg: &AttackConfig) -> Result<Var<'t>> {
    Ok(refer.scale(cfg.w_refer).add(spatiotemp.scale(cfg.w_st))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rmot_autograd::{grad_check, Tape};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn refer_loss_vanishes_at_adversarial_scores() {
        let t = Tape::new();
        let logits = t.variable(Tensor::from_vec(vec![-40.0, 40.0, 40.0]));
        let l = loss_refer(logits, &[0.0, 1.0, 0.5], &[true, false, false]).unwrap();
        assert!(!l.skipped && l.value.item() > -1e-15 && l.value.item() <= 0.0);
    }

    #[test]
    fn lowering_referent_score_raises_refer_loss() {
        let eval = |r: f64| {
            let t = Tape::new();
            let l = t.constant(Tensor::from_vec(vec![r, 0.3, -0.2, 1.0]));
            loss_refer(l, &[0.0, 1.0, 0.4, 0.0], &[true, false, false, true]).unwrap().value.item()
        };
        assert!(eval(0.5) > eval(1.0));
        assert!(eval(-1.0) > eval(0.5));
    }

    #[test]
    fn refer_loss_with_no_targets_is_skipped() {
        let t = Tape::new();
        let l = loss_refer(t.constant(Tensor::from_vec(vec![1.0, 2.0])), &[0.0, 0.0], &[true, false]).unwrap();
        assert!(l.skipped);
        assert_eq!(l.value.item(), 0.0);
    }

    #[test]
    fn refer_loss_gradient_matches_finite_differences() {
        let x = Tensor::from_vec(vec![0.7, -1.2, 0.1, 2.3]);
        let r = grad_check(
            |_, v| Ok(loss_refer(v, &[0.0, 0.8, 1.0, 0.3], &[true, false, false, false]).unwrap().value),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn temporal_closed_forms() {
        let t = Tape::new();
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c: Vec<Var<'_>> = (0..4).map(|_| t.constant(e.clone())).collect();
        assert_eq!(loss_temporal(&c, c[0]).unwrap().value.item(), 0.0);
        let alt: Vec<Var<'_>> =
            (0..4).map(|k| t.constant(if k % 2 == 0 { e.clone() } else { e.map(|v| -v) })).collect();
        assert!(close(loss_temporal(&alt, alt[0]).unwrap().value.item(), -2.0));
        let one = loss_temporal(&alt[..1], alt[0]).unwrap();
        assert!(one.skipped && one.value.item() == 0.0);
    }

    #[test]
    fn temporal_matches_loop_oracle() {
        let t = Tape::new();
        let slots: Vec<Tensor> = (0..4)
            .map(|k| Tensor::new(vec![3, 5], (0..15).map(|i| ((i * 7 + k * 13) % 11) as f64 * 0.1).collect()).unwrap())
            .collect();
        let vars: Vec<Var<'_>> = slots.iter().map(|s| t.constant(s.clone())).collect();
        let mut want = 0.0;
        for k in 1..4 {
            for i in 0..3 {
                let d: f64 = (0..5).map(|c| (slots[k].row(i)[c] - slots[k - 1].row(i)[c]).powi(2)).sum();
                want += d.sqrt();
            }
        }
        want /= -(3.0 * 3.0);
        assert!(close(loss_temporal(&vars, vars[0]).unwrap().value.item(), want));
    }

    #[test]
    fn distinct_extremes_and_oracle() {
        let t = Tape::new();
        assert!(close(loss_distinct(t.constant(Tensor::eye(4))).unwrap().value.item(), 0.0));
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(close(loss_distinct(t.constant(same)).unwrap().value.item(), 1.0));
        assert!(loss_distinct(t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())).unwrap().skipped);

        let q = Tensor::new(vec![8, 32], (0..256).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let (a, b) = (q.row(i), q.row(j));
                    let dot: f64 = (0..32).map(|k| a[k] * b[k]).sum();
                    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    want += (dot / (n(a) * n(b))).abs();
                }
            }
        }
        want /= 56.0;
        let got = loss_distinct(t.constant(q)).unwrap().value.item();
        assert!(close(got, want) && (0.0..=1.0).contains(&got));
    }

    #[test]
    fn visual_uniform_and_oracle() {
        let t = Tape::new();
        let u = loss_visual(t.constant(Tensor::full(&[8, 96], 1.0 / 96.0))).unwrap().item();
        assert!((u - (1.0f64 / 96.0).powi(2)).abs() < 1e-15);
        let mut data: Vec<f64> = (0..8 * 96).map(|i| ((i * 31 % 17) + 1) as f64).collect();
        for r in data.chunks_mut(96) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let got = loss_visual(t.constant(Tensor::new(vec![8, 96], data).unwrap())).unwrap().item();
        assert!(close(got, -var + mean * mean));
        let mut onehot = vec![0.0; 8 * 96];
        for i in 0..8 {
            onehot[i * 96 + i] = 1.0;
        }
        let peaked = loss_visual(t.constant(Tensor::new(vec![8, 96], onehot).unwrap())).unwrap().item();
        assert!(peaked < got);
    }

    #[test]
    fn linguistic_values_and_gradient_sign() {
        let t = Tape::new();
        assert_eq!(loss_linguistic(t.constant(Tensor::zeros(&[3])), LinguisticMode::Magnitude).item(), 0.0);
        let x = t.variable(Tensor::from_vec(vec![2.0, -2.0]));
        let l = loss_linguistic(x, LinguisticMode::Magnitude);
        assert_eq!(l.item(), -2.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), [-0.5, 0.5]);
        let t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![2.0, -2.0]));
        assert_eq!(loss_linguistic(x, LinguisticMode::Uncertainty).item(), 2.0);
    }

    #[test]
    fn box_loss_closed_forms() {
        let t = Tape::new();
        assert_eq!(loss_box(t.constant(Tensor::full(&[3, 4], 0.5))).unwrap().item(), 0.0);
        assert!(close(loss_box(t.constant(Tensor::full(&[1, 4], 1.0))).unwrap().item(), 1.0));
        let b = [0.1, 0.7, 0.3, 0.2, 0.9, 0.4, 0.6, 0.05];
        let mean = b.iter().sum::<f64>() / 8.0;
        let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let fro = b.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>().sqrt();
        let got = loss_box(t.constant(Tensor::new(vec![2, 4], b.to_vec()).unwrap())).unwrap().item();
        assert!(close(got, var + fro));
    }

    fn components<'t>(t: &'t Tape) -> SpatioTemporal<'t> {
        let mk = |v: f64| t.constant(Tensor::scalar(v));
        SpatioTemporal {
            temporal: Term { value: mk(-0.5), skipped: false },
            distinct: Term { value: mk(0.25), skipped: false },
            visual: mk(-0.125),
            linguistic: mk(-3.0),
            boxes: mk(0.75),
        }
    }

    #[test]
    fn spatiotemporal_is_weighted_sum() {
        let t = Tape::new();
        let c = components(&t);
        let zero = AttackConfig {
            alpha_temporal: 0.0,
            alpha_distinct: 0.0,
            alpha_visual: 0.0,
            alpha_linguistic: 0.0,
            alpha_box: 0.0,
            ..Default::default()
        };
        assert_eq!(loss_spatiotemp(&c, &zero).unwrap().item(), 0.0);
        let only = AttackConfig { alpha_box: 2.0, ..zero };
        assert_eq!(loss_spatiotemp(&c, &only).unwrap().item(), 1.5);
        let all = loss_spatiotemp(&c, &AttackConfig::default()).unwrap().item();
        assert!(close(all, -0.5 + 0.25 - 0.125 - 3.0 + 0.75));
    }

    #[test]
    fn total_uses_top_level_weights() {
        let t = Tape::new();
        let one = t.constant(Tensor::scalar(1.0));
        assert_eq!(loss_total(one, one, &AttackConfig::default()).unwrap().item(), 3.0);
        let zero = AttackConfig { w_refer: 0.0, w_st: 0.0, ..Default::default() };
        assert_eq!(loss_total(one, one, &zero).unwrap().item(), 0.0);
        let r = t.constant(Tensor::scalar(2.5));
        assert_eq!(loss_total(r, one, &AttackConfig::default()).unwrap().item(), 6.0);
    }
}

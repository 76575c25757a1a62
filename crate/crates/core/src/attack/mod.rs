//! Adversarial attack on the tracker: decoy targeting, the referring and
//! spatio-temporal losses, PGD over pixels, and two simulated physical
//! channels (motion blur and row-banded sensor noise).
//!
//! Sign convention: PGD steps along `+sign(∇L_total)` and traces report
//! `L_total`. The referring term is a log-likelihood of the adversarial
//! labeling; the spatio-temporal terms are used as written.

mod channels;
mod losses;
mod perturbation;
mod pgd;
mod targeting;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use channels::{
    channel_aai, channel_eai, motion_blur, project_aai, row_offsets, BLUR_MAX, EAI_AMPLITUDE, SAMPLES,
};
pub use losses::{
    loss_box, loss_distinct, loss_linguistic, loss_refer, loss_spatiotemp, loss_temporal, loss_total,
    loss_visual, SpatioTemporal, Term,
};
pub use perturbation::{AttackKind, Perturbation};
pub use pgd::{frame_objective, pgd_attack, pgd_physical, AttackOutcome, FrameObjective, SkipCounts};
pub use targeting::{
    query_referents, spatial_weights, target_confidence, target_context, target_semantic, target_spatial,
    TargetMasks, MIN_SIDE, SEMANTIC_COSINE, SPATIAL_EPS,
};

/// How the linguistic term treats referring logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinguisticMode {
    /// `−mean|ŝ|`: ascending it drives logits toward 0.
    Magnitude,
    /// `+mean|ŝ|`: ascending it inflates logit magnitudes.
    Uncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iters: usize,
    pub delta_attack: usize,
    pub t_attack: usize,
    pub w_sem: f64,
    pub w_spa: f64,
    pub w_conf: f64,
    pub w_ctx: f64,
    pub alpha_temporal: f64,
    pub alpha_distinct: f64,
    pub alpha_visual: f64,
    pub alpha_linguistic: f64,
    pub alpha_box: f64,
    pub w_refer: f64,
    pub w_st: f64,
    pub tau0: f64,
    pub top_k: usize,
    pub seed: u64,
    pub linguistic_mode: LinguisticMode,
    /// Clean frames after the window that still enter the objective.
    pub horizon: usize,
    /// AAI blur length bound in pixels.
    pub blur_max: f64,
    /// EAI offset bound.
    pub eai_amplitude: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step: 1.0 / 255.0,
            iters: 100,
            delta_attack: 2,
            t_attack: 11,
            w_sem: 1.0,
            w_spa: 1.0,
            w_conf: 1.0,
            w_ctx: 1.0,
            alpha_temporal: 1.0,
            alpha_distinct: 1.0,
            alpha_visual: 1.0,
            alpha_linguistic: 1.0,
            alpha_box: 1.0,
            w_refer: 2.0,
            w_st: 1.0,
            tau0: 0.1,
            top_k: 2,
            seed: 0,
            linguistic_mode: LinguisticMode::Magnitude,
            horizon: 8,
            blur_max: BLUR_MAX,
            eai_amplitude: EAI_AMPLITUDE,
        }
    }
}

impl AttackConfig {
    /// Checks every documented invariant, including `iters ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(CoreError::AttackConfig("iters must be at least 1".into()));
        }
        self.validate_bounds()
    }

    /// As [`validate`](Self::validate) but allows zero iterations, which
    /// yields the identity perturbation.
    pub fn validate_bounds(&self) -> Result<()> {
        let positive = [("epsilon", self.epsilon), ("step", self.step), ("tau0", self.tau0)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::AttackConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let weights = [
            self.w_sem,
            self.w_spa,
            self.w_conf,
            self.w_ctx,
            self.alpha_temporal,
            self.alpha_distinct,
            self.alpha_visual,
            self.alpha_linguistic,
            self.alpha_box,
            self.w_refer,
            self.w_st,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CoreError::AttackConfig("weights must be finite and non-negative".into()));
        }
        if self.t_attack <= 10 {
            return Err(CoreError::AttackConfig(format!(
                "t_attack must be later than frame 10, got {}",
                self.t_attack
            )));
        }
        if self.delta_attack == 0 {
            return Err(CoreError::AttackConfig("delta_attack must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(CoreError::AttackConfig("top_k must be at least 1".into()));
        }
        if !(self.blur_max.is_finite() && self.blur_max >= 0.0 && self.eai_amplitude.is_finite() && self.eai_amplitude >= 0.0)
        {
            return Err(CoreError::AttackConfig("channel bounds must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Frames covered by the attack.
    pub fn window(&self) -> std::ops::Range<usize> {
        self.t_attack..self.t_attack + self.delta_attack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        AttackConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            AttackConfig { iters: 0, ..Default::default() },
            AttackConfig { epsilon: 0.0, ..Default::default() },
            AttackConfig { step: -1.0, ..Default::default() },
            AttackConfig { t_attack: 10, ..Default::default() },
            AttackConfig { w_ctx: -0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(CoreError::AttackConfig(_))), "{cfg:?}");
        }
        AttackConfig { iters: 0, ..Default::default() }.validate_bounds().unwrap();
    }
}

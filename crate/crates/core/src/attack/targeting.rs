//! Decoy selection: which non-referent queries the referring loss promotes.

use rmot_autograd::{Tensor, COSINE_EPS};

use super::AttackConfig;
use crate::geometry::BBox;
use crate::trainer::hungarian;

/// Distance stabilizer of the spatial softmax.
pub const SPATIAL_EPS: f64 = 1e-6;

/// Threshold on cosine similarity for semantic decoys.
pub const SEMANTIC_COSINE: f64 = 0.5;

/// Boxes with a side below this are degenerate for context similarity.
pub const MIN_SIDE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMasks {
    /// `None` when no referent is present (skipped).
    pub semantic: Option<Vec<f64>>,
    /// Averaged over referents; `None` when there is no candidate decoy.
    pub spatial: Option<Vec<f64>>,
    pub confidence: Vec<f64>,
    pub context: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Non-referent queries whose embedding is close to some referent's.
pub fn target_semantic(q_final: &Tensor, gt_referent: &[bool]) -> Option<Vec<f64>> {
    let n = gt_referent.len();
    let referents: Vec<usize> = (0..n).filter(|&i| gt_referent[i]).collect();
    if referents.is_empty() {
        return None;
    }
    Some(
        (0..n)
            .map(|j| {
                let hit = !gt_referent[j]
                    && referents.iter().any(|&i| cosine(q_final.row(i), q_final.row(j)) > SEMANTIC_COSINE);
                hit as u8 as f64
            })
            .collect(),
    )
}

/// Softmax of `tau0 / (distance + eps)` over the non-referent queries other
/// than `referent`. Zero elsewhere; `None` without candidates.
pub fn target_spatial(
    centers: &[[f64; 2]],
    referent: usize,
    gt_referent: &[bool],
    tau0: f64,
) -> Option<Vec<f64>> {
    let c = centers[referent];
    let logits: Vec<(usize, f64)> = (0..centers.len())
        .filter(|&j| j != referent && !gt_referent[j])
        .map(|j| {
            let d = ((centers[j][0] - c[0]).powi(2) + (centers[j][1] - c[1]).powi(2)).sqrt();
            (j, tau0 / (d + SPATIAL_EPS))
        })
        .collect();
    let max = logits.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    if logits.is_empty() {
        return None;
    }
    let z: f64 = logits.iter().map(|&(_, l)| (l - max).exp()).sum();
    let mut out = vec![0.0; centers.len()];
    for (j, l) in logits {
        out[j] = (l - max).exp() / z;
    }
    Some(out)
}

/// Mean of [`target_spatial`] over all referents.
pub fn spatial_weights(centers: &[[f64; 2]], gt_referent: &[bool], tau0: f64) -> Option<Vec<f64>> {
    let per: Vec<Vec<f64>> = (0..centers.len())
        .filter(|&i| gt_referent[i])
        .filter_map(|i| target_spatial(centers, i, gt_referent, tau0))
        .collect();
    if per.is_empty() {
        return None;
    }
    let k = per.len() as f64;
    Some((0..centers.len()).map(|j| per.iter().map(|w| w[j]).sum::<f64>() / k).collect())
}

/// The `k` non-referents whose score is closest to 0.5, ties to lower index.
pub fn target_confidence(logits: &[f64], gt_referent: &[bool], k: usize) -> Vec<f64> {
    let mut cand: Vec<(f64, usize)> = (0..logits.len())
        .filter(|&j| !gt_referent[j])
        .map(|j| ((sigmoid(logits[j]) - 0.5).abs(), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![0.0; logits.len()];
    for &(_, j) in cand.iter().take(k) {
        mask[j] = 1.0;
    }
    mask
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pairwise geometric similarity `(size + position + aspect) / 3`.
pub fn target_context(boxes: &[BBox]) -> Vec<Vec<f64>> {
    let n = boxes.len();
    let diag = 2f64.sqrt();
    let ok: Vec<bool> = boxes.iter().map(|b| b.w >= MIN_SIDE && b.h >= MIN_SIDE).collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if !(ok[i] && ok[j]) {
                continue;
            }
            let (a, b) = (&boxes[i], &boxes[j]);
            let size = (-(a.area() / b.area()).ln().abs()).exp();
            let dist = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
            let pos = (-dist / diag).exp();
            let aspect = (-((a.w / a.h) / (b.w / b.h)).ln().abs()).exp();
            let s = (size + pos + aspect) / 3.0;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

impl TargetMasks {
    pub fn compute(
        q_final: &Tensor,
        boxes: &[BBox],
        logits: &[f64],
        gt_referent: &[bool],
        cfg: &AttackConfig,
    ) -> Self {
        let centers: Vec<[f64; 2]> = boxes.iter().map(|b| [b.cx, b.cy]).collect();
        TargetMasks {
            semantic: target_semantic(q_final, gt_referent),
            spatial: spatial_weights(&centers, gt_referent, cfg.tau0),
            confidence: target_confidence(logits, gt_referent, cfg.top_k),
            context: target_context(boxes),
        }
    }

    /// Per-query promotion weight in `[0, 1]`; zero on referents.
    pub fn weights(&self, gt_referent: &[bool], cfg: &AttackConfig) -> Vec<f64> {
        let n = gt_referent.len();
        (0..n)
            .map(|j| {
                if gt_referent[j] {
                    return 0.0;
                }
                let sem = self.semantic.as_ref().map_or(0.0, |m| m[j]);
                let spa = self.spatial.as_ref().map_or(0.0, |m| m[j]);
                let ctx = (0..n)
                    .filter(|&i| gt_referent[i])
                    .map(|i| self.context[i][j])
                    .fold(0.0, f64::max);
                (cfg.w_sem * sem + cfg.w_spa * spa + cfg.w_conf * self.confidence[j] + cfg.w_ctx * ctx)
                    .clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Which queries stand for referents: each ground-truth object is assigned
/// one query by minimum box-L1 matching, and a query is a referent when its
/// object is.
pub fn query_referents(boxes: &[BBox], gt: &[BBox], gt_referent: &[bool]) -> Vec<bool> {
    let cost: Vec<Vec<f64>> = boxes
        .iter()
        .map(|b| {
            gt.iter()
                .map(|g| b.to_array().iter().zip(g.to_array()).map(|(p, q)| (p - q).abs()).sum())
                .collect()
        })
        .collect();
    let mut flags = vec![false; boxes.len()];
    if let Ok(a) = hungarian(&cost) {
        for (j, k) in a.pairs {
            flags[j] = gt_referent[k];
        }
    }
    flags
}

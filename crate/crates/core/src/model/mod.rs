//! Toy referring multi-object tracker: patch encoder, token-embedding text
//! encoder, a decoder stack with temporal, visual and linguistic
//! cross-attention, box and referring heads, and a FIFO query memory.
//!
//! The decoder uses pre-normalized residual blocks. In temporal attention
//! every query attends over all `len·N` stored embeddings, so queries see
//! each other's past. With an empty memory the temporal block contributes
//! nothing, so `Q' = Q`.

mod checkpoint;
mod memory;
mod params;

use std::rc::Rc;

use rmot_autograd::{ReduceKind, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::metrics::{FrameRecord, TrackEntry};
use crate::scenegen::{self, Frame};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use memory::MemoryBuffer;
pub use params::{AttnIdx, LayerIdx, Layout, LinearIdx, NormIdx, ParamSpec};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_queries: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Memory length `T`.
    pub mem_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_queries: 8,
            n_layers: 2,
            ffn_dim: 64,
            patch: 8,
            height: scenegen::FRAME_HEIGHT,
            width: scenegen::FRAME_WIDTH,
            mem_len: 8,
            vocab_size: scenegen::VOCABULARY.len(),
        }
    }
}

impl ModelConfig {
    /// Tiny instance used for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            d_model: 8,
            n_queries: 2,
            n_layers: 2,
            ffn_dim: 16,
            patch: 4,
            height: 8,
            width: 8,
            mem_len: 2,
            vocab_size: scenegen::VOCABULARY.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::ModelConfig(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "frame {}×{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.d_model < 4 || self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.n_queries == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return bad("query count, layer count and FFN width must be positive".into());
        }
        if self.mem_len == 0 {
            return bad("memory length must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return bad("vocabulary is empty".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

/// Live tracker state for one (scene, query) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackerState {
    memory: Option<MemoryBuffer>,
    bindings: Vec<Option<u64>>,
    next_id: u64,
}

impl TrackerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        TrackerState {
            memory: Some(MemoryBuffer::new(cfg.mem_len, cfg.n_queries, cfg.d_model)),
            bindings: vec![None; cfg.n_queries],
            next_id: 1,
        }
    }

    pub fn memory(&self) -> Result<&MemoryBuffer> {
        self.memory.as_ref().ok_or(CoreError::Uninitialized)
    }

    pub fn memory_push(&mut self, q_final: Tensor) -> Result<()> {
        self.memory.as_mut().ok_or(CoreError::Uninitialized)?.push(q_final)
    }

    /// Current track-ID of each query, if it is active.
    pub fn bindings(&self) -> &[Option<u64>] {
        &self.bindings
    }

    /// Applies the persistent-query association rule to this frame's scores.
    fn associate(&mut self, preds: &Predictions, threshold: f64) -> FrameRecord {
        let mut record = Vec::new();
        for (j, &score) in preds.scores.iter().enumerate() {
            if score >= threshold {
                let id = *self.bindings[j].get_or_insert_with(|| {
                    self.next_id += 1;
                    self.next_id - 1
                });
                record.push(TrackEntry { track_id: id, bbox: preds.boxes[j], score });
            } else {
                self.bindings[j] = None;
            }
        }
        record
    }
}

/// Token embeddings and their mean.
#[derive(Debug, Clone, Copy)]
pub struct TextFeatures<'t> {
    pub tokens: Var<'t>,
    pub pooled: Var<'t>,
}

/// Graph-level outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput<'t> {
    pub boxes: Var<'t>,
    pub logits: Var<'t>,
    pub scores: Var<'t>,
    pub q_final: Var<'t>,
    /// Last-layer visual attention, `N×P`.
    pub visual_attn: Var<'t>,
    /// Last-layer linguistic attention, `N×L`.
    pub text_attn: Var<'t>,
}

/// Value-level predictions of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub boxes: Vec<BBox>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub q_final: Tensor,
    pub visual_attn: Tensor,
    pub text_attn: Tensor,
}

impl Predictions {
    pub fn from_output(out: &ForwardOutput<'_>) -> Self {
        Predictions {
            boxes: out.boxes.value().data().chunks(4).map(BBox::from_slice).collect(),
            logits: out.logits.value().into_data(),
            scores: out.scores.value().into_data(),
            q_final: out.q_final.value(),
            visual_attn: out.visual_attn.value(),
            text_attn: out.text_attn.value(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmotModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
    positional: Tensor,
    patch_centers: Tensor,
    patch_index: Vec<usize>,
}

impl RmotModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(seed);
        Ok(Self::assemble(config, layout, params))
    }

    pub(crate) fn assemble(config: ModelConfig, layout: Layout, params: Vec<Tensor>) -> Self {
        RmotModel {
            positional: positional_encoding(&config),
            patch_centers: patch_centers(&config),
            patch_index: patch_indices(&config),
            config,
            layout,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn new_state(&self) -> TrackerState {
        TrackerState::new(&self.config)
    }

    /// Records every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.variable(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Patch projection plus fixed positional encoding: `H×W×3` → `P×d`.
    pub fn encode_frame<'t>(&self, p: &[Var<'t>], frame: Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        if frame.shape() != [c.height, c.width, 3] {
            return Err(CoreError::Invalid(format!(
                "frame must be {}×{}×3, got {:?}",
                c.height,
                c.width,
                frame.shape()
            )));
        }
        let patches =
            frame.gather(Rc::from(&self.patch_index[..]), &[c.n_patches(), c.patch * c.patch * 3])?;
        let tape = frame.tape();
        Ok(linear(patches, p, self.layout.patch)?.add(tape.constant(self.positional.clone()))?)
    }

    pub fn encode_text<'t>(&self, p: &[Var<'t>], tokens: &[usize]) -> Result<TextFeatures<'t>> {
        let d = self.config.d_model;
        if tokens.is_empty() {
            return Err(CoreError::Invalid("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CoreError::UnknownToken(format!("#{bad}")));
        }
        let idx: Rc<[usize]> = tokens.iter().flat_map(|&t| (t * d)..(t * d + d)).collect();
        let emb = p[self.layout.token_emb].gather(idx, &[tokens.len(), d])?;
        let pooled = emb.reduce(ReduceKind::Mean, Some(0))?;
        Ok(TextFeatures { tokens: emb, pooled })
    }

    /// Encodes string tokens, rejecting any outside the vocabulary.
    pub fn encode_tokens<'t>(&self, p: &[Var<'t>], tokens: &[String]) -> Result<TextFeatures<'t>> {
        let ids = tokens.iter().map(|t| scenegen::token_index(t)).collect::<Result<Vec<_>>>()?;
        self.encode_text(p, &ids)
    }

    /// One decoder layer. `memory` is `len×N×d` or `None` when empty.
    /// Returns the updated queries and the visual and linguistic attention.
    pub fn decoder_layer<'t>(
        &self,
        p: &[Var<'t>],
        layer: &LayerIdx,
        q: Var<'t>,
        memory: Option<Var<'t>>,
        fv: Var<'t>,
        fl: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let q = self.temporal_block(p, layer, q, memory)?;
        let x = norm(q, p, layer.norm_visual)?;
        let (out, visual_attn) = cross_attention(p, &layer.visual, x, fv)?;
        let q = q.add(out)?;
        let x = norm(q, p, layer.norm_text)?;
        let (out, text_attn) = cross_attention(p, &layer.text, x, fl)?;
        let q = q.add(out)?;
        let x = norm(q, p, layer.norm_ffn)?;
        let h = linear(x, p, layer.ffn1)?.relu();
        let q = q.add(linear(h, p, layer.ffn2)?)?;
        Ok((q, visual_attn, text_attn))
    }

    /// Residual temporal attention; the identity when `memory` is `None`.
    pub fn temporal_block<'t>(
        &self,
        p: &[Var<'t>],
        layer: &LayerIdx,
        q: Var<'t>,
        memory: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        match memory {
            Some(h) => {
                let x = norm(q, p, layer.norm_temporal)?;
                Ok(q.add(temporal_attention(p, &layer.temporal, x, h)?)?)
            }
            None => Ok(q),
        }
    }

    /// Full pipeline on recorded inputs. `memory` holds `N×d` slots, oldest first.
    pub fn forward_graph<'t>(
        &self,
        p: &[Var<'t>],
        frame: Var<'t>,
        text: &TextFeatures<'t>,
        memory: &[Var<'t>],
    ) -> Result<ForwardOutput<'t>> {
        let c = &self.config;
        let tape = frame.tape();
        let fv = self.encode_frame(p, frame)?;
        let hist = if memory.is_empty() {
            None
        } else {
            Some(tape.stack(memory)?)
        };
        let mut q = p[self.layout.queries].add(text.pooled)?;
        let mut maps = None;
        for layer in &self.layout.layers {
            let (nq, va, ta) = self.decoder_layer(p, layer, q, hist, fv, text.tokens)?;
            q = nq;
            maps = Some((va, ta));
        }
        let (visual_attn, text_attn) = maps.expect("at least one decoder layer");
        let q_final = norm(q, p, self.layout.norm_final)?;
        let raw = linear(linear(q_final, p, self.layout.box1)?.relu(), p, self.layout.box2)?;
        let boxes = raw.add(self.anchor_logits(p, visual_attn, fv)?)?.sigmoid();
        let logits = linear(linear(q_final, p, self.layout.ref1)?.relu(), p, self.layout.ref2)?
            .reshape(&[c.n_queries])?;
        let scores = logits.sigmoid();
        Ok(ForwardOutput { boxes, logits, scores, q_final, visual_attn, text_attn })
    }

    /// Box-center prior: the expected patch center under the last-layer
    /// visual attention, in logit space, placed in the `(cx, cy)` columns.
    /// Each patch center is shifted by up to half a patch according to the
    /// patch's own features.
    fn anchor_logits<'t>(&self, p: &[Var<'t>], attn: Var<'t>, fv: Var<'t>) -> Result<Var<'t>> {
        let tape = attn.tape();
        let c = &self.config;
        let span = Tensor::new(vec![1, 2], vec![c.patch as f64 / c.width as f64, c.patch as f64 / c.height as f64])?;
        let shift = linear(fv, p, self.layout.box_offset)?.sigmoid().offset(-0.5).mul(tape.constant(span))?;
        let centers = tape.constant(self.patch_centers.clone()).add(shift)?;
        let center = attn.matmul(centers)?;
        let logit = center.log()?.sub(center.neg().offset(1.0).log()?)?;
        let place = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
        Ok(logit.matmul(tape.constant(place))?)
    }

    /// Pure forward pass from `state`; the state is not modified.
    pub fn forward(&self, frame: &Frame, tokens: &[String], state: &TrackerState) -> Result<Predictions> {
        let memory = state.memory()?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let text = self.encode_tokens(&p, tokens)?;
        let x = tape.constant(frame.to_tensor());
        let mem: Vec<Var<'_>> = memory.slots().map(|s| tape.constant(s.clone())).collect();
        let out = self.forward_graph(&p, x, &text, &mem)?;
        Ok(Predictions::from_output(&out))
    }

    /// Predicts, applies the association rule and pushes the final queries.
    pub fn track_step(
        &self,
        frame: &Frame,
        tokens: &[String],
        state: &mut TrackerState,
        threshold: f64,
    ) -> Result<FrameRecord> {
        let preds = self.forward(frame, tokens, state)?;
        let record = state.associate(&preds, threshold);
        state.memory_push(preds.q_final)?;
        Ok(record)
    }

    /// Tracks a whole frame sequence from a fresh state.
    pub fn track_sequence(
        &self,
        frames: &[Frame],
        tokens: &[String],
        threshold: f64,
    ) -> Result<Vec<FrameRecord>> {
        let mut state = self.new_state();
        frames.iter().map(|f| self.track_step(f, tokens, &mut state, threshold)).collect()
    }
}

/// Applies the tracker's association rule to an externally computed
/// prediction sequence (for instance one replayed on a tape).
pub fn associate_sequence(preds: &[Predictions], cfg: &ModelConfig, threshold: f64) -> Vec<FrameRecord> {
    let mut state = TrackerState::new(cfg);
    preds.iter().map(|p| state.associate(p, threshold)).collect()
}

fn linear<'t>(x: Var<'t>, p: &[Var<'t>], idx: LinearIdx) -> Result<Var<'t>> {
    Ok(x.matmul(p[idx.w])?.add(p[idx.b])?)
}

fn norm<'t>(x: Var<'t>, p: &[Var<'t>], idx: NormIdx) -> Result<Var<'t>> {
    Ok(x.layer_norm(LAYER_NORM_EPS)?.mul(p[idx.gain])?.add(p[idx.bias])?)
}

/// Single-head scaled dot-product attention of `x` (`N×d`) over `f` (`M×d`).
/// Returns the projected output and the `N×M` attention weights.
pub fn cross_attention<'t>(
    p: &[Var<'t>],
    idx: &AttnIdx,
    x: Var<'t>,
    f: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    attention(x.matmul(p[idx.wq])?, f.matmul(p[idx.wk])?, f.matmul(p[idx.wv])?, p[idx.wo])
}

/// Attention from projected queries `q` (`N×d`), keys `k` and values `v`
/// (`M×d`), with output projection `wo`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, wo: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let d = q.shape()[1] as f64;
    let weights = q.matmul(k.transpose()?)?.scale(1.0 / d.sqrt()).softmax(1)?;
    Ok((weights.matmul(v)?.matmul(wo)?, weights))
}

/// Every query attends over every stored embedding of `h` (`len×N×d`).
fn temporal_attention<'t>(p: &[Var<'t>], idx: &AttnIdx, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let shape = h.shape();
    let flat = h.reshape(&[shape[0] * shape[1], shape[2]])?;
    let (out, _) = attention(x.matmul(p[idx.wq])?, flat.matmul(p[idx.wk])?, flat.matmul(p[idx.wv])?, p[idx.wo])?;
    Ok(out)
}

/// Flat indices mapping `H×W×3` pixels to `P×(patch·patch·3)` rows.
fn patch_indices(c: &ModelConfig) -> Vec<usize> {
    let (gh, gw, s) = (c.height / c.patch, c.width / c.patch, c.patch);
    let mut idx = Vec::with_capacity(c.height * c.width * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..s {
                for dx in 0..s {
                    let pix = (py * s + dy) * c.width + px * s + dx;
                    idx.extend((0..3).map(|ch| pix * 3 + ch));
                }
            }
        }
    }
    idx
}

/// Normalized `(x, y)` center of every patch, `P×2`.
fn patch_centers(c: &ModelConfig) -> Tensor {
    let (gh, gw) = (c.height / c.patch, c.width / c.patch);
    let data = (0..gh)
        .flat_map(|py| {
            (0..gw).flat_map(move |px| [(px as f64 + 0.5) / gw as f64, (py as f64 + 0.5) / gh as f64])
        })
        .collect();
    Tensor::new(vec![gh * gw, 2], data).expect("patch center shape")
}

/// Sinusoidal 2-D encoding: the first half of the channels encode the patch
/// column, the second half the row, at octave frequencies over the unit span.
fn positional_encoding(c: &ModelConfig) -> Tensor {
    let (gh, gw, d) = (c.height / c.patch, c.width / c.patch, c.d_model);
    let half = d / 2;
    let mut data = Vec::with_capacity(gh * gw * d);
    for py in 0..gh {
        for px in 0..gw {
            let x = (px as f64 + 0.5) / gw as f64;
            let y = (py as f64 + 0.5) / gh as f64;
            for (pos, _) in [(x, 0), (y, 1)] {
                for k in 0..half / 2 {
                    let w = std::f64::consts::PI * (1u64 << k) as f64;
                    data.push((w * pos).sin());
                    data.push((w * pos).cos());
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data).expect("positional encoding shape")
}

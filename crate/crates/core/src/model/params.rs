use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmot_autograd::Tensor;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform with variance `gain²/fan_in`.
    Fan { fan_in: usize, gain: f64 },
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub temporal: AttnIdx,
    pub visual: AttnIdx,
    pub text: AttnIdx,
    pub norm_temporal: NormIdx,
    pub norm_visual: NormIdx,
    pub norm_text: NormIdx,
    pub norm_ffn: NormIdx,
    pub ffn1: LinearIdx,
    pub ffn2: LinearIdx,
}

/// Positions of every parameter tensor in the flat parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub patch: LinearIdx,
    pub token_emb: usize,
    pub queries: usize,
    pub layers: Vec<LayerIdx>,
    pub norm_final: NormIdx,
    pub box1: LinearIdx,
    pub box2: LinearIdx,
    /// Per-patch refinement of the patch center used by the box anchor.
    pub box_offset: LinearIdx,
    pub ref1: LinearIdx,
    pub ref2: LinearIdx,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let d = cfg.d_model;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          gain: f64| LinearIdx {
            w: add(format!("{name}.w"), vec![fan_in, fan_out], Init::Fan { fan_in, gain }),
            b: add(format!("{name}.b"), vec![fan_out], Init::Const(0.0)),
        };
        let patch = linear(&mut add, "patch", patch_dim, d, 1.0);
        let token_emb = add("token_emb".into(), vec![cfg.vocab_size, d], Init::Uniform(1.0));
        let queries = add("queries".into(), vec![cfg.n_queries, d], Init::Uniform(1.7));

        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, kind: &str| {
                let mut w = |m: &str, gain: f64| {
                    add(format!("layer{l}.{kind}.{m}"), vec![d, d], Init::Fan { fan_in: d, gain })
                };
                AttnIdx { wq: w("wq", 1.0), wk: w("wk", 1.0), wv: w("wv", 1.0), wo: w("wo", 0.5) }
            };
            let temporal = attn(&mut add, "temporal");
            let visual = attn(&mut add, "visual");
            let text = attn(&mut add, "text");
            let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, kind: &str| NormIdx {
                gain: add(format!("layer{l}.norm_{kind}.gain"), vec![d], Init::Const(1.0)),
                bias: add(format!("layer{l}.norm_{kind}.bias"), vec![d], Init::Const(0.0)),
            };
            let norm_temporal = norm(&mut add, "temporal");
            let norm_visual = norm(&mut add, "visual");
            let norm_text = norm(&mut add, "text");
            let norm_ffn = norm(&mut add, "ffn");
            let ffn1 = linear(&mut add, &format!("layer{l}.ffn1"), d, cfg.ffn_dim, 2f64.sqrt());
            let ffn2 = linear(&mut add, &format!("layer{l}.ffn2"), cfg.ffn_dim, d, 0.5);
            layers.push(LayerIdx {
                temporal,
                visual,
                text,
                norm_temporal,
                norm_visual,
                norm_text,
                norm_ffn,
                ffn1,
                ffn2,
            });
        }
        let norm_final = NormIdx {
            gain: add("norm_final.gain".into(), vec![d], Init::Const(1.0)),
            bias: add("norm_final.bias".into(), vec![d], Init::Const(0.0)),
        };
        let box1 = linear(&mut add, "box1", d, d, 2f64.sqrt());
        let box2 = linear(&mut add, "box2", d, 4, 0.5);
        let box_offset = linear(&mut add, "box_offset", d, 2, 0.5);
        let ref1 = linear(&mut add, "ref1", d, d, 2f64.sqrt());
        let ref2 = linear(&mut add, "ref2", d, 1, 0.5);
        Layout { specs, patch, token_emb, queries, layers, norm_final, box1, box2, box_offset, ref1, ref2 }
    }

    pub fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Fan { fan_in, gain } => {
                        let a = gain * (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
                    Init::Const(c) => vec![c; n],
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape matches data")
            })
            .collect()
    }
}

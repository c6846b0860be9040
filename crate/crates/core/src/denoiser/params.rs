use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DenoiserConfig;
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) -> usize {
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// `x W + b`, optionally plus a low-rank update `(x A) B * scale`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub adapter: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct StreamLayers {
    pub ada: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub image: StreamLayers,
    pub context: StreamLayers,
}

/// Parameter indices of every layer.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub image_in: Linear,
    pub text_in: Linear,
    pub id_in: Linear,
    pub detail_in: Linear,
    pub text_pos: usize,
    pub id_pos: Option<usize>,
    /// Type embeddings for text, identity and detail tokens.
    pub type_emb: [usize; 3],
    pub time_1: Linear,
    pub time_2: Linear,
    pub blocks: Vec<Block>,
    pub final_ada: Linear,
    pub out: Linear,
    pub adapter_scale: f64,
}

struct Builder<'a> {
    store: ParamStore,
    rng: ChaCha8Rng,
    rank: usize,
    cfg: &'a DenoiserConfig,
}

impl Builder<'_> {
    fn tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, std, &mut self.rng)
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, zero: bool, adapter: bool) -> Linear {
        let std = if zero { 0.0 } else { 1.0 / (i as f64).sqrt() };
        let wt = self.tensor(&[i, o], std);
        let w = self.store.push(format!("{name}.weight"), ParamKind::Base, wt);
        let b = self.store.push(format!("{name}.bias"), ParamKind::Base, Tensor::zeros(&[o]));
        let adapter = adapter.then(|| {
            let a = self.tensor(&[i, self.rank], 1.0 / (i as f64).sqrt());
            let a = self.store.push(format!("{name}.adapter_a"), ParamKind::Adapter, a);
            let b = self.store.push(
                format!("{name}.adapter_b"),
                ParamKind::Adapter,
                Tensor::zeros(&[self.rank, o]),
            );
            (a, b)
        });
        Linear { w, b, adapter }
    }

    fn stream(&mut self, prefix: &str) -> StreamLayers {
        let d = self.cfg.d_model;
        let h = d * self.cfg.mlp_ratio;
        StreamLayers {
            ada: self.linear(&format!("{prefix}.ada"), d, 6 * d, true, false),
            q: self.linear(&format!("{prefix}.q"), d, d, false, true),
            k: self.linear(&format!("{prefix}.k"), d, d, false, true),
            v: self.linear(&format!("{prefix}.v"), d, d, false, true),
            o: self.linear(&format!("{prefix}.o"), d, d, false, true),
            mlp_in: self.linear(&format!("{prefix}.mlp_in"), d, h, false, false),
            mlp_out: self.linear(&format!("{prefix}.mlp_out"), h, d, false, false),
        }
    }
}

pub(crate) fn init(cfg: &DenoiserConfig) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let mut b = Builder {
        store: ParamStore {
            names: vec![],
            kinds: vec![],
            values: vec![],
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1f_f05e),
        rank: cfg.adapter_rank,
        cfg,
    };
    let image_in = b.linear("image_in", 2 * cfg.latent_dim() + 1, d, false, false);
    let text_in = b.linear("text_in", d, d, false, false);
    let id_in = b.linear("id_in", d, d, false, false);
    let detail_in = b.linear("detail_in", d, d, false, false);
    let pos = b.tensor(&[cfg.max_text_tokens, d], 0.02);
    let text_pos = b.store.push("text_pos".into(), ParamKind::Base, pos);
    let id_pos = cfg.id_positions.then(|| {
        let t = b.tensor(&[64, d], 0.02);
        b.store.push("id_pos".into(), ParamKind::Base, t)
    });
    let mut type_emb = [0; 3];
    for (slot, name) in type_emb.iter_mut().zip(["text", "id", "detail"]) {
        let t = b.tensor(&[d], 0.02);
        *slot = b.store.push(format!("type.{name}"), ParamKind::Base, t);
    }
    let time_1 = b.linear("time_1", d, d, false, false);
    let time_2 = b.linear("time_2", d, d, false, false);
    let blocks = (0..cfg.blocks)
        .map(|i| Block {
            image: b.stream(&format!("block{i}.image")),
            context: b.stream(&format!("block{i}.context")),
        })
        .collect();
    let final_ada = b.linear("final_ada", d, 2 * d, true, false);
    let out = b.linear("out", d, cfg.latent_dim(), true, false);
    let layout = Layout {
        image_in,
        text_in,
        id_in,
        detail_in,
        text_pos,
        id_pos,
        type_emb,
        time_1,
        time_2,
        blocks,
        final_ada,
        out,
        adapter_scale: 1.0,
    };
    (b.store, layout)
}

/// Parameters placed on a tape.
pub(crate) struct Bound<'a> {
    pub vars: Vec<Var>,
    pub layout: &'a Layout,
}

impl<'a> Bound<'a> {
    /// Puts every parameter on `tape`; `trainable` decides which receive gradients.
    pub fn new(tape: &mut Tape, store: &ParamStore, layout: &'a Layout, trainable: impl Fn(ParamKind) -> bool) -> Self {
        let vars = store
            .values
            .iter()
            .zip(&store.kinds)
            .map(|(v, &k)| tape.leaf(v.clone(), trainable(k)))
            .collect();
        Self { vars, layout }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn linear(&self, tape: &mut Tape, l: &Linear, x: Var) -> Var {
        let y = tape.matmul(x, self.vars[l.w]);
        let y = match l.adapter {
            Some((a, b)) => {
                let low = tape.matmul(x, self.vars[a]);
                let up = tape.matmul(low, self.vars[b]);
                let up = tape.scale(up, self.layout.adapter_scale);
                tape.add(y, up)
            }
            None => y,
        };
        tape.add_row(y, self.vars[l.b])
    }
}

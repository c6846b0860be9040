use std::rc::Rc;

use crate::attention::ModulationVariant;
use crate::autodiff::{ModulationPlan, Tape, Var};
use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{init, Bound, Layout, Linear, ParamKind, ParamStore, StreamLayers};
use super::{DenoiserConfig, NoiseSchedule};

/// Shape-aware modulation settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Modulation {
    pub variant: ModulationVariant,
    pub alpha: f64,
}

/// Per-block, per-head attention of image queries to the foreground words
/// and to the identity tokens, averaged over each key group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionCapture {
    pub slices: Vec<CapturedSlice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSlice {
    pub block: usize,
    pub head: usize,
    pub foreground_text: Vec<f64>,
    pub identity: Vec<f64>,
}

/// Configuration, parameters and schedule of the toy denoiser.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = init(&config);
        let schedule = NoiseSchedule::cosine(config.schedule_steps)?;
        Ok(Self {
            config,
            params,
            layout,
            schedule,
        })
    }

    /// Replaces the parameter values, keeping names and shapes.
    pub fn load_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len()
            || values.iter().zip(&self.params.values).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config("parameter shapes do not match the configuration".into()));
        }
        self.params.values = values;
        Ok(())
    }

    pub(crate) fn check_bundle(&self, bundle: &ConditioningBundle, z_t: &Tensor) -> Result<()> {
        let c = &self.config;
        bundle.validate()?;
        let n = c.grid().0 * c.grid().1;
        if bundle.grid != c.grid() || z_t.shape() != [n, c.latent_dim()] {
            return Err(Error::Shape(format!(
                "latent {:?} on grid {:?} does not match the configured {:?}",
                z_t.shape(),
                bundle.grid,
                c.grid()
            )));
        }
        if bundle.d_model() != c.d_model || bundle.background_latent.cols() != c.latent_dim() {
            return Err(Error::Config("bundle widths do not match the configuration".into()));
        }
        if bundle.text_tokens.rows() > c.max_text_tokens {
            return Err(Error::Config(format!(
                "{} text tokens exceed the limit {}",
                bundle.text_tokens.rows(),
                c.max_text_tokens
            )));
        }
        if c.id_positions && bundle.id_tokens.rows() > 64 {
            return Err(Error::Config("too many identity tokens for learned positions".into()));
        }
        Ok(())
    }
}

pub(crate) struct ForwardInputs<'a> {
    pub z_t: &'a Tensor,
    pub t: usize,
    pub bundle: &'a ConditioningBundle,
    /// False drops text, identity and detail tokens.
    pub conditional: bool,
    pub modulation: Option<Modulation>,
}

fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// 2-D sinusoidal positions: the first half encodes the row, the second the column.
pub(crate) fn grid_positions(rows: usize, cols: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(sinusoid(r as f64, d / 2));
            data.extend(sinusoid(c as f64, d - d / 2));
        }
    }
    Tensor::new(vec![rows * cols, d], data).expect("grid positions")
}

fn adaln(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
    let n = tape.layer_norm_rows(x, 1e-6);
    let s = tape.add_scalar(scale, 1.0);
    let y = tape.mul_row(n, s);
    tape.add_row(y, shift)
}

struct StreamState {
    x: Var,
    ada: Vec<Var>,
}

fn stream_ada(tape: &mut Tape, p: &Bound<'_>, layers: &StreamLayers, c: Var, x: Var, d: usize) -> StreamState {
    let a = p.linear(tape, &layers.ada, c);
    let ada = (0..6).map(|i| tape.slice_cols(a, i * d, (i + 1) * d)).collect();
    StreamState { x, ada }
}

fn mlp(tape: &mut Tape, p: &Bound<'_>, layers: &StreamLayers, s: &mut StreamState) {
    let h = adaln(tape, s.x, s.ada[3], s.ada[4]);
    let h = p.linear(tape, &layers.mlp_in, h);
    let h = tape.silu(h);
    let h = p.linear(tape, &layers.mlp_out, h);
    let h = tape.mul_row(h, s.ada[5]);
    s.x = tape.add(s.x, h);
}

fn embed(tape: &mut Tape, p: &Bound<'_>, l: &Linear, tokens: &Tensor, type_emb: usize) -> Var {
    let x = tape.constant(tokens.clone());
    let x = p.linear(tape, l, x);
    tape.add_row(x, p.var(type_emb))
}

pub(crate) fn forward(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    inputs: &ForwardInputs<'_>,
    mut capture: Option<&mut AttentionCapture>,
) -> Result<Var> {
    let layout: &Layout = p.layout;
    let b = inputs.bundle;
    let d = cfg.d_model;
    let n = b.image_tokens();
    let ld = cfg.latent_dim();
    let modulation = match (inputs.modulation, inputs.conditional) {
        (Some(m), true) => match &b.shape_mask {
            Some(mask) => Some((m, mask)),
            None => return Err(Error::Config("modulation needs a shape mask".into())),
        },
        _ => None,
    };

    let mut image_in = Vec::with_capacity(n * (2 * ld + 1));
    for i in 0..n {
        image_in.extend_from_slice(inputs.z_t.row(i));
        image_in.extend_from_slice(b.background_latent.row(i));
        image_in.push(b.region_mask[i]);
    }
    let x = tape.constant(Tensor::new(vec![n, 2 * ld + 1], image_in)?);
    let x = p.linear(tape, &layout.image_in, x);
    let pos = tape.constant(grid_positions(b.grid.0, b.grid.1, d));
    let x_img = tape.add(x, pos);

    let (ctx, n_text, n_id) = if inputs.conditional {
        let t_rows = b.text_tokens.rows();
        let text = embed(tape, p, &layout.text_in, &b.text_tokens, layout.type_emb[0]);
        let tp = tape.slice_rows(p.var(layout.text_pos), 0, t_rows);
        let text = tape.add(text, tp);
        let mut id = embed(tape, p, &layout.id_in, &b.id_tokens, layout.type_emb[1]);
        if let Some(ip) = layout.id_pos {
            let ip = tape.slice_rows(p.var(ip), 0, b.id_tokens.rows());
            id = tape.add(id, ip);
        }
        let detail = embed(tape, p, &layout.detail_in, &b.detail_tokens, layout.type_emb[2]);
        let ctx = tape.concat_rows(&[text, id, detail]);
        (Some(ctx), t_rows, b.id_tokens.rows())
    } else {
        (None, 0, 0)
    };

    let ts = schedule.steps() as f64;
    let temb = tape.constant(Tensor::new(vec![1, d], sinusoid(inputs.t as f64 * 1000.0 / ts, d))?);
    let c = p.linear(tape, &layout.time_1, temb);
    let c = tape.silu(c);
    let c = p.linear(tape, &layout.time_2, c);
    let c = tape.silu(c);

    let plan = modulation.map(|(m, mask)| {
        Rc::new(ModulationPlan {
            rows: (0..n).collect(),
            groups: vec![
                b.fg_token_indices.iter().map(|&i| n + i).collect(),
                (n + n_text..n + n_text + n_id).collect(),
            ],
            mask: mask.clone(),
            alpha: m.alpha,
            variant: m.variant,
        })
    });

    let heads = cfg.heads;
    let dh = d / heads;
    let mut img = StreamState { x: x_img, ada: vec![] };
    let mut ctx_state = ctx.map(|x| StreamState { x, ada: vec![] });
    for (bi, block) in layout.blocks.iter().enumerate() {
        img = stream_ada(tape, p, &block.image, c, img.x, d);
        if let Some(s) = ctx_state.take() {
            ctx_state = Some(stream_ada(tape, p, &block.context, c, s.x, d));
        }
        let qkv = |tape: &mut Tape, s: &StreamState, l: &StreamLayers| {
            let h = adaln(tape, s.x, s.ada[0], s.ada[1]);
            (p.linear(tape, &l.q, h), p.linear(tape, &l.k, h), p.linear(tape, &l.v, h))
        };
        let (qi, ki, vi) = qkv(tape, &img, &block.image);
        let (q, k, v) = match &ctx_state {
            Some(s) => {
                let (qc, kc, vc) = qkv(tape, s, &block.context);
                (
                    tape.concat_rows(&[qi, qc]),
                    tape.concat_rows(&[ki, kc]),
                    tape.concat_rows(&[vi, vc]),
                )
            }
            None => (qi, ki, vi),
        };
        let block_plan = plan.as_ref().filter(|_| cfg.modulation.applies_to(bi));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let mut probs = tape.softmax_rows(scores);
            if let Some(plan) = block_plan {
                probs = tape.modulate(probs, plan.clone());
            }
            if let (Some(cap), true) = (capture.as_deref_mut(), inputs.conditional) {
                let pv = tape.value(probs);
                let mean_over = |cols: &[usize]| -> Vec<f64> {
                    (0..n)
                        .map(|r| cols.iter().map(|&c| pv.get(r, c)).sum::<f64>() / cols.len().max(1) as f64)
                        .collect()
                };
                let fg: Vec<usize> = b.fg_token_indices.iter().map(|&i| n + i).collect();
                let ids: Vec<usize> = (n + n_text..n + n_text + n_id).collect();
                cap.slices.push(CapturedSlice {
                    block: bi,
                    head: h,
                    foreground_text: mean_over(&fg),
                    identity: mean_over(&ids),
                });
            }
            outs.push(tape.matmul(probs, vh));
        }
        let att = tape.concat_cols(&outs);
        let total = tape.shape(att)[0];
        let att_img = tape.slice_rows(att, 0, n);
        let o = p.linear(tape, &block.image.o, att_img);
        let o = tape.mul_row(o, img.ada[2]);
        img.x = tape.add(img.x, o);
        mlp(tape, p, &block.image, &mut img);
        if let Some(s) = ctx_state.as_mut() {
            let att_ctx = tape.slice_rows(att, n, total);
            let o = p.linear(tape, &block.context.o, att_ctx);
            let o = tape.mul_row(o, s.ada[2]);
            s.x = tape.add(s.x, o);
            mlp(tape, p, &block.context, s);
        }
    }

    let fa = p.linear(tape, &layout.final_ada, c);
    let shift = tape.slice_cols(fa, 0, d);
    let scale = tape.slice_cols(fa, d, 2 * d);
    let h = adaln(tape, img.x, shift, scale);
    Ok(p.linear(tape, &layout.out, h))
}

/// One network evaluation without gradients.
pub fn denoise_step(
    model: &Denoiser,
    z_t: &Tensor,
    t: usize,
    bundle: &ConditioningBundle,
    modulation: Option<Modulation>,
) -> Result<Tensor> {
    predict(model, z_t, t, bundle, true, modulation, None)
}

pub(crate) fn predict(
    model: &Denoiser,
    z_t: &Tensor,
    t: usize,
    bundle: &ConditioningBundle,
    conditional: bool,
    modulation: Option<Modulation>,
    capture: Option<&mut AttentionCapture>,
) -> Result<Tensor> {
    model.check_bundle(bundle, z_t)?;
    if t == 0 || t > model.schedule.steps() {
        return Err(Error::Parameter(format!("timestep {t} outside 1..={}", model.schedule.steps())));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, &model.layout, |_: ParamKind| false);
    let inputs = ForwardInputs {
        z_t,
        t,
        bundle,
        conditional,
        modulation,
    };
    let out = forward(&mut tape, &bound, &model.config, &model.schedule, &inputs, capture)?;
    Ok(tape.value(out).clone())
}

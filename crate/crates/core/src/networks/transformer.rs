use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

use super::init_uniform;

/// Additive stand-in for minus infinity in the attention mask.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub seq_len: usize,
    pub features: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [self.layers, self.heads, self.width, self.ff_width, self.seq_len, self.features];
        if extents.contains(&0) {
            return Err(invalid(format!("transformer extents must be >= 1: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Which of the three specializations a transformer is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Predicts diffusion noise; has a diffusion-step embedding table.
    Denoiser { diffusion_steps: usize },
    /// Autoregressive refiner, sequence in, sequence out.
    Supervisor,
    /// Sequence in, one unconstrained score out.
    Critic,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Denoiser { .. } => "denoiser",
            ModelKind::Supervisor => "supervisor",
            ModelKind::Critic => "critic",
        }
    }
}

/// `M[i][j] = 0` for `j <= i`, [`MASK_VALUE`] above the diagonal.
pub fn causal_mask(seq_len: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * seq_len];
    for i in 0..seq_len {
        for j in i + 1..seq_len {
            data[i * seq_len + j] = MASK_VALUE;
        }
    }
    Tensor::new(data, &[seq_len, seq_len]).expect("square mask")
}

#[derive(Clone, Debug)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// Masked-attention transformer shared by the denoiser, supervisor and
/// critic. Only the time embedding and the output head differ between them.
#[derive(Clone, Debug)]
pub struct MaskedTransformer {
    config: TransformerConfig,
    kind: ModelKind,
    causal: bool,
    pub params: ParamStore,
    input_w: ParamId,
    input_b: ParamId,
    pos: ParamId,
    time: Option<ParamId>,
    blocks: Vec<BlockParams>,
    head_w: ParamId,
    head_b: ParamId,
}

impl MaskedTransformer {
    pub fn new(config: TransformerConfig, kind: ModelKind, rng: &mut Rng) -> Result<MaskedTransformer> {
        config.validate()?;
        let TransformerConfig {
            width: d,
            ff_width: dff,
            seq_len,
            features: f,
            ..
        } = config;
        let mut ps = ParamStore::new();
        let input_w = ps.insert("input.w", init_uniform(rng, &[f, d], f)?);
        let input_b = ps.insert("input.b", Tensor::zeros(&[d]));
        let pos = ps.insert("pos_embedding", Tensor::zeros(&[seq_len, d]));
        let time = match kind {
            ModelKind::Denoiser { diffusion_steps } => {
                if diffusion_steps == 0 {
                    return Err(invalid("denoiser needs at least one diffusion step"));
                }
                Some(ps.insert("time_embedding", Tensor::zeros(&[diffusion_steps, d])))
            }
            _ => None,
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockParams {
                wq: ps.insert(p("attn.wq"), init_uniform(rng, &[d, d], d)?),
                wk: ps.insert(p("attn.wk"), init_uniform(rng, &[d, d], d)?),
                wv: ps.insert(p("attn.wv"), init_uniform(rng, &[d, d], d)?),
                wo: ps.insert(p("attn.wo"), init_uniform(rng, &[d, d], d)?),
                bo: ps.insert(p("attn.bo"), Tensor::zeros(&[d])),
                ln1_gamma: ps.insert(p("ln1.gamma"), Tensor::ones(&[d])),
                ln1_beta: ps.insert(p("ln1.beta"), Tensor::zeros(&[d])),
                w1: ps.insert(p("ffn.w1"), init_uniform(rng, &[d, dff], d)?),
                b1: ps.insert(p("ffn.b1"), Tensor::zeros(&[dff])),
                w2: ps.insert(p("ffn.w2"), init_uniform(rng, &[dff, d], dff)?),
                b2: ps.insert(p("ffn.b2"), Tensor::zeros(&[d])),
                ln2_gamma: ps.insert(p("ln2.gamma"), Tensor::ones(&[d])),
                ln2_beta: ps.insert(p("ln2.beta"), Tensor::zeros(&[d])),
            });
        }
        let out = match kind {
            ModelKind::Critic => 1,
            _ => f,
        };
        let head_w = ps.insert("head.w", init_uniform(rng, &[d, out], d)?);
        let head_b = ps.insert("head.b", Tensor::zeros(&[out]));
        Ok(MaskedTransformer {
            config,
            kind,
            causal: true,
            params: ps,
            input_w,
            input_b,
            pos,
            time,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn denoiser(config: TransformerConfig, diffusion_steps: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(config, ModelKind::Denoiser { diffusion_steps }, rng)
    }

    pub fn supervisor(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(config, ModelKind::Supervisor, rng)
    }

    pub fn critic(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(config, ModelKind::Critic, rng)
    }

    /// Turns the causal mask off (full bidirectional attention) or back on.
    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn set_causal(&mut self, causal: bool) {
        self.causal = causal;
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    fn p(&self, id: ParamId) -> &Tensor {
        self.params.param(id)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.features || s[1] == 0 || s[1] > self.config.seq_len {
            return Err(invalid(format!(
                "{} expects (batch, <= {}, {}) input, got {:?}",
                self.kind.label(),
                self.config.seq_len,
                self.config.features,
                s
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Input projection plus positional rows, plus the diffusion-step row
    /// (1-based `taus`, one per batch element or one shared) for the denoiser.
    pub fn embed(&self, x: &Tensor, taus: Option<&[usize]>) -> Result<Tensor> {
        let (b, t) = self.check_input(x)?;
        let d = self.config.width;
        let pos = self.p(self.pos).slice(0, 0, t)?;
        let h = x.matmul(self.p(self.input_w))?.add(self.p(self.input_b))?.add(&pos)?;
        match (self.time, taus) {
            (Some(table), Some(taus)) => {
                let steps = self.p(table).shape()[0];
                let rows: Vec<usize> = match taus.len() {
                    1 => vec![taus[0]; b],
                    n if n == b => taus.to_vec(),
                    n => return Err(invalid(format!("{n} diffusion steps for a batch of {b}"))),
                };
                let mut idx = Vec::with_capacity(b);
                for tau in rows {
                    if tau == 0 || tau > steps {
                        return Err(invalid(format!("diffusion step {tau} outside 1..={steps}")));
                    }
                    idx.push(tau - 1);
                }
                let te = self.p(table).index_select_rows(Arc::new(idx))?.reshape(&[b, 1, d])?;
                h.add(&te)
            }
            (None, None) => Ok(h),
            (Some(_), None) => Err(invalid("the denoiser needs a diffusion step")),
            (None, Some(_)) => Err(invalid(format!("{} takes no diffusion step", self.kind.label()))),
        }
    }

    fn attention(&self, h: &Tensor, mask: Option<&Tensor>, blk: &BlockParams) -> Result<Tensor> {
        let dk = self.config.head_width();
        let scale = 1.0 / (dk as f64).sqrt();
        let (b, t, d) = (h.dim(0), h.dim(1), h.dim(2));
        let heads = self.config.heads;
        // (B, T, d) -> (B, H, T, dk)
        let split = |w: ParamId| h.matmul(self.p(w))?.reshape(&[b, t, heads, dk])?.swap_axes_12();
        let (q, k, v) = (split(blk.wq)?, split(blk.wk)?, split(blk.wv)?);
        let logits = q.matmul_t(&k, false, true)?.scale(scale)?;
        let weights = match mask {
            Some(m) => logits.softmax_with_bias(m)?,
            None => logits.softmax()?,
        };
        let ctx = weights.matmul(&v)?.swap_axes_12()?.reshape(&[b, t, d])?;
        ctx.matmul(self.p(blk.wo))?.add(self.p(blk.bo))
    }

    fn block(&self, h: &Tensor, mask: Option<&Tensor>, blk: &BlockParams) -> Result<Tensor> {
        let a = self.attention(h, mask, blk)?;
        let h1 = h.add(&a)?.layer_norm(self.p(blk.ln1_gamma), self.p(blk.ln1_beta))?;
        let f = h1
            .matmul(self.p(blk.w1))?
            .add(self.p(blk.b1))?
            .relu()?
            .matmul(self.p(blk.w2))?
            .add(self.p(blk.b2))?;
        h1.add(&f)?.layer_norm(self.p(blk.ln2_gamma), self.p(blk.ln2_beta))
    }

    /// One transformer block applied to an already-embedded sequence.
    pub fn transformer_block(&self, layer: usize, h: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| invalid(format!("no layer {layer}")))?;
        self.block(h, mask, blk)
    }

    /// Embedding and every block: `(B, T, width)`.
    pub fn backbone(&self, x: &Tensor, taus: Option<&[usize]>) -> Result<Tensor> {
        let mut h = self.embed(x, taus)?;
        let mask = self.causal.then(|| causal_mask(h.shape()[1]));
        for blk in &self.blocks {
            h = self.block(&h, mask.as_ref(), blk)?;
        }
        Ok(h)
    }

    fn head(&self, h: &Tensor) -> Result<Tensor> {
        h.matmul(self.p(self.head_w))?.add(self.p(self.head_b))
    }

    /// Predicted noise, same shape as `x_tau`.
    pub fn denoise(&self, x_tau: &Tensor, taus: &[usize]) -> Result<Tensor> {
        if !matches!(self.kind, ModelKind::Denoiser { .. }) {
            return Err(invalid(format!("{} cannot denoise", self.kind.label())));
        }
        self.head(&self.backbone(x_tau, Some(taus))?)
    }

    /// Output at position `t` forecasts the input `delta` steps later, using
    /// positions `<= t` only.
    pub fn supervise(&self, x: &Tensor) -> Result<Tensor> {
        if self.kind != ModelKind::Supervisor {
            return Err(invalid(format!("{} is not a supervisor", self.kind.label())));
        }
        self.head(&self.backbone(x, None)?)
    }

    /// One unconstrained score per sequence: backbone, mean over time, linear.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        if self.kind != ModelKind::Critic {
            return Err(invalid(format!("{} is not a critic", self.kind.label())));
        }
        let b = x.shape().first().copied().unwrap_or(0);
        let pooled = self.backbone(x, None)?.mean_axis(1, false)?;
        self.head(&pooled)?.reshape(&[b])
    }

    /// Scalar count of the input projection, positional table and blocks.
    pub fn backbone_param_count(&self) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter() {
            if !name.starts_with("head.") && name != "time_embedding" {
                n += t.len();
            }
        }
        n
    }
}

impl crate::diffusion::Denoiser for MaskedTransformer {
    fn predict_noise(&self, x_tau: &Tensor, taus: &[usize]) -> Result<Tensor> {
        self.denoise(x_tau, taus)
    }
}

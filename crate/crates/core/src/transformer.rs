//! Pre-layernorm Transformer pieces: bidirectional encoder stacks and the
//! decoder block with multi-source fusion cross-attention.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Filled from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Encoders and decoder read one token embedding table.
    pub share_embeddings: bool,
    /// The LM head is the transposed token embedding.
    pub tie_lm_head: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            vocab_size: 512,
            max_len: 64,
            dropout: 0.0,
            share_embeddings: true,
            tie_lm_head: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err("model sizes must be positive".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.max_len < 2 {
            return Err("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'s, S: Scalar> {
    pub store: &'s mut ParamStore<S>,
    pub rng: &'s mut ChaCha8Rng,
    pub std: f64,
}

impl<S: Scalar> Init<'_, S> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.store.add(name, Tensor::ones(shape))
    }
}

/// Train-time dropout; a no-op without an RNG or at rate 0.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Result<Var, TensorError> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, d: usize) -> Result<Self, TensorError> {
        Ok(Self {
            gain: init.ones(&format!("{name}.gain"), &[d])?,
            bias: init.zeros(&format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var, TensorError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, d: usize, d_ff: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w1: init.normal(&format!("{name}.w1"), &[d, d_ff])?,
            b1: init.zeros(&format!("{name}.b1"), &[d_ff])?,
            w2: init.normal(&format!("{name}.w2"), &[d_ff, d])?,
            b2: init.zeros(&format!("{name}.b2"), &[d])?,
        })
    }

    pub fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var, TensorError> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }
}

/// Query/key/value projections, bias-free.
#[derive(Clone, Copy, Debug)]
pub struct QkvParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl QkvParams {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, d: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wq: init.normal(&format!("{name}.wq"), &[d, d])?,
            wk: init.normal(&format!("{name}.wk"), &[d, d])?,
            wv: init.normal(&format!("{name}.wv"), &[d, d])?,
        })
    }

    pub fn names(name: &str) -> [String; 3] {
        [format!("{name}.wq"), format!("{name}.wk"), format!("{name}.wv")]
    }

    pub fn project<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        w: ParamId,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = g.param(store, w);
        g.matmul(x, w)
    }
}

/// Multi-head scaled dot-product attention. `q` is `[Lq×d]`, `k` and `v`
/// are `[Lk×d]`; `mask` (row-major `Lq×Lk`, `true` = attend) zeroes
/// forbidden weights exactly.
pub fn attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var, TensorError> {
    let d = g.value(q).last_dim();
    if !d.is_multiple_of(n_heads) {
        return Err(TensorError::Invalid(format!("attention: d = {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_masked(scores, 1, mask)?;
        heads.push(g.matmul(weights, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

/// `Lq×(past+Lq)` mask where query `i` sees keys `0..=past+i`.
pub fn causal_mask(lq: usize, past: usize) -> Vec<bool> {
    let lk = past + lq;
    (0..lq).flat_map(|i| (0..lk).map(move |j| j <= past + i)).collect()
}

/// Broadcasts a per-key keep flag over `lq` query rows.
pub fn key_mask(keep: &[bool], lq: usize) -> Vec<bool> {
    (0..lq).flat_map(|_| keep.iter().copied()).collect()
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: QkvParams,
    pub wo: ParamId,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Bidirectional pre-LN encoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub ln_f: LayerNormParams,
}

impl Encoder {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, cfg: &ModelConfig) -> Result<Self, TensorError> {
        let d = cfg.d;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    ln1: LayerNormParams::new(init, &format!("{p}.ln1"), d)?,
                    attn: QkvParams::new(init, &format!("{p}.attn"), d)?,
                    wo: init.normal(&format!("{p}.attn.wo"), &[d, d])?,
                    ln2: LayerNormParams::new(init, &format!("{p}.ln2"), d)?,
                    ffn: FfnParams::new(init, &format!("{p}.ffn"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<_, TensorError>>()?;
        Ok(Self {
            layers,
            ln_f: LayerNormParams::new(init, &format!("{name}.ln_f"), d)?,
        })
    }

    /// Contextual states for embedded input `x` `[len×d]`; `keep[j] == false`
    /// hides key `j` from every query.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        mut x: Var,
        keep: Option<&[bool]>,
        n_heads: usize,
        drop: &mut Dropout,
    ) -> Result<Var, TensorError> {
        let len = g.value(x).shape()[0];
        let mask = keep.filter(|k| k.iter().any(|&b| !b)).map(|k| key_mask(k, len));
        for layer in &self.layers {
            let h = layer.ln1.forward(g, store, x)?;
            let q = layer.attn.project(g, store, layer.attn.wq, h)?;
            let k = layer.attn.project(g, store, layer.attn.wk, h)?;
            let v = layer.attn.project(g, store, layer.attn.wv, h)?;
            let a = attention(g, q, k, v, n_heads, mask.as_deref())?;
            let wo = g.param(store, layer.wo);
            let a = g.matmul(a, wo)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, h)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        self.ln_f.forward(g, store, x)
    }
}

/// Keys and values one decoder layer reads from one source, plus the
/// source's key padding flags.
#[derive(Clone, Debug)]
pub struct SourceKv<'m> {
    pub k: Var,
    pub v: Var,
    pub keep: Option<&'m [bool]>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNormParams,
    pub self_attn: QkvParams,
    pub wo: ParamId,
    pub ln_cross: LayerNormParams,
    /// One branch per source, in history/knowledge/persona order.
    pub cross: Vec<QkvParams>,
    /// `[(n_sources·d)×d]`
    pub wp: ParamId,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Output of one decoder block plus the self-attention keys and values of
/// its new positions (for the incremental cache).
pub struct BlockOut {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

impl DecoderLayer {
    pub fn new<S: Scalar>(
        init: &mut Init<S>,
        name: &str,
        cfg: &ModelConfig,
        branches: &[&str],
    ) -> Result<Self, TensorError> {
        let d = cfg.d;
        Ok(Self {
            ln1: LayerNormParams::new(init, &format!("{name}.ln1"), d)?,
            self_attn: QkvParams::new(init, &format!("{name}.self"), d)?,
            wo: init.normal(&format!("{name}.self.wo"), &[d, d])?,
            ln_cross: LayerNormParams::new(init, &format!("{name}.ln_cross"), d)?,
            cross: branches
                .iter()
                .map(|b| QkvParams::new(init, &format!("{name}.cross.{b}"), d))
                .collect::<Result<_, _>>()?,
            wp: init.normal(&format!("{name}.fuse.wp"), &[branches.len() * d, d])?,
            ln2: LayerNormParams::new(init, &format!("{name}.ln2"), d)?,
            ffn: FfnParams::new(init, &format!("{name}.ffn"), d, cfg.d_ff)?,
        })
    }

    /// Projects encoder states of branch `b` to this layer's keys and values.
    pub fn source_kv<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        b: usize,
        h_src: Var,
    ) -> Result<(Var, Var), TensorError> {
        let p = &self.cross[b];
        Ok((p.project(g, store, p.wk, h_src)?, p.project(g, store, p.wv, h_src)?))
    }

    /// Causal self-attention over `past` cached keys/values (if any) and the
    /// new positions, pre-LN with residual.
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        past: Option<(Var, Var)>,
        n_heads: usize,
        drop: &mut Dropout,
    ) -> Result<BlockOut, TensorError> {
        let lq = g.value(x).shape()[0];
        let h = self.ln1.forward(g, store, x)?;
        let q = self.self_attn.project(g, store, self.self_attn.wq, h)?;
        let k_new = self.self_attn.project(g, store, self.self_attn.wk, h)?;
        let v_new = self.self_attn.project(g, store, self.self_attn.wv, h)?;
        let (k, v, p) = match past {
            Some((pk, pv)) => {
                let p = g.value(pk).shape()[0];
                (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?, p)
            }
            None => (k_new, v_new, 0),
        };
        let mask = (lq > 1).then(|| causal_mask(lq, p));
        let a = attention(g, q, k, v, n_heads, mask.as_deref())?;
        let wo = g.param(store, self.wo);
        let a = g.matmul(a, wo)?;
        let a = drop.apply(g, a)?;
        Ok(BlockOut {
            out: g.add(x, a)?,
            k: k_new,
            v: v_new,
        })
    }

    /// Fusion cross-attention: one attention per source over the shared
    /// normalized query, concatenated, projected by `W_P`, plus residual.
    pub fn fuse<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        h_sa: Var,
        sources: &[SourceKv],
        n_heads: usize,
        drop: &mut Dropout,
    ) -> Result<Var, TensorError> {
        if sources.is_empty() || sources.len() != self.cross.len() {
            return Err(TensorError::Invalid(format!(
                "fusion expects {} sources, got {}",
                self.cross.len(),
                sources.len()
            )));
        }
        let lq = g.value(h_sa).shape()[0];
        let h = self.ln_cross.forward(g, store, h_sa)?;
        let mut outs = Vec::with_capacity(sources.len());
        for (p, src) in self.cross.iter().zip(sources) {
            let q = p.project(g, store, p.wq, h)?;
            let mask = src.keep.filter(|k| k.iter().any(|&b| !b)).map(|k| key_mask(k, lq));
            outs.push(attention(g, q, src.k, src.v, n_heads, mask.as_deref())?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let wp = g.param(store, self.wp);
        let fused = g.matmul(cat, wp)?;
        let fused = drop.apply(g, fused)?;
        g.add(h_sa, fused)
    }

    pub fn feed_forward<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var, TensorError> {
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = drop.apply(g, f)?;
        g.add(x, f)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a, S: Scalar>(
        &self,
        g: &mut Graph<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        past: Option<(Var, Var)>,
        sources: &[SourceKv],
        n_heads: usize,
        drop: &mut Dropout,
    ) -> Result<BlockOut, TensorError> {
        let sa = self.self_attention(g, store, x, past, n_heads, drop)?;
        let fa = self.fuse(g, store, sa.out, sources, n_heads, drop)?;
        let out = self.feed_forward(g, store, fa, drop)?;
        Ok(BlockOut { out, ..sa })
    }
}

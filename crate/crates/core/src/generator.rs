//! The response generator: source encoders, fusion decoder, LM head and
//! optional copy head, with teacher-forced scoring and sampled decoding.

use std::collections::HashSet;

use msdf_text::preprocess::{build_history, postprocess_response, preprocess};
use msdf_text::sample::HistoryResponse;
use msdf_text::vocab::{BOS, CLS, EOS, PAD, UNK};
use msdf_text::{DialogSample, PipelineConfig, ProcessedSample, Rewriter, Task, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copy_head::{self, CopyHeadParams};
use crate::error::{ModelError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{DecoderLayer, Dropout, Encoder, Init, LayerNormParams, ModelConfig, SourceKv};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    History,
    Knowledge,
    Persona,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::History => "history",
            Source::Knowledge => "knowledge",
            Source::Persona => "persona",
        }
    }
}

/// Which sources a generator reads and whether it copies from knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub knowledge: bool,
    pub persona: bool,
    pub copy: bool,
    /// Knowledge and persona go through one encoder.
    pub shared_kp_encoder: bool,
}

impl Architecture {
    /// The pre-training architecture.
    pub fn history_only() -> Self {
        Self {
            knowledge: false,
            persona: false,
            copy: false,
            shared_kp_encoder: false,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Knowledge => Self {
                knowledge: true,
                copy: true,
                ..Self::history_only()
            },
            Task::Recommendation => Self {
                knowledge: true,
                persona: true,
                copy: true,
                shared_kp_encoder: true,
            },
            Task::Persona => Self {
                persona: true,
                ..Self::history_only()
            },
        }
    }

    pub fn with_copy(self, copy: bool) -> Self {
        Self { copy, ..self }
    }

    /// Fusion branches in their fixed order.
    pub fn sources(&self) -> Vec<Source> {
        let mut s = vec![Source::History];
        if self.knowledge {
            s.push(Source::Knowledge);
        }
        if self.persona {
            s.push(Source::Persona);
        }
        s
    }

    pub fn n_sources(&self) -> usize {
        self.sources().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.copy && !self.knowledge {
            return Err(ModelError::Config("the copy head needs a knowledge source".into()));
        }
        Ok(())
    }
}

/// Token ids of each source, already truncated to the model's length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextIds {
    pub history: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<Vec<u32>>,
}

impl ContextIds {
    pub fn get(&self, s: Source) -> Option<&[u32]> {
        match s {
            Source::History => Some(&self.history),
            Source::Knowledge => self.knowledge.as_deref(),
            Source::Persona => self.persona.as_deref(),
        }
    }
}

/// A teacher-forcing example: context plus target ids (no BOS/EOS).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: ContextIds,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub pool_size: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            pool_size: 10,
            top_k: 8,
            temperature: 1.0,
            max_new_tokens: 48,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            pool_size: 1,
            top_k: 1,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 1 {
            return Err(ModelError::Config("pool_size must be at least 1".into()));
        }
        if self.top_k < 1 {
            return Err(ModelError::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_new_tokens < 1 {
            return Err(ModelError::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated ids without the final EOS.
    pub ids: Vec<u32>,
    pub text: String,
    /// Sum of untempered log-probabilities of every sampled token, EOS included.
    pub gen_logprob: f64,
    pub length: usize,
    /// Ended with EOS rather than hitting the token limit.
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub pool_size: usize,
}

/// Sampling never produces these ids.
pub const BANNED: [u32; 4] = [PAD, BOS, UNK, CLS];

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    enc_tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoders: Vec<Encoder>,
    /// Encoder index per fusion branch.
    branch_encoder: Vec<usize>,
    decoder: Vec<DecoderLayer>,
    ln_f: LayerNormParams,
    lm_head: Option<ParamId>,
    copy: Option<CopyHeadParams>,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<S: Scalar> {
    pub config: ModelConfig,
    pub arch: Architecture,
    /// `None` for a pre-trained, task-agnostic model.
    pub task: Option<Task>,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
    layout: Layout,
}

struct GraphSources {
    h: Vec<Var>,
    keep: Vec<Option<Vec<bool>>>,
    knowledge: Option<(Var, Vec<usize>, Option<Vec<bool>>)>,
}

/// Encoder-side tensors of one context, computed once for decoding.
#[derive(Clone, Debug)]
pub struct EncodedContext<S: Scalar> {
    /// `[layer][branch]` cross-attention keys and values.
    kv: Vec<Vec<(Tensor<S>, Tensor<S>)>>,
    keep: Vec<Option<Vec<bool>>>,
    copy: Option<CopyContext<S>>,
}

#[derive(Clone, Debug)]
struct CopyContext<S: Scalar> {
    h: Tensor<S>,
    keys: Tensor<S>,
    ids: Vec<usize>,
    keep: Option<Vec<bool>>,
}

/// Self-attention cache of one decoding run.
#[derive(Clone, Debug)]
pub struct DecodeState<S: Scalar> {
    k: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
    pos: usize,
}

impl<S: Scalar> DecodeState<S> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            k: vec![None; n_layers],
            v: vec![None; n_layers],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

fn keep_flags(ids: &[usize]) -> Option<Vec<bool>> {
    ids.contains(&(PAD as usize))
        .then(|| ids.iter().map(|&i| i != PAD as usize).collect())
}

fn append_rows<S: Scalar>(a: Option<Tensor<S>>, b: Tensor<S>) -> Tensor<S> {
    match a {
        None => b,
        Some(a) => {
            let d = a.last_dim();
            let rows = a.shape()[0] + b.shape()[0];
            let mut data = a.into_data();
            data.extend_from_slice(b.data());
            Tensor::matrix(rows, d, data).expect("matching widths")
        }
    }
}

fn usize_ids(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

impl<S: Scalar> GeneratorModel<S> {
    /// A randomly initialized model. `config.vocab_size` is set from `vocab`.
    pub fn new(mut config: ModelConfig, arch: Architecture, task: Option<Task>, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate().map_err(ModelError::Config)?;
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            std: config.init_std,
        };
        let (d, v) = (config.d, config.vocab_size);
        let tok_emb = init.normal("embed.tokens", &[v, d])?;
        let enc_tok_emb = if config.share_embeddings {
            tok_emb
        } else {
            init.normal("embed.enc_tokens", &[v, d])?
        };
        let enc_pos = init.normal("embed.enc_pos", &[config.max_len, d])?;
        let dec_pos = init.normal("embed.dec_pos", &[config.max_len, d])?;

        let mut encoders = vec![Encoder::new(&mut init, "enc.history", &config)?];
        let mut branch_encoder = vec![0];
        if arch.knowledge {
            encoders.push(Encoder::new(&mut init, "enc.knowledge", &config)?);
            branch_encoder.push(encoders.len() - 1);
        }
        if arch.persona {
            if arch.shared_kp_encoder && arch.knowledge {
                branch_encoder.push(1);
            } else {
                encoders.push(Encoder::new(&mut init, "enc.persona", &config)?);
                branch_encoder.push(encoders.len() - 1);
            }
        }
        let names: Vec<&str> = arch.sources().iter().map(|s| s.as_str()).collect();
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayer::new(&mut init, &format!("dec.layer{l}"), &config, &names))
            .collect::<Result<_, _>>()?;
        let ln_f = LayerNormParams::new(&mut init, "dec.ln_f", d)?;
        let lm_head = if config.tie_lm_head {
            None
        } else {
            Some(init.normal("lm_head", &[d, v])?)
        };
        let copy = if arch.copy {
            Some(CopyHeadParams::new(&mut init, "copy", d)?)
        } else {
            None
        };
        Ok(Self {
            config,
            arch,
            task,
            vocab,
            params,
            layout: Layout {
                tok_emb,
                enc_tok_emb,
                enc_pos,
                dec_pos,
                encoders,
                branch_encoder,
                decoder,
                ln_f,
                lm_head,
                copy,
            },
        })
    }

    /// A task model initialized from a pre-trained history-only model.
    ///
    /// Shared parameters are copied; each new source encoder and each new
    /// fusion branch's query/key/value projections start as copies of the
    /// history ones, and the new rows of every `W_P` are zero, so the
    /// vocabulary logits initially equal the pre-trained model's. The copy
    /// head is fresh with a closed-form-neutral gate (`W_mlp = 0`).
    pub fn finetune_init(pre: &GeneratorModel<S>, task: Task, arch: Architecture, seed: u64) -> Result<Self> {
        if pre.arch != Architecture::history_only() {
            return Err(ModelError::Config("fine-tuning starts from a history-only model".into()));
        }
        let mut model = Self::new(pre.config.clone(), arch, Some(task), pre.vocab.clone(), seed)?;
        let d = model.config.d;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let source_name = if let Some(rest) = name
                .strip_prefix("enc.knowledge.")
                .or_else(|| name.strip_prefix("enc.persona."))
            {
                format!("enc.history.{rest}")
            } else if name.contains(".cross.knowledge.") || name.contains(".cross.persona.") {
                name.replace(".cross.knowledge.", ".cross.history.")
                    .replace(".cross.persona.", ".cross.history.")
            } else {
                name.clone()
            };
            if name.ends_with(".fuse.wp") {
                let old = pre
                    .params
                    .by_name(&name)
                    .ok_or_else(|| ModelError::Checkpoint(format!("pre-trained model lacks {name}")))?;
                let mut wp = Tensor::zeros(model.params.get(id).shape());
                wp.data_mut()[..d * d].copy_from_slice(old.data());
                model.params.set(id, wp)?;
            } else if let Some(t) = pre.params.by_name(&source_name) {
                model.params.set(id, t.clone())?;
            }
        }
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    fn encode_source(&self, text: &str, source: Source) -> Result<Vec<u32>> {
        let mut ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(ModelError::MissingSource(source.as_str()));
        }
        let max = self.config.max_len;
        if ids.len() > max {
            if source == Source::History {
                ids.drain(..ids.len() - max);
            } else {
                ids.truncate(max);
            }
        }
        Ok(ids)
    }

    /// Encoder inputs for a preprocessed sample. Sources this architecture
    /// does not read are ignored; sources it needs must be present.
    pub fn context_ids(&self, p: &ProcessedSample, max_history_tokens: usize) -> Result<ContextIds> {
        self.context_from_parts(&p.history, p.knowledge.as_deref(), p.persona.as_deref(), max_history_tokens)
    }

    pub fn context_from_parts(
        &self,
        history: &[String],
        knowledge: Option<&str>,
        persona: Option<&str>,
        max_history_tokens: usize,
    ) -> Result<ContextIds> {
        let history = self.encode_source(&build_history(history, max_history_tokens), Source::History)?;
        let mut ctx = ContextIds {
            history,
            knowledge: None,
            persona: None,
        };
        if self.arch.knowledge {
            let k = knowledge.ok_or(ModelError::MissingSource("knowledge"))?;
            ctx.knowledge = Some(self.encode_source(k, Source::Knowledge)?);
        }
        if self.arch.persona {
            let p = persona.ok_or(ModelError::MissingSource("persona"))?;
            ctx.persona = Some(self.encode_source(p, Source::Persona)?);
        }
        Ok(ctx)
    }

    fn target_ids(&self, target: &str) -> Vec<u32> {
        let mut t = self.vocab.encode(target);
        t.truncate(self.config.max_len - 1);
        t
    }

    /// A training example from a preprocessed sample with a target.
    pub fn example(&self, p: &ProcessedSample, max_history_tokens: usize) -> Result<Example> {
        let target = p.target.as_deref().ok_or(ModelError::MissingSource("response"))?;
        if let Some(task) = self.task {
            if task != p.task {
                return Err(ModelError::Config(format!("{} sample for a {task} model", p.task)));
            }
        }
        Ok(Example {
            context: self.context_ids(p, max_history_tokens)?,
            target: self.target_ids(target),
        })
    }

    /// A training example from a history/response pair (history-only models).
    pub fn pair_example(&self, pair: &HistoryResponse, max_history_tokens: usize) -> Result<Example> {
        Ok(Example {
            context: self.context_from_parts(&pair.history, None, None, max_history_tokens)?,
            target: self.target_ids(&pair.response),
        })
    }

    /// Decoder inputs `[BOS] + target` and outputs `target + [EOS]`.
    pub fn decoder_io(target: &[u32]) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = vec![BOS as usize];
        inputs.extend(target.iter().map(|&t| t as usize));
        let mut outputs: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        outputs.push(EOS as usize);
        (inputs, outputs)
    }

    fn embed<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        table: ParamId,
        pos_table: ParamId,
        ids: &[usize],
        offset: usize,
    ) -> Result<Var> {
        let tok = g.param(&self.params, table);
        let pos = g.param(&self.params, pos_table);
        let e = g.embedding(tok, ids)?;
        let positions: Vec<usize> = (offset..offset + ids.len()).collect();
        let p = g.embedding(pos, &positions)?;
        Ok(g.add(e, p)?)
    }

    fn encode_graph<'a>(&'a self, g: &mut Graph<'a, S>, ctx: &ContextIds, drop: &mut Dropout) -> Result<GraphSources> {
        let mut out = GraphSources {
            h: Vec::new(),
            keep: Vec::new(),
            knowledge: None,
        };
        for (b, src) in self.arch.sources().into_iter().enumerate() {
            let ids = usize_ids(ctx.get(src).ok_or(ModelError::MissingSource(src.as_str()))?);
            let keep = keep_flags(&ids);
            let x = self.embed(g, self.layout.enc_tok_emb, self.layout.enc_pos, &ids, 0)?;
            let x = drop.apply(g, x)?;
            let enc = &self.layout.encoders[self.layout.branch_encoder[b]];
            let h = enc.forward(g, &self.params, x, keep.as_deref(), self.config.n_heads, drop)?;
            if src == Source::Knowledge {
                out.knowledge = Some((h, ids.clone(), keep.clone()));
            }
            out.h.push(h);
            out.keep.push(keep);
        }
        Ok(out)
    }

    /// Vocabulary logits `H_D · W_LM` (the tied embedding when configured).
    fn logits<'a>(&'a self, g: &mut Graph<'a, S>, h_d: Var) -> Result<Var> {
        let w = match self.layout.lm_head {
            Some(id) => g.param(&self.params, id),
            None => {
                let e = g.param(&self.params, self.layout.tok_emb);
                g.transpose(e)?
            }
        };
        Ok(g.matmul(h_d, w)?)
    }

    fn head<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        h_d: Var,
        copy: Option<(Var, Var, &[usize], Option<&[bool]>)>,
    ) -> Result<Var> {
        let logits = self.logits(g, h_d)?;
        match (self.layout.copy, copy) {
            (Some(head), Some((h_k, keys, ids, keep))) => {
                let p_vocab = g.softmax(logits, 1)?;
                let a = head.attention(g, &self.params, h_d, keys, keep)?;
                let p_gen = head.gate(g, &self.params, a, h_k, h_d)?;
                Ok(copy_head::merge(g, p_vocab, a, p_gen, ids)?)
            }
            _ => Ok(g.log_softmax(logits)?),
        }
    }

    fn decode_graph<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        src: &GraphSources,
        inputs: &[usize],
        drop: &mut Dropout,
        want_logits: bool,
    ) -> Result<Var> {
        let mut x = self.embed(g, self.layout.tok_emb, self.layout.dec_pos, inputs, 0)?;
        x = drop.apply(g, x)?;
        for layer in &self.layout.decoder {
            let mut sources = Vec::with_capacity(src.h.len());
            for (b, &h) in src.h.iter().enumerate() {
                let (k, v) = layer.source_kv(g, &self.params, b, h)?;
                sources.push(SourceKv {
                    k,
                    v,
                    keep: src.keep[b].as_deref(),
                });
            }
            x = layer
                .forward(g, &self.params, x, None, &sources, self.config.n_heads, drop)?
                .out;
        }
        let h_d = self.layout.ln_f.forward(g, &self.params, x)?;
        if want_logits {
            return self.logits(g, h_d);
        }
        let copy = match (&self.layout.copy, &src.knowledge) {
            (Some(head), Some((h_k, ids, keep))) => {
                let keys = head.keys(g, &self.params, *h_k)?;
                Some((*h_k, keys, ids.as_slice(), keep.as_deref()))
            }
            _ => None,
        };
        self.head(g, h_d, copy)
    }

    /// Teacher-forced log-probabilities `[L×V]` of the next token after each
    /// decoder input.
    pub fn forward_log_probs<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        ctx: &ContextIds,
        inputs: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if inputs.len() > self.config.max_len {
            return Err(ModelError::Config(format!(
                "{} decoder positions exceed max_len {}",
                inputs.len(),
                self.config.max_len
            )));
        }
        let src = self.encode_graph(g, ctx, drop)?;
        self.decode_graph(g, &src, inputs, drop, false)
    }

    /// Vocabulary logits before any copy mixing.
    pub fn vocab_logits(&self, ctx: &ContextIds, inputs: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let mut drop = Dropout::off();
        let src = self.encode_graph(&mut g, ctx, &mut drop)?;
        let l = self.decode_graph(&mut g, &src, inputs, &mut drop, true)?;
        Ok(g.value(l).clone())
    }

    /// Mean NLL of an example and the number of scored positions.
    pub fn loss<'a>(&'a self, g: &mut Graph<'a, S>, ex: &Example, drop: &mut Dropout) -> Result<(Var, usize)> {
        let (inputs, outputs) = Self::decoder_io(&ex.target);
        let lp = self.forward_log_probs(g, &ex.context, &inputs, drop)?;
        Ok((g.nll(lp, &outputs, None)?, outputs.len()))
    }

    /// Teacher-forced log-probabilities as a plain tensor.
    pub fn log_probs(&self, ctx: &ContextIds, inputs: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let lp = self.forward_log_probs(&mut g, ctx, inputs, &mut Dropout::off())?;
        Ok(g.value(lp).clone())
    }

    /// Runs the encoders once and caches every layer's cross keys/values.
    pub fn encode_context(&self, ctx: &ContextIds) -> Result<EncodedContext<S>> {
        let mut g = Graph::no_grad();
        let mut drop = Dropout::off();
        let src = self.encode_graph(&mut g, ctx, &mut drop)?;
        let mut kv = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let mut per = Vec::with_capacity(src.h.len());
            for (b, &h) in src.h.iter().enumerate() {
                let (k, v) = layer.source_kv(&mut g, &self.params, b, h)?;
                per.push((g.value(k).clone(), g.value(v).clone()));
            }
            kv.push(per);
        }
        let copy = match (&self.layout.copy, &src.knowledge) {
            (Some(head), Some((h_k, ids, keep))) => {
                let keys = head.keys(&mut g, &self.params, *h_k)?;
                Some(CopyContext {
                    h: g.value(*h_k).clone(),
                    keys: g.value(keys).clone(),
                    ids: ids.clone(),
                    keep: keep.clone(),
                })
            }
            _ => None,
        };
        Ok(EncodedContext {
            kv,
            keep: src.keep,
            copy,
        })
    }

    /// Feeds one token and returns log-probabilities for the next one.
    pub fn step(&self, enc: &EncodedContext<S>, state: &mut DecodeState<S>, token: u32) -> Result<Vec<f64>> {
        if state.pos >= self.config.max_len {
            return Err(ModelError::Config(format!("decoding past max_len {}", self.config.max_len)));
        }
        let n_layers = self.layout.decoder.len();
        let (row, new_k, new_v) = {
            let mut g = Graph::no_grad();
            let mut drop = Dropout::off();
            let mut x = self.embed(&mut g, self.layout.tok_emb, self.layout.dec_pos, &[token as usize], state.pos)?;
            let mut new_k = Vec::with_capacity(n_layers);
            let mut new_v = Vec::with_capacity(n_layers);
            for (l, layer) in self.layout.decoder.iter().enumerate() {
                let past = match (&state.k[l], &state.v[l]) {
                    (Some(k), Some(v)) => Some((g.constant_ref(k), g.constant_ref(v))),
                    _ => None,
                };
                let sources: Vec<SourceKv> = enc.kv[l]
                    .iter()
                    .zip(&enc.keep)
                    .map(|((k, v), keep)| SourceKv {
                        k: g.constant_ref(k),
                        v: g.constant_ref(v),
                        keep: keep.as_deref(),
                    })
                    .collect();
                let out = layer.forward(&mut g, &self.params, x, past, &sources, self.config.n_heads, &mut drop)?;
                new_k.push(g.value(out.k).clone());
                new_v.push(g.value(out.v).clone());
                x = out.out;
            }
            let h_d = self.layout.ln_f.forward(&mut g, &self.params, x)?;
            let copy = enc.copy.as_ref().map(|c| {
                (
                    g.constant_ref(&c.h),
                    g.constant_ref(&c.keys),
                    c.ids.as_slice(),
                    c.keep.as_deref(),
                )
            });
            let lp = self.head(&mut g, h_d, copy)?;
            let row: Vec<f64> = g.value(lp).data().iter().map(|x| x.as_f64()).collect();
            (row, new_k, new_v)
        };
        for (l, (k, v)) in new_k.into_iter().zip(new_v).enumerate() {
            state.k[l] = Some(append_rows(state.k[l].take(), k));
            state.v[l] = Some(append_rows(state.v[l].take(), v));
        }
        state.pos += 1;
        Ok(row)
    }

    fn decode_one(&self, enc: &EncodedContext<S>, dec: &DecodingParams, rng: &mut ChaCha8Rng) -> Result<Candidate> {
        let max_new = dec.max_new_tokens.min(self.config.max_len);
        let mut state = DecodeState::new(self.layout.decoder.len());
        let mut token = BOS;
        let mut ids = Vec::new();
        let mut total = 0.0;
        let mut finished = false;
        for _ in 0..max_new {
            let row = self.step(enc, &mut state, token)?;
            let next = pick_token(&row, dec.top_k, dec.temperature, rng);
            total += row[next as usize];
            if next == EOS {
                finished = true;
                break;
            }
            ids.push(next);
            token = next;
        }
        Ok(Candidate {
            text: self.vocab.decode_for_postprocess(&ids),
            length: ids.len(),
            ids,
            gen_logprob: total,
            finished,
        })
    }

    /// `pool_size` independent top-k samples (candidate `i` draws from
    /// stream `i` of the seed); duplicate token sequences keep their first
    /// occurrence.
    pub fn sample_pool(&self, enc: &EncodedContext<S>, dec: &DecodingParams) -> Result<CandidatePool> {
        dec.validate()?;
        let mut seen = HashSet::new();
        let mut candidates = Vec::new();
        for i in 0..dec.pool_size {
            let mut rng = ChaCha8Rng::seed_from_u64(dec.seed);
            rng.set_stream(i as u64);
            let c = self.decode_one(enc, dec, &mut rng)?;
            if seen.insert(c.ids.clone()) {
                candidates.push(c);
            }
        }
        Ok(CandidatePool {
            candidates,
            pool_size: dec.pool_size,
        })
    }

    /// Greedy decoding (top-1 sampling).
    pub fn greedy(&self, ctx: &ContextIds, max_new_tokens: usize) -> Result<Candidate> {
        let enc = self.encode_context(ctx)?;
        let pool = self.sample_pool(&enc, &DecodingParams::greedy(max_new_tokens))?;
        Ok(pool.candidates.into_iter().next().expect("pool of one"))
    }

    /// Preprocess, encode, sample a pool and restore each candidate's text.
    pub fn respond(
        &self,
        sample: &DialogSample,
        pipe: &PipelineConfig,
        rewriter: &Rewriter,
        dec: &DecodingParams,
    ) -> Result<(ProcessedSample, CandidatePool)> {
        if let Some(task) = self.task {
            if task != sample.task {
                return Err(ModelError::Config(format!("{} sample for a {task} model", sample.task)));
            }
        }
        let processed = preprocess(sample, pipe)?;
        let ctx = self.context_ids(&processed, pipe.max_history_tokens)?;
        let enc = self.encode_context(&ctx)?;
        let mut pool = self.sample_pool(&enc, dec)?;
        for c in &mut pool.candidates {
            c.text = postprocess_response(&c.text, &processed.placeholder_map, processed.user_name.as_deref(), rewriter);
        }
        Ok((processed, pool))
    }
}

/// Top-k sampling at `temperature` over non-banned ids. Ties in the
/// ranking go to the lower id.
pub fn pick_token(row: &[f64], top_k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let mut order: Vec<usize> = (0..row.len()).filter(|&i| !BANNED.contains(&(i as u32))).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let max = row[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((row[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    order[0] as u32
}

impl<S: Scalar> crate::params::Parameterized<S> for GeneratorModel<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }
}

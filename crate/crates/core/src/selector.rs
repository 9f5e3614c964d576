//! History/response consistency classifier and pool reranking.

use std::cmp::Ordering;
use std::collections::HashSet;

use msdf_text::preprocess::build_history;
use msdf_text::sample::HistoryResponse;
use msdf_text::vocab::{CLS, PAD, SEP};
use msdf_text::{DialogSample, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::generator::{Candidate, CandidatePool};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Parameterized};
use crate::transformer::{Dropout, Encoder, Init, ModelConfig};
use crate::Scalar;

/// A labeled history/response pair; `consistent` is the positive class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorPair {
    pub history: Vec<String>,
    pub response: String,
    pub consistent: bool,
}

/// Gold pairs of every sample that carries a response.
pub fn gold_pairs(samples: &[DialogSample]) -> Vec<HistoryResponse> {
    samples
        .iter()
        .filter_map(|s| {
            s.response.as_ref().map(|r| HistoryResponse {
                history: s.history.clone(),
                response: r.clone(),
            })
        })
        .collect()
}

/// One positive per gold pair followed by `neg_ratio` negatives whose
/// responses come from other pairs. A negative never repeats a gold pair.
pub fn build_pairs(corpus: &[HistoryResponse], neg_ratio: usize, seed: u64) -> Result<Vec<SelectorPair>> {
    if corpus.len() < 2 {
        return Err(ModelError::Config("negative sampling needs at least two samples".into()));
    }
    let gold: HashSet<(&[String], &str)> = corpus
        .iter()
        .map(|p| (p.history.as_slice(), p.response.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len() * (1 + neg_ratio));
    for (i, pos) in corpus.iter().enumerate() {
        out.push(SelectorPair {
            history: pos.history.clone(),
            response: pos.response.clone(),
            consistent: true,
        });
        let collides = |j: usize| gold.contains(&(pos.history.as_slice(), corpus[j].response.as_str()));
        for _ in 0..neg_ratio {
            let mut pick = None;
            for _ in 0..64 {
                let j = (i + rng.gen_range(1..corpus.len())) % corpus.len();
                if !collides(j) {
                    pick = Some(j);
                    break;
                }
            }
            let j = match pick {
                Some(j) => j,
                None => {
                    let allowed: Vec<usize> = (0..corpus.len()).filter(|&j| j != i && !collides(j)).collect();
                    if allowed.is_empty() {
                        return Err(ModelError::Config(format!(
                            "no foreign response differs from the gold responses of sample {i}"
                        )));
                    }
                    allowed[rng.gen_range(0..allowed.len())]
                }
            };
            out.push(SelectorPair {
                history: pos.history.clone(),
                response: corpus[j].response.clone(),
                consistent: false,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    encoder: Encoder,
    head: ParamId,
}

#[derive(Clone, Debug)]
pub struct SelectorModel<S: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
    /// Token budget for the flattened history before id truncation.
    pub max_history_tokens: usize,
    layout: Layout,
}

impl<S: Scalar> SelectorModel<S> {
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate().map_err(ModelError::Config)?;
        if config.max_len < 5 {
            return Err(ModelError::Config("selector max_len must be at least 5".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            std: config.init_std,
        };
        let tok_emb = init.normal("sel.embed.tokens", &[config.vocab_size, config.d])?;
        let pos_emb = init.normal("sel.embed.pos", &[config.max_len, config.d])?;
        let encoder = Encoder::new(&mut init, "sel.enc", &config)?;
        let head = init.normal("sel.head", &[config.d, 2])?;
        let max_history_tokens = config.max_len;
        Ok(Self {
            config,
            vocab,
            params,
            max_history_tokens,
            layout: Layout {
                tok_emb,
                pos_emb,
                encoder,
                head,
            },
        })
    }

    /// `[CLS] history [SEP] response [SEP]`. A long response yields to the
    /// history down to half the budget; the history is cut from the left.
    pub fn input_ids(&self, history: &[String], response: &str) -> Vec<u32> {
        let budget = self.config.max_len - 3;
        let mut resp = self.vocab.encode(response);
        let mut hist = self.vocab.encode(&build_history(history, self.max_history_tokens));
        let resp_cap = budget - hist.len().min(budget / 2);
        resp.truncate(resp_cap);
        let hist_cap = budget - resp.len();
        if hist.len() > hist_cap {
            hist.drain(..hist.len() - hist_cap);
        }
        let mut ids = Vec::with_capacity(hist.len() + resp.len() + 3);
        ids.push(CLS);
        ids.extend(hist);
        ids.push(SEP);
        ids.extend(resp);
        ids.push(SEP);
        ids
    }

    /// Log-probabilities `[1×2]` (negative, positive) for input ids; PAD
    /// positions are masked out.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, ids: &[u32], drop: &mut Dropout) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(ModelError::Config(format!(
                "selector input of {} ids (max_len {})",
                ids.len(),
                self.config.max_len
            )));
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let keep: Vec<bool> = ids.iter().map(|&i| i != PAD as usize).collect();
        let tok = g.param(&self.params, self.layout.tok_emb);
        let pos = g.param(&self.params, self.layout.pos_emb);
        let e = g.embedding(tok, &ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.embedding(pos, &positions)?;
        let x = g.add(e, p)?;
        let x = drop.apply(g, x)?;
        let h = self
            .layout
            .encoder
            .forward(g, &self.params, x, Some(&keep), self.config.n_heads, drop)?;
        let cls = g.slice_rows(h, 0, 1)?;
        let cls = drop.apply(g, cls)?;
        let w = g.param(&self.params, self.layout.head);
        let logits = g.matmul(cls, w)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Cross-entropy of one labeled pair.
    pub fn loss<'a>(&'a self, g: &mut Graph<'a, S>, pair: &SelectorPair, drop: &mut Dropout) -> Result<Var> {
        let ids = self.input_ids(&pair.history, &pair.response);
        let lp = self.forward(g, &ids, drop)?;
        Ok(g.nll(lp, &[usize::from(pair.consistent)], None)?)
    }

    /// Positive-class probability for raw ids.
    pub fn score_ids(&self, ids: &[u32]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let lp = self.forward(&mut g, ids, &mut Dropout::off())?;
        Ok(g.value(lp).data()[1].as_f64().exp())
    }

    /// Consistency score in `[0, 1]`.
    pub fn score(&self, history: &[String], response: &str) -> Result<f64> {
        self.score_ids(&self.input_ids(history, response))
    }

    pub fn score_pool(&self, history: &[String], pool: &CandidatePool) -> Result<Vec<f64>> {
        pool.candidates.iter().map(|c| self.score(history, &c.text)).collect()
    }

    /// Scores the pool and picks the final response.
    pub fn select_final(&self, pool: &CandidatePool, history: &[String]) -> Result<Reranked> {
        let scores = self.score_pool(history, pool)?;
        let chosen = select_index(&scores, &pool.candidates)?;
        Ok(Reranked {
            candidates: pool.candidates.clone(),
            scores,
            chosen,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }
}

impl<S: Scalar> Parameterized<S> for SelectorModel<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }
}

/// A pool with its consistency scores and the selected index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub candidates: Vec<Candidate>,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

impl Reranked {
    pub fn chosen(&self) -> &Candidate {
        &self.candidates[self.chosen]
    }

    /// Indices ordered by score, highest first, with the selection's tie
    /// rules.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| rank(&self.scores, &self.candidates, a, b));
        idx
    }
}

fn rank(scores: &[f64], cands: &[Candidate], a: usize, b: usize) -> Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then(cands[b].gen_logprob.total_cmp(&cands[a].gen_logprob))
        .then(a.cmp(&b))
}

/// Highest score; ties go to the higher generation log-probability, then to
/// the lower index.
pub fn select_index(scores: &[f64], candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(ModelError::Config("empty candidate pool".into()));
    }
    if scores.len() != candidates.len() {
        return Err(ModelError::Config(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    Ok((1..scores.len()).fold(0, |best, i| {
        if rank(scores, candidates, i, best) == Ordering::Less {
            i
        } else {
            best
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(lp: f64) -> Candidate {
        Candidate {
            ids: vec![],
            text: String::new(),
            gen_logprob: lp,
            length: 0,
            finished: true,
        }
    }

    fn pair(h: &str, r: &str) -> HistoryResponse {
        HistoryResponse {
            history: vec![h.into()],
            response: r.into(),
        }
    }

    #[test]
    fn tie_breaks() {
        let c = [cand(-5.0), cand(-7.0), cand(-3.0)];
        assert_eq!(select_index(&[0.2, 0.9, 0.9], &c).unwrap(), 2);
        assert_eq!(select_index(&[0.5, 0.5, 0.1], &[cand(-1.0), cand(-1.0), cand(0.0)]).unwrap(), 0);
        assert_eq!(select_index(&[0.3], &[cand(-9.0)]).unwrap(), 0);
        assert!(select_index(&[], &[]).is_err());
    }

    #[test]
    fn two_sample_pairs_swap_responses() {
        let corpus = [pair("a", "x"), pair("b", "y")];
        let p = build_pairs(&corpus, 1, 0).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!((p[1].history[0].as_str(), p[1].response.as_str(), p[1].consistent), ("a", "y", false));
        assert_eq!((p[3].history[0].as_str(), p[3].response.as_str(), p[3].consistent), ("b", "x", false));
        assert!(build_pairs(&corpus[..1], 1, 0).is_err());
    }

    #[test]
    fn collisions_are_resampled() {
        // sample 1 repeats sample 0's gold pair, so "x" is never a negative for "a"
        let corpus = [pair("a", "x"), pair("a", "x"), pair("c", "z")];
        for seed in 0..20 {
            let p = build_pairs(&corpus, 3, seed).unwrap();
            for q in p.iter().filter(|q| !q.consistent) {
                assert!(!corpus.iter().any(|c| c.history == q.history && c.response == q.response));
            }
        }
        let all_same = [pair("a", "x"), pair("a", "x")];
        assert!(build_pairs(&all_same, 1, 0).is_err());
    }
}

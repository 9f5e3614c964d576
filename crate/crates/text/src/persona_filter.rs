//! Word vectors and the persona-similarity corpus filter.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::preprocess::PersonaFilterConfig;
use crate::sample::DialogSample;
use crate::vocab::pieces;

fn words(text: &str) -> impl Iterator<Item = &str> {
    pieces(text).into_iter().filter(|p| !p.trim().is_empty())
}

/// Dense vectors for tokens, trained with skip-gram and negative sampling.
#[derive(Clone, Debug)]
pub struct WordVectors {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl WordVectors {
    /// Trains on `sentences` with window `window` and 5 negatives per pair.
    pub fn train<'a, I>(sentences: I, dim: usize, window: usize, epochs: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut counts: Vec<usize> = Vec::new();
        let corpus: Vec<Vec<usize>> = sentences
            .into_iter()
            .map(|s| {
                words(s)
                    .map(|w| {
                        let next = index.len();
                        let id = *index.entry(w.to_string()).or_insert(next);
                        if id == counts.len() {
                            counts.push(0);
                        }
                        counts[id] += 1;
                        id
                    })
                    .collect()
            })
            .collect();

        let n = index.len();
        let dim = dim.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input: Vec<f64> = (0..n * dim).map(|_| (rng.gen::<f64>() - 0.5) / dim as f64).collect();
        let mut output = vec![0.0; n * dim];

        // unigram^0.75 table for negatives
        let mut table = Vec::new();
        for (id, &c) in counts.iter().enumerate() {
            let reps = ((c as f64).powf(0.75).ceil() as usize).max(1);
            table.extend(std::iter::repeat_n(id, reps));
        }

        let total_steps = (epochs.max(1) * corpus.iter().map(Vec::len).sum::<usize>()).max(1);
        let mut step = 0usize;
        let mut grad = vec![0.0; dim];
        for _ in 0..epochs.max(1) {
            for sent in &corpus {
                for (pos, &center) in sent.iter().enumerate() {
                    let lr = 0.025 * (1.0 - step as f64 / total_steps as f64).max(1e-4);
                    step += 1;
                    let lo = pos.saturating_sub(window);
                    let hi = (pos + window + 1).min(sent.len());
                    for (ctx_pos, &ctx) in sent.iter().enumerate().take(hi).skip(lo) {
                        if ctx_pos == pos {
                            continue;
                        }
                        grad.iter_mut().for_each(|g| *g = 0.0);
                        for k in 0..6 {
                            let (target, label) = if k == 0 {
                                (ctx, 1.0)
                            } else {
                                let t = table[rng.gen_range(0..table.len())];
                                if t == ctx {
                                    continue;
                                }
                                (t, 0.0)
                            };
                            let inp = &input[center * dim..(center + 1) * dim];
                            let out = &mut output[target * dim..(target + 1) * dim];
                            let dot: f64 = inp.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                            let g = lr * (label - sigmoid(dot));
                            for d in 0..dim {
                                grad[d] += g * out[d];
                                out[d] += g * inp[d];
                            }
                        }
                        for (w, g) in input[center * dim..(center + 1) * dim].iter_mut().zip(&grad) {
                            *w += g;
                        }
                    }
                }
            }
        }
        Self { dim, index, vectors: input }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Mean vector of the known tokens of `text`, or `None` if there are none.
    pub fn mean(&self, text: &str) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for w in words(text) {
            if let Some(v) = self.get(w) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
    }

    /// Cosine of mean vectors; 0 when either side has no known tokens.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        match (self.mean(a), self.mean(b)) {
            (Some(x), Some(y)) => cosine(&x, &y),
            _ => 0.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Highest similarity between the response and any single persona line.
pub fn persona_similarity(vectors: &WordVectors, response: &str, persona: &[String]) -> f64 {
    persona
        .iter()
        .map(|p| vectors.similarity(response, p))
        .fold(0.0, f64::max)
}

/// Sentences used to fit the filter's word vectors.
pub fn persona_sentences(samples: &[DialogSample]) -> Vec<&str> {
    samples
        .iter()
        .flat_map(|s| {
            s.persona
                .iter()
                .chain(s.history.iter())
                .chain(s.response.iter())
                .map(String::as_str)
        })
        .collect()
}

/// Drops, each with probability `drop_prob`, samples whose response is
/// dissimilar to the persona, overlong, or mentions a filtered keyword.
pub fn filter_persona_corpus(
    samples: &[DialogSample],
    vectors: &WordVectors,
    cfg: &PersonaFilterConfig,
    seed: u64,
) -> Vec<DialogSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        let response = s.response.as_deref().unwrap_or("");
        let mut drop = false;
        if persona_similarity(vectors, response, &s.persona) < cfg.threshold {
            drop |= rng.gen::<f64>() < cfg.drop_prob;
        }
        let too_long = response.chars().count() > cfg.length_cap;
        let keyword = cfg.keywords.iter().any(|k| !k.is_empty() && response.contains(k.as_str()));
        if too_long || keyword {
            drop |= rng.gen::<f64>() < cfg.drop_prob;
        }
        if !drop {
            kept.push(s.clone());
        }
    }
    kept
}

//! Automatic dialog metrics.
//!
//! All metrics work on characters with whitespace removed. Corpus-level F1
//! and BLEU are means of sentence scores; DISTINCT pools n-grams over every
//! hypothesis. The aggregate score sums task-averaged `F1/100 + BLEU-1 +
//! BLEU-2`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

fn chars(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

fn counts<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap<T: Eq + Hash>(hyp: &HashMap<T, usize>, reference: &HashMap<T, usize>) -> usize {
    hyp.iter()
        .map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0)))
        .sum()
}

/// Character-multiset F1 on a 0-100 scale.
pub fn char_f1(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (chars(hyp), chars(reference));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&counts(h.iter().copied()), &counts(r.iter().copied()));
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    100.0 * 2.0 * p * rc / (p + rc)
}

fn ngrams(cs: &[char], n: usize) -> impl Iterator<Item = &[char]> {
    cs.windows(n)
}

/// Modified n-gram precision. Orders above one use add-one smoothing.
fn precision(h: &[char], r: &[char], n: usize) -> f64 {
    let hc = counts(ngrams(h, n));
    let rc = counts(ngrams(r, n));
    let total: usize = hc.values().sum();
    let matched = clipped_overlap(&hc, &rc);
    if n == 1 {
        if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        }
    } else {
        (matched as f64 + 1.0) / (total as f64 + 1.0)
    }
}

/// Sentence BLEU up to order `n` with uniform weights and brevity penalty.
pub fn bleu_n(hyp: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let (h, r) = (chars(hyp), chars(reference));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let log_mean = (1..=n)
        .map(|k| precision(&h, &r, k))
        .map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .sum::<f64>()
        / n as f64;
    let bp = if h.len() < r.len() {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    } else {
        1.0
    };
    bp * log_mean.exp()
}

/// Unique over total n-grams pooled across hypotheses; 0 with no n-grams.
pub fn distinct_n<S: AsRef<str>>(hyps: &[S], n: usize) -> f64 {
    let mut unique: HashSet<Vec<char>> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        let cs = chars(h.as_ref());
        for g in ngrams(&cs, n) {
            unique.insert(g.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// 0-100
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
}

impl TaskMetrics {
    /// Corpus metrics over aligned hypothesis/reference lists.
    pub fn compute<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Self {
        assert_eq!(hyps.len(), refs.len(), "hypotheses and references must align");
        if hyps.is_empty() {
            return Self::default();
        }
        let n = hyps.len() as f64;
        let mean = |f: &dyn Fn(&str, &str) -> f64| {
            hyps.iter().zip(refs).map(|(h, r)| f(h.as_ref(), r.as_ref())).sum::<f64>() / n
        };
        Self {
            f1: mean(&char_f1),
            bleu1: mean(&|h, r| bleu_n(h, r, 1)),
            bleu2: mean(&|h, r| bleu_n(h, r, 2)),
            distinct1: distinct_n(hyps, 1),
            distinct2: distinct_n(hyps, 2),
        }
    }
}

/// `mean(F1)/100 + mean(BLEU-1) + mean(BLEU-2)` over tasks.
pub fn aggregate_score(per_task: &[TaskMetrics]) -> f64 {
    if per_task.is_empty() {
        return 0.0;
    }
    let n = per_task.len() as f64;
    let f1 = per_task.iter().map(|m| m.f1).sum::<f64>() / n;
    let b1 = per_task.iter().map(|m| m.bleu1).sum::<f64>() / n;
    let b2 = per_task.iter().map(|m| m.bleu2).sum::<f64>() / n;
    f1 / 100.0 + b1 + b2
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
    pub score: f64,
}

impl MetricsReport {
    pub fn new(tasks: BTreeMap<String, TaskMetrics>) -> Self {
        let per: Vec<TaskMetrics> = tasks.values().copied().collect();
        Self {
            score: aggregate_score(&per),
            tasks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_cases() {
        assert!((char_f1("你好吗", "你好吗") - 100.0).abs() < 1e-12);
        assert_eq!(char_f1("abc", "xyz"), 0.0);
        assert!((char_f1("abc", "abd") - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(char_f1("", "abc"), 0.0);
        assert!((char_f1("a b", "ab") - 100.0).abs() < 1e-12);
    }

    #[test]
    fn f1_asymmetry_under_unequal_lengths() {
        // hyp "aab" vs ref "ab": overlap 2, P=2/3, R=1 -> F1 = 0.8;
        // swapping P and R leaves the harmonic mean unchanged.
        assert!((char_f1("aab", "ab") - 80.0).abs() < 1e-9);
        assert!((char_f1("ab", "aab") - 80.0).abs() < 1e-9);
        // per-side precision differs, which is where the asymmetry lives
        assert!((precision(&chars("aab"), &chars("ab"), 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((precision(&chars("ab"), &chars("aab"), 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_cases() {
        assert!((bleu_n("今天天气", "今天天气", 1) - 1.0).abs() < 1e-12);
        assert!((bleu_n("今天天气", "今天天气", 2) - 1.0).abs() < 1e-12);
        let b = bleu_n("ab", "ba", 2);
        assert!(b > 0.0 && b < 1.0, "{b}");
        // p1 = 2/3 clipped, BP = 1; p2 = (1+1)/(2+1)
        assert!((bleu_n("aab", "ab", 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu_n("aab", "ab", 2) - (2.0f64 / 3.0 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
        // brevity penalty: hyp "a" vs ref "ab" -> exp(1 - 2)
        assert!((bleu_n("a", "ab", 1) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu_n("abc", "xyz", 1), 0.0);
    }

    #[test]
    fn distinct_cases() {
        assert!((distinct_n(&["abab"], 1) - 0.5).abs() < 1e-12);
        assert!((distinct_n(&["abab"], 2) - 2.0 / 3.0).abs() < 1e-12);
        assert!((distinct_n(&["a", "a", "a", "a"], 1) - 0.25).abs() < 1e-12);
        assert_eq!(distinct_n::<&str>(&[], 1), 0.0);
        assert_eq!(distinct_n(&["a"], 2), 0.0);
    }

    fn row(f1: f64, b1: f64, b2: f64) -> TaskMetrics {
        TaskMetrics { f1, bleu1: b1, bleu2: b2, ..Default::default() }
    }

    #[test]
    fn aggregate_reproduces_published_rows() {
        for (f1, b1, b2, score) in [
            (38.62, 0.333, 0.215, 0.934),
            (36.00, 0.314, 0.198, 0.872),
            (28.98, 0.271, 0.145, 0.705),
            (24.51, 0.215, 0.113, 0.573),
            (23.66, 0.220, 0.108, 0.565),
            (22.33, 0.202, 0.096, 0.522),
            (17.05, 0.141, 0.061, 0.373),
        ] {
            assert!((aggregate_score(&[row(f1, b1, b2)]) - score).abs() <= 1e-3, "{f1}");
        }
        assert_eq!(aggregate_score(&[row(0.0, 0.0, 0.0)]), 0.0);
    }

    #[test]
    fn report_averages_tasks() {
        let mut tasks = BTreeMap::new();
        tasks.insert("a".to_string(), row(40.0, 0.3, 0.2));
        tasks.insert("b".to_string(), row(20.0, 0.1, 0.0));
        let r = MetricsReport::new(tasks);
        assert!((r.score - (0.3 + 0.2 + 0.1)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_are_order_free(pairs in proptest::collection::vec(("[abc你好]{0,6}", "[abc你好]{1,6}"), 1..8), rot in 0usize..8) {
            let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
            let k = rot % hyps.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let a = TaskMetrics::compute(&hyps, &refs);
            let b = TaskMetrics::compute(&h2, &r2);
            prop_assert!((a.f1 - b.f1).abs() < 1e-9);
            prop_assert!((a.bleu2 - b.bleu2).abs() < 1e-12);
            prop_assert_eq!(a.distinct1, b.distinct1);
            prop_assert_eq!(a.distinct2, b.distinct2);
            prop_assert!(a.f1 >= 0.0 && a.f1 <= 100.0 && a.bleu1 <= 1.0 && a.bleu2 <= 1.0);
        }
    }
}

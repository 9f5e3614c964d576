//! Pre-training corpus shaping.

use crate::sample::{Dialog, HistoryResponse};

/// Cuts each dialog into history/response pairs: a `k`-turn dialog yields
/// `k - 1` pairs whose histories are the growing prefixes.
pub fn shape_pretraining_corpus(dialogs: &[Dialog]) -> Vec<HistoryResponse> {
    dialogs
        .iter()
        .flat_map(|d| {
            (1..d.turns.len()).map(move |j| HistoryResponse {
                history: d.turns[..j].to_vec(),
                response: d.turns[j].clone(),
            })
        })
        .collect()
}

/// Keeps the `ceil(N/2)` pairs with the longest responses (by character
/// count; earlier pairs win ties), in their original order.
pub fn select_longer_half(pairs: &[HistoryResponse]) -> Vec<HistoryResponse> {
    let keep = pairs.len().div_ceil(2);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[b]
            .response
            .chars()
            .count()
            .cmp(&pairs[a].response.chars().count())
            .then(a.cmp(&b))
    });
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pairs[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialog(turns: &[&str]) -> Dialog {
        Dialog {
            turns: turns.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn two_turns_one_pair() {
        let pairs = shape_pretraining_corpus(&[dialog(&["a", "b"])]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].history, vec!["a".to_string()]);
        assert_eq!(pairs[0].response, "b");
    }

    #[test]
    fn four_turns_growing_histories() {
        let pairs = shape_pretraining_corpus(&[dialog(&["a", "b", "c", "d"])]);
        assert_eq!(pairs.len(), 3);
        for w in pairs.windows(2) {
            assert!(w[1].history.len() > w[0].history.len());
            assert!(w[1].history.starts_with(&w[0].history));
        }
        assert!(shape_pretraining_corpus(&[dialog(&["solo"])]).is_empty());
    }

    #[test]
    fn longer_half_by_length() {
        let pairs: Vec<HistoryResponse> = [3, 9, 5, 1]
            .iter()
            .map(|&n| HistoryResponse {
                history: vec!["h".into()],
                response: "字".repeat(n),
            })
            .collect();
        let half = select_longer_half(&pairs);
        let lens: Vec<usize> = half.iter().map(|p| p.response.chars().count()).collect();
        assert_eq!(lens, vec![9, 5]);
    }

    #[test]
    fn longer_half_rounds_up_and_breaks_ties_by_order() {
        let pairs: Vec<HistoryResponse> = ["aa", "bb", "cc"]
            .iter()
            .map(|r| HistoryResponse {
                history: vec![],
                response: r.to_string(),
            })
            .collect();
        let half = select_longer_half(&pairs);
        assert_eq!(half.len(), 2);
        assert_eq!(half[0].response, "aa");
        assert_eq!(half[1].response, "bb");
    }
}

//! Line formats passed between subcommands.

use msdf_core::Candidate;
use msdf_serve::ScoredCandidate;
use msdf_text::Task;
use serde::{Deserialize, Serialize};

/// One line of `generate` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    /// Line number of the input sample, from 0.
    pub index: usize,
    pub task: Task,
    /// Raw history, as the selector reads it.
    pub history: Vec<String>,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
}

/// One line of `rerank` output. Candidates keep pool order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub index: usize,
    pub task: Task,
    pub response: String,
    pub chosen_index: usize,
    pub candidates: Vec<ScoredCandidate>,
}

/// What `eval` needs from a hypothesis line.
#[derive(Clone, Debug, Deserialize)]
pub struct Hypothesis {
    pub response: String,
    #[serde(default)]
    pub task: Option<Task>,
}

//! Text side of the dialog framework: vocabulary and tokenizer, the sample
//! schema, per-task preprocessing and response postprocessing, the persona
//! similarity filter, pre-training corpus shaping and synthetic corpora.

pub mod persona_filter;
pub mod preprocess;
pub mod pretraining;
pub mod sample;
pub mod synthetic;
pub mod vocab;

pub use preprocess::{PipelineConfig, Rewriter};
pub use sample::{DialogSample, KnowledgeItem, PlaceholderMap, ProcessedSample, Task};
pub use vocab::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("{0} required")]
    MissingSource(&'static str),
    #[error("malformed triple {0:?}: expected three non-empty parts")]
    MalformedTriple(Vec<String>),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json (line {line}): {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

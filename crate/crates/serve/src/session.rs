//! Chat sessions as a fold over journaled events.

use std::collections::BTreeMap;

use msdf_core::DecodingParams;
use msdf_text::{DialogSample, KnowledgeItem, PlaceholderMap, Task};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub text: String,
    pub gen_logprob: f64,
    pub consistency: f64,
}

/// The pool behind the latest bot turn, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub candidates: Vec<ScoredCandidate>,
    /// Index the selector picked.
    pub chosen_index: usize,
    /// Index currently shown as the bot turn (differs after an override).
    pub shown_index: usize,
    pub decoding: DecodingParams,
}

/// Session context fixed at creation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionContext {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<KnowledgeItem>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub persona: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub user_profile: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub situation: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub goal: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub task: Task,
    #[serde(flatten)]
    pub context: SessionContext,
    pub placeholder_map: PlaceholderMap,
    pub transcript: Vec<Turn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_pool: Option<Pool>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

/// One journal line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        task: Task,
        context: SessionContext,
        placeholder_map: PlaceholderMap,
        at: u64,
    },
    Message {
        user: String,
        pool: Pool,
        at: u64,
    },
    Chose {
        candidate_index: usize,
        at: u64,
    },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ApplyError {
    #[error("session does not exist yet")]
    NotCreated,
    #[error("session already exists")]
    AlreadyCreated,
    #[error("no candidate pool to choose from")]
    NoPool,
    #[error("candidate_index {index} out of range for a pool of {len}")]
    OutOfRange { index: usize, len: usize },
}

impl Session {
    pub fn from_event(e: &Event) -> Result<Self, ApplyError> {
        match e {
            Event::Created {
                session_id,
                task,
                context,
                placeholder_map,
                at,
            } => Ok(Self {
                session_id: session_id.clone(),
                task: *task,
                context: context.clone(),
                placeholder_map: placeholder_map.clone(),
                transcript: Vec::new(),
                last_pool: None,
                created_at: *at,
                updated_at: *at,
            }),
            _ => Err(ApplyError::NotCreated),
        }
    }

    /// Checks an event against the current state without applying it.
    pub fn check(&self, e: &Event) -> Result<(), ApplyError> {
        match e {
            Event::Created { .. } => Err(ApplyError::AlreadyCreated),
            Event::Message { pool, .. } if pool.candidates.is_empty() => Err(ApplyError::NoPool),
            Event::Message { .. } => Ok(()),
            Event::Chose { candidate_index, .. } => {
                let pool = self.last_pool.as_ref().ok_or(ApplyError::NoPool)?;
                if *candidate_index >= pool.candidates.len() {
                    return Err(ApplyError::OutOfRange {
                        index: *candidate_index,
                        len: pool.candidates.len(),
                    });
                }
                Ok(())
            }
        }
    }

    pub fn apply(&mut self, e: &Event) -> Result<(), ApplyError> {
        self.check(e)?;
        match e {
            Event::Created { .. } => unreachable!("rejected by check"),
            Event::Message { user, pool, at } => {
                let reply = pool.candidates[pool.shown_index].text.clone();
                self.transcript.push(Turn {
                    role: Role::User,
                    text: user.clone(),
                });
                self.transcript.push(Turn {
                    role: Role::Bot,
                    text: reply,
                });
                self.last_pool = Some(pool.clone());
                self.updated_at = *at;
            }
            Event::Chose { candidate_index, at } => {
                let pool = self.last_pool.as_mut().expect("checked");
                pool.shown_index = *candidate_index;
                let text = pool.candidates[*candidate_index].text.clone();
                let last = self.transcript.last_mut().expect("a pool implies a bot turn");
                last.text = text;
                self.updated_at = *at;
            }
        }
        Ok(())
    }

    /// Completed user turns.
    pub fn user_turns(&self) -> usize {
        self.transcript.iter().filter(|t| t.role == Role::User).count()
    }

    /// The sample for the next bot turn after `user` speaks.
    pub fn sample_for(&self, user: &str) -> DialogSample {
        let mut history: Vec<String> = self.transcript.iter().map(|t| t.text.clone()).collect();
        history.push(user.to_string());
        let mut s = DialogSample::new(self.task, history);
        s.knowledge = self.context.knowledge.clone();
        s.persona = self.context.persona.clone();
        s.user_profile = self.context.user_profile.clone();
        s.situation = self.context.situation.clone();
        s.goal = self.context.goal.clone();
        s.placeholder_map = self.placeholder_map.clone();
        s
    }
}

//! The chat service and a terminal client for it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use msdf_core::checkpoint;
use msdf_core::{GeneratorModel, SelectorModel};
use msdf_serve::{AppState, Journal, MessageReply, Models, ServiceConfig};
use msdf_text::{PipelineConfig, Rewriter};
use serde_json::{json, Value};

use crate::files::load_toml;
use crate::{ChatArgs, ServeArgs};

pub fn load_models(a: &ServeArgs) -> Result<Models> {
    let mut generators = BTreeMap::new();
    for path in &a.generators {
        let m: GeneratorModel = checkpoint::load(path)?.model;
        let task = m
            .task
            .with_context(|| format!("{} is a pre-trained model; serve needs fine-tuned ones", path.display()))?;
        if generators.insert(task, m).is_some() {
            bail!("two generators for task {task}");
        }
    }
    let selector: SelectorModel = checkpoint::load(&a.selector)?.model;
    Ok(Models { generators, selector })
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let models = load_models(a)?;
    let pipeline: PipelineConfig = load_toml(a.config.as_deref())?;
    let mut config = ServiceConfig {
        rewriter: Rewriter::new(&pipeline.rules)?,
        pipeline,
        ..ServiceConfig::default()
    };
    if let Some(w) = a.workers {
        config.workers = w;
    }
    let journal = a.journal_dir.as_ref().map(Journal::open).transpose()?;
    let state = AppState::new(models, config, journal)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        msdf_serve::serve(listener, state).await?;
        Ok(())
    })
}

async fn send(req: reqwest::RequestBuilder) -> Result<Value> {
    let resp = req.send().await?;
    let status = resp.status();
    let body: Value = resp.json().await.unwrap_or(Value::Null);
    if !status.is_success() {
        let msg = body.get("error").and_then(Value::as_str).unwrap_or("request failed");
        bail!("{status}: {msg}");
    }
    Ok(body)
}

fn show_pool(reply: &MessageReply) {
    println!("bot> {}", reply.reply);
    for (i, c) in reply.candidates.iter().enumerate() {
        let mark = if i == reply.chosen_index { '*' } else { ' ' };
        println!("  {mark}{i:>2} [{:.3}] {}", c.consistency, c.text);
    }
}

/// Reads user turns from stdin. `/choose N` overrides the last reply,
/// `/quit` ends the session.
pub fn chat(a: &ChatArgs) -> Result<()> {
    let mut create = match &a.context {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Value>(&text)?
        }
        None => json!({}),
    };
    let obj = create.as_object_mut().context("context must be a JSON object")?;
    obj.insert("task".into(), json!(a.task));
    let base = a.url.trim_end_matches('/').to_string();
    let client = reqwest::Client::new();
    let rt = tokio::runtime::Runtime::new()?;
    let created = rt.block_on(send(client.post(format!("{base}/v1/sessions")).json(&create)))?;
    let id = created["session_id"].as_str().context("no session id in reply")?.to_string();
    println!("session {id}; /choose N overrides the last reply, /quit leaves");
    let mut turn = 0u64;
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        let result = if let Some(n) = line.strip_prefix("/choose") {
            let index: usize = match n.trim().parse() {
                Ok(i) => i,
                Err(_) => {
                    eprintln!("usage: /choose N");
                    continue;
                }
            };
            rt.block_on(send(
                client
                    .post(format!("{base}/v1/sessions/{id}/choose"))
                    .json(&json!({ "candidate_index": index })),
            ))
            .map(|v| println!("bot> {}", v["reply"].as_str().unwrap_or_default()))
        } else {
            let mut decoding = json!({});
            if let Some(p) = a.pool_size {
                decoding["pool_size"] = json!(p);
            }
            if let Some(s) = a.seed {
                decoding["seed"] = json!(s.wrapping_add(turn));
            }
            turn += 1;
            rt.block_on(send(
                client
                    .post(format!("{base}/v1/sessions/{id}/messages"))
                    .json(&json!({ "text": line, "decoding": decoding })),
            ))
            .and_then(|v| Ok(serde_json::from_value::<MessageReply>(v)?))
            .map(|r| show_pool(&r))
        };
        if let Err(e) = result {
            eprintln!("error: {e:#}");
        }
    }
    Ok(())
}

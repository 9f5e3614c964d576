//! Data preparation, generation, reranking and evaluation.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use msdf_core::checkpoint;
use msdf_core::{CandidatePool, DecodingParams, GeneratorModel, SelectorModel};
use msdf_eval::{MetricsReport, TaskMetrics};
use msdf_serve::ScoredCandidate;
use msdf_text::persona_filter::{filter_persona_corpus, persona_sentences, WordVectors};
use msdf_text::sample::Dialog;
use msdf_text::synthetic;
use msdf_text::preprocess::preprocess as preprocess_sample;
use msdf_text::{DialogSample, PipelineConfig, ProcessedSample, Rewriter, Task};

use crate::files::{load_toml, read_lines, write_json, write_lines};
use crate::records::{FinalRecord, Hypothesis, PoolRecord};
use crate::{EvalArgs, GenerateArgs, PreprocessArgs, RerankArgs, SynthArgs, SynthKind};

pub fn synth(a: &SynthArgs) -> Result<()> {
    match a.kind {
        SynthKind::Demo => {
            let task = a.task.context("--task is required for the demo corpus")?;
            write_lines(&a.out, &synthetic::demo_corpus(task, a.n, a.seed))
        }
        SynthKind::Dialogs => write_lines(&a.out, &synthetic::demo_dialogs(a.n, a.seed)),
        SynthKind::Copy => {
            let entities = synthetic::entity_names(a.entities.max(2), a.seed);
            write_lines(&a.out, &synthetic::copy_task(a.n, &entities, a.seed.wrapping_add(1)))
        }
        SynthKind::Memorize => {
            let dialogs: Vec<Dialog> = synthetic::memorization_corpus(a.n, a.seed)
                .into_iter()
                .map(|p| Dialog {
                    turns: p.history.into_iter().chain([p.response]).collect(),
                })
                .collect();
            write_lines(&a.out, &dialogs)
        }
    }
}

/// Raw samples of `task`, or an error naming the first line of another task.
pub fn check_task(samples: &[DialogSample], task: Task) -> Result<()> {
    if let Some(i) = samples.iter().position(|s| s.task != task) {
        bail!("line {}: {} sample in a {task} corpus", i + 1, samples[i].task);
    }
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg: PipelineConfig = load_toml(a.config.as_deref())?;
    let mut samples: Vec<DialogSample> = read_lines(&a.input)?;
    check_task(&samples, a.task)?;
    let total = samples.len();
    if a.task == Task::Persona {
        let f = &cfg.persona_filter;
        let vectors = WordVectors::train(persona_sentences(&samples), f.vector_dim, f.window, f.epochs, a.seed);
        samples = filter_persona_corpus(&samples, &vectors, f, a.seed);
        log::info!("persona filter kept {} of {total} samples", samples.len());
    }
    let mut out: Vec<ProcessedSample> = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        match preprocess_sample(s, &cfg) {
            Ok(p) => out.push(p),
            Err(e) if a.skip_invalid => log::warn!("skipping sample {i}: {e}"),
            Err(e) => return Err(e).with_context(|| format!("sample {i}")),
        }
    }
    log::info!("wrote {} of {total} samples to {}", out.len(), a.out.display());
    write_lines(&a.out, &out)
}

pub fn decoding(d: &crate::DecodingArgs, index: usize) -> DecodingParams {
    DecodingParams {
        pool_size: d.pool_size,
        top_k: d.top_k,
        temperature: d.temperature,
        max_new_tokens: d.max_new_tokens,
        seed: d.seed.wrapping_add(index as u64),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let cfg: PipelineConfig = load_toml(a.config.as_deref())?;
    let rewriter = Rewriter::new(&cfg.rules)?;
    let model: GeneratorModel = checkpoint::load(&a.model)?.model;
    let samples: Vec<DialogSample> = read_lines(&a.input)?;
    if let Some(task) = model.task {
        check_task(&samples, task)?;
    }
    decoding(&a.decoding, 0).validate()?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let dec = decoding(&a.decoding, i);
        let (_, pool) = model.respond(s, &cfg, &rewriter, &dec).with_context(|| format!("sample {i}"))?;
        out.push(PoolRecord {
            index: i,
            task: s.task,
            history: s.history.clone(),
            seed: dec.seed,
            candidates: pool.candidates,
        });
    }
    write_lines(&a.out, &out)
}

pub fn rerank(a: &RerankArgs) -> Result<()> {
    let selector: SelectorModel = checkpoint::load(&a.selector)?.model;
    let pools: Vec<PoolRecord> = read_lines(&a.pools)?;
    let mut out = Vec::with_capacity(pools.len());
    for rec in pools {
        let pool = CandidatePool {
            pool_size: rec.candidates.len(),
            candidates: rec.candidates,
        };
        let r = selector
            .select_final(&pool, &rec.history)
            .with_context(|| format!("pool {}", rec.index))?;
        out.push(FinalRecord {
            index: rec.index,
            task: rec.task,
            response: r.chosen().text.clone(),
            chosen_index: r.chosen,
            candidates: r
                .candidates
                .iter()
                .zip(&r.scores)
                .map(|(c, &s)| ScoredCandidate {
                    text: c.text.clone(),
                    gen_logprob: c.gen_logprob,
                    consistency: s,
                })
                .collect(),
        });
    }
    write_lines(&a.out, &out)
}

/// Per-task metrics over aligned hypothesis and reference files.
pub fn eval(a: &EvalArgs) -> Result<MetricsReport> {
    let hyps: Vec<Hypothesis> = read_lines(&a.hyp)?;
    let refs: Vec<DialogSample> = read_lines(&a.reference)?;
    if hyps.len() != refs.len() {
        bail!("{} hypotheses for {} references", hyps.len(), refs.len());
    }
    let mut grouped: BTreeMap<Task, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
        if h.task.is_some_and(|t| t != r.task) {
            bail!("line {}: {} hypothesis for a {} reference", i + 1, h.task.unwrap(), r.task);
        }
        let gold = r
            .response
            .as_deref()
            .with_context(|| format!("reference line {} has no response", i + 1))?;
        let slot = grouped.entry(r.task).or_default();
        slot.0.push(&h.response);
        slot.1.push(gold);
    }
    let tasks = grouped
        .into_iter()
        .map(|(t, (h, r))| (t.to_string(), TaskMetrics::compute(&h, &r)))
        .collect();
    let report = MetricsReport::new(tasks);
    for (t, m) in &report.tasks {
        println!(
            "{t}: F1 {:.2}  BLEU-1/2 {:.3}/{:.3}  DISTINCT-1/2 {:.3}/{:.3}",
            m.f1, m.bleu1, m.bleu2, m.distinct1, m.distinct2
        );
    }
    println!("SCORE {:.3}", report.score);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Every string of a sample that can reach a model, raw and preprocessed.
pub fn sample_texts(s: &DialogSample, cfg: &PipelineConfig) -> Vec<String> {
    let mut out: Vec<String> = s.history.clone();
    out.extend(s.response.iter().cloned());
    out.extend(s.persona.iter().cloned());
    out.extend(s.goal.iter().cloned());
    out.push(s.situation.clone());
    for (k, v) in &s.user_profile {
        out.push(format!("{k} {v}"));
    }
    if let Ok(p) = preprocess_sample(s, cfg) {
        out.extend(p.history);
        out.extend(p.knowledge);
        out.extend(p.persona);
        out.extend(p.target);
    }
    out
}

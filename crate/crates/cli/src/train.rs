//! Pre-training, fine-tuning and selector training.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use msdf_core::checkpoint::{self, Checkpointable};
use msdf_core::selector::{build_pairs, gold_pairs};
use msdf_core::trainer::{self, Stop, TrainOutcome, TrainState, Trainable};
use msdf_core::{Architecture, Example, GeneratorModel, LogRecord, ModelConfig, Phase, SelectorModel, TrainConfig};
use msdf_text::pretraining::{select_longer_half, shape_pretraining_corpus};
use msdf_text::sample::Dialog;
use msdf_text::{DialogSample, PipelineConfig, ProcessedSample, Task, Vocab};
use serde::Serialize;
use serde_json::json;

use crate::files::{load_toml, read_lines};
use crate::infer::sample_texts;
use crate::{FinetuneArgs, Preset, PretrainArgs, TrainArgs, TrainSelectorArgs};

/// Training config for one phase: the preset with command-line overrides.
pub fn train_config(a: &TrainArgs, phase: Phase, task: Option<Task>) -> Result<TrainConfig> {
    let mut c = match a.preset {
        Preset::Desk => TrainConfig::desk(phase, task),
        Preset::Paper => TrainConfig::paper(phase, task),
    };
    c.seed = a.seed;
    if let Some(lr) = a.lr {
        c.lr = lr;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(e) = a.epochs {
        c.max_epochs = e;
    }
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    if a.grad_clip.is_some() {
        c.grad_clip = a.grad_clip;
    }
    if a.no_clip {
        c.grad_clip = None;
    }
    if a.eval_every.is_some() {
        c.eval_every = a.eval_every;
    }
    c.validate()?;
    Ok(c)
}

#[derive(Serialize)]
struct LogLine<'a> {
    phase: Phase,
    #[serde(flatten)]
    record: &'a LogRecord,
}

/// JSON-lines training log. A resumed run appends.
struct LogSink {
    out: Option<BufWriter<File>>,
    failed: Option<std::io::Error>,
}

impl LogSink {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let out = match path {
            None => None,
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)
                    .with_context(|| format!("opening {}", p.display()))?;
                Some(BufWriter::new(f))
            }
        };
        Ok(Self { out, failed: None })
    }

    fn write(&mut self, phase: Phase, record: &LogRecord) {
        match record.dev_loss {
            Some(d) => log::info!("{phase:?} step {} loss {:.4} dev {d:.4}", record.step, record.loss),
            None if record.step.is_multiple_of(50) => log::info!("{phase:?} step {} loss {:.4}", record.step, record.loss),
            None => {}
        }
        let Some(out) = &mut self.out else { return };
        if self.failed.is_some() {
            return;
        }
        let line = serde_json::to_string(&LogLine { phase, record }).expect("log records serialize");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            self.failed = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.failed {
            Some(e) => Err(e).context("writing the training log"),
            None => Ok(()),
        }
    }
}

fn run_phase<M: Trainable<f64>>(
    model: &mut M,
    train: &[M::Example],
    dev: &[M::Example],
    cfg: &TrainConfig,
    resume: Option<TrainState<f64>>,
    log: &mut LogSink,
) -> Result<TrainOutcome<f64>> {
    let out = trainer::train(model, train, dev, cfg, resume, &mut |r| log.write(cfg.phase, r))?;
    match &out.stop {
        Stop::Completed => log::info!("{:?} finished after {} steps", cfg.phase, out.state.step),
        Stop::MaxSteps => log::info!("{:?} stopped at step {}", cfg.phase, out.state.step),
        Stop::Diverged { .. } => {}
    }
    if let Some(best) = out.state.best_dev {
        log::info!("best dev loss {best:.4} at step {}", out.state.best_step);
    }
    Ok(out)
}

/// Writes the best parameters to `out` and, if asked, the last ones with
/// optimizer state to `state_out`. A diverged run still saves its last good
/// parameters, then fails.
fn finish<M: Checkpointable<f64> + Clone>(
    model: &M,
    outcome: &TrainOutcome<f64>,
    out: &Path,
    state_out: Option<&Path>,
    extra: serde_json::Value,
) -> Result<()> {
    if let Some(p) = state_out {
        checkpoint::save(model, p, extra.clone(), Some(&outcome.state))?;
    }
    let mut best = model.clone();
    *best.params_mut() = outcome.best_params(model).clone();
    checkpoint::save(&best, out, extra, None)?;
    log::info!("saved {}", out.display());
    if let Some(e) = outcome.diverged() {
        return Err(e).context(format!("last good parameters saved to {}", out.display()));
    }
    Ok(())
}

fn resume_phase(extra: &serde_json::Value) -> Result<Phase> {
    let v = extra.get("phase").context("checkpoint does not record a training phase")?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let pipe: PipelineConfig = load_toml(a.config.as_deref())?;
    let dialogs: Vec<Dialog> = read_lines(&a.corpus)?;
    let dev_dialogs: Vec<Dialog> = match &a.dev {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let pairs = shape_pretraining_corpus(&dialogs);
    if pairs.is_empty() {
        bail!("{} holds no dialog with two or more turns", a.corpus.display());
    }
    let longer = select_longer_half(&pairs);
    log::info!("{} pairs, {} in the longer-response half", pairs.len(), longer.len());

    let (mut model, resume) = match &a.train.resume {
        Some(p) => {
            let l = checkpoint::load::<f64, GeneratorModel>(p)?;
            let phase = resume_phase(&l.extra)?;
            let state = l.state.context("checkpoint carries no training state")?;
            (l.model, Some((phase, state)))
        }
        None => {
            let mut texts: Vec<String> = dialogs.iter().flat_map(|d| d.turns.iter().cloned()).collect();
            texts.extend(dev_dialogs.iter().flat_map(|d| d.turns.iter().cloned()));
            for path in &a.vocab_from {
                let samples: Vec<DialogSample> = read_lines(path)?;
                texts.extend(samples.iter().flat_map(|s| sample_texts(s, &pipe)));
            }
            // histories are joined with spaces
            texts.push(" ".into());
            let vocab = Vocab::build(texts.iter().map(String::as_str), a.min_count);
            let cfg: ModelConfig = load_toml(a.train.model_config.as_deref())?;
            let m = GeneratorModel::new(cfg, Architecture::history_only(), None, vocab, a.train.seed)?;
            log::info!("vocabulary {} tokens, {} parameters", m.vocab.len(), m.n_params());
            (m, None)
        }
    };
    if model.task.is_some() {
        bail!("cannot resume pre-training from a fine-tuned model");
    }
    let examples = |ps: &[msdf_text::sample::HistoryResponse]| -> Result<Vec<Example>> {
        ps.iter()
            .map(|p| Ok(model.pair_example(p, pipe.max_history_tokens)?))
            .collect()
    };
    let all = examples(&pairs)?;
    let half = examples(&longer)?;
    let dev = examples(&shape_pretraining_corpus(&dev_dialogs))?;

    let phase1 = train_config(&a.train, Phase::Pretrain, None)?;
    let phase2 = train_config(&a.train, Phase::PretrainLongerHalf, None)?;
    let mut log = LogSink::open(a.train.log.as_deref(), resume.is_some())?;
    let state_out = a.train.state_out.as_deref();

    let second_start = match resume {
        Some((Phase::PretrainLongerHalf, state)) => state,
        other => {
            let state = other.map(|(phase, s)| {
                if phase != Phase::Pretrain {
                    log::warn!("resuming a {phase:?} checkpoint as pre-training");
                }
                s
            });
            let first = run_phase(&mut model, &all, &dev, &phase1, state, &mut log)?;
            if first.stop != Stop::Completed && first.stop != Stop::MaxSteps {
                return finish(&model, &first, &a.out, state_out, json!({ "phase": Phase::Pretrain }));
            }
            if let Some(p) = state_out {
                checkpoint::save(&model, p, json!({ "phase": Phase::Pretrain }), Some(&first.state))?;
            }
            let mut start = TrainState::new(&model, phase2.adam.clone());
            start.best_dev = first.state.best_dev;
            start.best_step = first.state.best_step;
            start.best = first.state.best;
            start
        }
    };
    let second = run_phase(&mut model, &half, &dev, &phase2, Some(second_start), &mut log)?;
    log.finish()?;
    finish(&model, &second, &a.out, state_out, json!({ "phase": Phase::PretrainLongerHalf }))
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let pipe: PipelineConfig = load_toml(a.config.as_deref())?;
    let corpus: Vec<ProcessedSample> = read_lines(&a.corpus)?;
    let dev: Vec<ProcessedSample> = match &a.dev {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    for (name, set) in [("corpus", &corpus), ("dev", &dev)] {
        if let Some(i) = set.iter().position(|p| p.task != a.task) {
            bail!("{name} line {}: {} sample for a {} model", i + 1, set[i].task, a.task);
        }
    }
    let (mut model, state) = match &a.train.resume {
        Some(p) => {
            let l = checkpoint::load::<f64, GeneratorModel>(p)?;
            if l.model.task != Some(a.task) {
                bail!("{} is not a {} fine-tuning checkpoint", p.display(), a.task);
            }
            (l.model, Some(l.state.context("checkpoint carries no training state")?))
        }
        None => {
            let pre: GeneratorModel = checkpoint::load(&a.pretrained)?.model;
            let base = Architecture::for_task(a.task);
            // the copy head reads knowledge; persona models have none
            let arch = Architecture {
                shared_kp_encoder: base.shared_kp_encoder && !a.separate_encoders,
                ..base
            }
            .with_copy(base.knowledge && !a.no_copy);
            (GeneratorModel::finetune_init(&pre, a.task, arch, a.train.seed)?, None)
        }
    };
    let examples = |set: &[ProcessedSample]| -> Result<Vec<Example>> {
        set.iter()
            .enumerate()
            .map(|(i, p)| {
                if p.target.is_none() {
                    bail!("sample {i} has no target response");
                }
                Ok(model.example(p, pipe.max_history_tokens)?)
            })
            .collect()
    };
    let train = examples(&corpus)?;
    let dev = examples(&dev)?;
    let cfg = train_config(&a.train, Phase::Finetune, Some(a.task))?;
    let mut log = LogSink::open(a.train.log.as_deref(), state.is_some())?;
    let outcome = run_phase(&mut model, &train, &dev, &cfg, state, &mut log)?;
    log.finish()?;
    finish(&model, &outcome, &a.out, a.train.state_out.as_deref(), json!({ "phase": Phase::Finetune }))
}

pub fn train_selector(a: &TrainSelectorArgs) -> Result<()> {
    let corpus: Vec<DialogSample> = read_lines(&a.corpus)?;
    let dev: Vec<DialogSample> = match &a.dev {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let tasks: BTreeSet<Task> = corpus.iter().chain(&dev).map(|s| s.task).collect();
    if tasks.len() > 1 && !a.joint {
        bail!("the corpus mixes {} tasks; train one selector per task or pass --joint", tasks.len());
    }
    let gold = gold_pairs(&corpus);
    let pairs = build_pairs(&gold, a.neg_ratio, a.train.seed)?;
    let dev_pairs = match gold_pairs(&dev) {
        d if d.is_empty() => Vec::new(),
        d => build_pairs(&d, a.neg_ratio, a.train.seed.wrapping_add(1))?,
    };
    let (mut model, state) = match &a.train.resume {
        Some(p) => {
            let l = checkpoint::load::<f64, SelectorModel>(p)?;
            (l.model, Some(l.state.context("checkpoint carries no training state")?))
        }
        None => {
            let mut texts: Vec<&str> = gold
                .iter()
                .flat_map(|p| p.history.iter().chain([&p.response]))
                .map(String::as_str)
                .collect();
            texts.push(" ");
            let vocab = Vocab::build(texts, 1);
            let cfg: ModelConfig = load_toml(a.train.model_config.as_deref())?;
            (SelectorModel::new(cfg, vocab, a.train.seed)?, None)
        }
    };
    log::info!("{} training pairs, {} dev pairs", pairs.len(), dev_pairs.len());
    let cfg = train_config(&a.train, Phase::Selector, None)?;
    let mut log = LogSink::open(a.train.log.as_deref(), state.is_some())?;
    let outcome = run_phase(&mut model, &pairs, &dev_pairs, &cfg, state, &mut log)?;
    log.finish()?;
    let extra = json!({ "phase": Phase::Selector, "neg_ratio": a.neg_ratio, "tasks": tasks });
    finish(&model, &outcome, &a.out, a.train.state_out.as_deref(), extra)?;
    if !dev_pairs.is_empty() {
        let best: SelectorModel = checkpoint::load(&a.out)?.model;
        println!("dev accuracy {:.3}", trainer::selector_accuracy(&best, &dev_pairs)?);
    }
    Ok(())
}

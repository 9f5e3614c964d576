use msdf_core::checkpoint::{self, Loaded};
use msdf_core::params::{GradBuffer, Parameterized};
use msdf_core::{Graph, ParamStore, Tensor};
use msdf_core::trainer::{self, Phase, Stop, TrainConfig, TrainState, Trainable};
use msdf_core::transformer::Dropout;
use msdf_core::{Architecture, Example, GeneratorModel, ModelConfig, ModelError, Var};
use msdf_text::pretraining::select_longer_half;
use msdf_text::synthetic::memorization_corpus;
use msdf_text::Vocab;
use proptest::prelude::*;

fn config() -> ModelConfig {
    ModelConfig {
        d: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        dropout: 0.1,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

fn setup(n: usize) -> (GeneratorModel, Vec<Example>) {
    let corpus = memorization_corpus(n, 5);
    let texts: Vec<&str> = corpus
        .iter()
        .flat_map(|p| p.history.iter().map(String::as_str).chain([p.response.as_str()]))
        .collect();
    let vocab = Vocab::build(texts, 1);
    let m = GeneratorModel::new(config(), Architecture::history_only(), None, vocab, 1).unwrap();
    let ex = corpus.iter().map(|p| m.pair_example(p, 16).unwrap()).collect();
    (m, ex)
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 5,
        max_epochs: 100,
        max_steps: Some(steps),
        eval_every: Some(4),
        seed: 9,
        ..TrainConfig::desk(Phase::Pretrain, None)
    }
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn training_is_bit_deterministic() {
    let (m0, ex) = setup(12);
    let run = || {
        let mut m = m0.clone();
        let out = trainer::train(&mut m, &ex, &ex[..4], &cfg(10), None, &mut |_| {}).unwrap();
        (out.log, bits(&m.params))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.last().unwrap().loss < a[0].loss);
}

#[test]
fn resume_mid_epoch_reproduces_the_uninterrupted_run() {
    let (m0, ex) = setup(12);
    // 12 examples in batches of 5: 3 batches per epoch, step 7 is mid-epoch
    let mut straight = m0.clone();
    let full = trainer::train(&mut straight, &ex, &ex[..4], &cfg(11), None, &mut |_| {}).unwrap();

    let mut first = m0.clone();
    let part = trainer::train(&mut first, &ex, &ex[..4], &cfg(7), None, &mut |_| {}).unwrap();
    assert_eq!(part.stop, Stop::MaxSteps);
    assert_eq!((part.state.epoch, part.state.batch_in_epoch), (2, 1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    checkpoint::save(&first, &path, serde_json::json!({"note": "mid"}), Some(&part.state)).unwrap();
    let Loaded { mut model, extra, state } = checkpoint::load::<f64, GeneratorModel>(&path).unwrap();
    assert_eq!(extra["note"], "mid");
    let rest = trainer::train(&mut model, &ex, &ex[..4], &cfg(11), state, &mut |_| {}).unwrap();

    let mut joined = part.log.clone();
    joined.extend(rest.log);
    assert_eq!(joined, full.log);
    assert_eq!(bits(&model.params), bits(&straight.params));
    assert_eq!(rest.state.best_dev, full.state.best_dev);
    assert_eq!(bits(rest.state.best.as_ref().unwrap()), bits(full.state.best.as_ref().unwrap()));
}

#[test]
fn checkpoint_roundtrip_then_one_step_matches() {
    let (m0, ex) = setup(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    checkpoint::save::<f64, _>(&m0, &path, serde_json::Value::Null, None).unwrap();
    let loaded = checkpoint::load::<f64, GeneratorModel>(&path).unwrap();
    assert!(loaded.state.is_none());
    assert_eq!(bits(&loaded.model.params), bits(&m0.params));
    assert_eq!(loaded.model.vocab, m0.vocab);
    assert_eq!(loaded.model.config, m0.config);

    let mut a = m0.clone();
    let mut b = loaded.model;
    let c = cfg(1);
    trainer::train(&mut a, &ex, &[], &c, None, &mut |_| {}).unwrap();
    trainer::train(&mut b, &ex, &[], &c, None, &mut |_| {}).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
}

#[test]
fn checkpoint_rejects_mismatches() {
    let (m0, _) = setup(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    checkpoint::save::<f64, _>(&m0, &path, serde_json::Value::Null, None).unwrap();
    assert!(matches!(
        checkpoint::load::<f64, msdf_core::SelectorModel>(&path),
        Err(ModelError::Checkpoint(_))
    ));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load::<f64, GeneratorModel>(&path).is_err());
    assert!(checkpoint::load::<f64, GeneratorModel>(dir.path().join("missing")).is_err());
}

#[test]
fn f32_model_loads_from_f64_checkpoint() {
    let (m0, ex) = setup(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    checkpoint::save::<f64, _>(&m0, &path, serde_json::Value::Null, None).unwrap();
    let m32 = checkpoint::load::<f32, msdf_core::generator::GeneratorModel<f32>>(&path).unwrap().model;
    let inputs = [1usize, 20, 21];
    let a = m0.log_probs(&ex[0].context, &inputs).unwrap();
    let b = m32.log_probs(&ex[0].context, &inputs).unwrap();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - *y as f64).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn saved_model_has_the_lowest_logged_dev_loss() {
    let (m0, ex) = setup(12);
    let mut m = m0.clone();
    let out = trainer::train(&mut m, &ex[..8], &ex[8..], &cfg(20), None, &mut |_| {}).unwrap();
    let logged: Vec<f64> = out.log.iter().filter_map(|r| r.dev_loss).collect();
    assert!(logged.len() >= 5);
    let best = out.state.best_dev.unwrap();
    assert!(logged.iter().all(|&d| best <= d));
    let mut snap = m0.clone();
    snap.params = out.best_params(&m).clone();
    assert_eq!(trainer::mean_loss(&snap, &ex[8..]).unwrap(), best);
}

#[test]
fn pretraining_runs_two_phases() {
    let corpus = memorization_corpus(9, 5);
    let (m0, all) = setup(9);
    let half = select_longer_half(&corpus);
    assert_eq!(half.len(), 5);
    let half: Vec<Example> = half.iter().map(|p| m0.pair_example(p, 16).unwrap()).collect();
    let mut m = m0.clone();
    let mut phases = Vec::new();
    let (a, b) = trainer::pretrain(&mut m, &all, &half, &all[..3], &cfg(4), &cfg(3), &mut |p, r| {
        phases.push((p, r.step))
    })
    .unwrap();
    assert_eq!(a.log.len(), 4);
    assert_eq!(b.log.len(), 3);
    assert!(phases[..4].iter().all(|(p, _)| *p == Phase::Pretrain));
    assert!(phases[4..].iter().all(|(p, _)| *p == Phase::PretrainLongerHalf));
    assert!(b.state.best_dev.unwrap() <= a.state.best_dev.unwrap());
}

/// One scalar parameter `w` with loss `(w·x)²`.
#[derive(Clone)]
struct Quadratic(ParamStore);

impl Parameterized<f64> for Quadratic {
    fn params(&self) -> &ParamStore {
        &self.0
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.0
    }
}

impl Trainable<f64> for Quadratic {
    type Example = f64;

    fn example_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: &f64,
        _: &mut Dropout,
    ) -> Result<(Var, usize), ModelError> {
        let w = g.param(&self.0, msdf_core::ParamId(0));
        let wx = g.scale(w, *x)?;
        let sq = g.mul(wx, wx)?;
        Ok((g.sum(sq)?, 1))
    }

    fn example_count(&self, _: &f64) -> usize {
        1
    }

    fn dropout_rate(&self) -> f64 {
        0.0
    }
}

#[test]
fn divergence_stops_with_last_good_parameters() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut m = Quadratic(store);
    let c = TrainConfig {
        lr: 1e300,
        batch_size: 1,
        max_epochs: 10,
        grad_clip: None,
        eval_every: None,
        ..TrainConfig::default()
    };
    let out = trainer::train(&mut m, &[1.0], &[], &c, None, &mut |_| {}).unwrap();
    let Stop::Diverged { step, .. } = &out.stop else {
        panic!("expected divergence, got {:?}", out.stop)
    };
    assert_eq!(*step, 2);
    assert_eq!(out.log.len(), 1);
    let w = m.0.get(msdf_core::ParamId(0)).data()[0];
    assert!(w.is_finite() && w.abs() > 1e299);
    assert!(matches!(out.diverged(), Some(ModelError::Diverged { step: 2, .. })));
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(vals in prop::collection::vec(-1e3f64..1e3, 1..20), clip in 1e-3f64..10.0) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![vals.len()], vec![0.0; vals.len()]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, msdf_core::ParamId(0));
        let c = g.constant(Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let p = g.mul(w, c).unwrap();
        // d/dw sum(w·c + w²/2) at w = 0 is c
        let p2 = g.mul(w, w).unwrap();
        let p2 = g.scale(p2, 0.5).unwrap();
        let s = g.add(p, p2).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&store);
        buf.accumulate(&grads);
        let before = buf.global_norm();
        let reported = buf.clip(clip);
        prop_assert_eq!(reported, before);
        prop_assert!(buf.global_norm() <= clip + 1e-9);
        if before <= clip {
            prop_assert_eq!(buf.global_norm(), before);
        }
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let (mut m, _) = setup(2);
    let state: Option<TrainState<f64>> = None;
    assert!(trainer::train(&mut m, &[], &[], &cfg(1), state, &mut |_| {}).is_err());
}

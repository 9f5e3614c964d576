use msdf_core::gradcheck;
use msdf_core::graph::Graph;
use msdf_core::params::{ParamId, ParamStore};
use msdf_core::tensor::Tensor;
use msdf_core::transformer::{
    attention, causal_mask, DecoderLayer, Dropout, Encoder, Init, ModelConfig, SourceKv,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

// ---- straight-line reference math on nested vectors ----

fn to_m(t: &Tensor<f64>) -> M {
    let c = t.last_dim();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn ln(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(k, v)| (v - mu) / (var + 1e-5).sqrt() * g[k] + b[k])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Explicit score matrix, -inf masking, per head.
fn attn_ref(q: &M, k: &M, v: &M, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    if !allowed(i, j) {
                        return f64::NEG_INFINITY;
                    }
                    (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i][h * dh + c] = (0..k.len()).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    out
}

fn p(store: &ParamStore<f64>, name: &str) -> M {
    to_m(store.by_name(name).unwrap_or_else(|| panic!("{name}")))
}

fn pv(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().data().to_vec()
}

fn ffn_ref(store: &ParamStore<f64>, name: &str, x: &M) -> M {
    let h = mm(x, &p(store, &format!("{name}.w1")));
    let b1 = pv(store, &format!("{name}.b1"));
    let h: M = h.iter().map(|r| r.iter().zip(&b1).map(|(x, b)| gelu(x + b)).collect()).collect();
    let o = mm(&h, &p(store, &format!("{name}.w2")));
    let b2 = pv(store, &format!("{name}.b2"));
    o.iter().map(|r| r.iter().zip(&b2).map(|(x, b)| x + b).collect()).collect()
}

fn cfg(d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        n_layers: layers,
        n_heads: heads,
        d_ff: 2 * d,
        vocab_size: 10,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init<f64>) -> T) -> (ParamStore<f64>, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = f(&mut Init { store: &mut store, rng: &mut rng, std: 0.5 });
    (store, t)
}

fn randomize_norms(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.name(id).contains(".ln") || store.name(id).ends_with(".b1") || store.name(id).ends_with(".b2") {
            let shape = store.get(id).shape().to_vec();
            let noise = Tensor::randn(&shape, 0.3, &mut rng);
            let mut t = store.get(id).clone();
            t.add_assign(&noise);
            store.set(id, t).unwrap();
        }
    }
}

fn run_encoder(store: &ParamStore<f64>, enc: &Encoder, x: &Tensor<f64>, keep: Option<&[bool]>, heads: usize) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, store, xv, keep, heads, &mut Dropout::off()).unwrap();
    g.value(out).clone()
}

#[test]
fn encoder_single_token_shape() {
    let c = cfg(8, 1, 2);
    let (store, enc) = build(1, |i| Encoder::new(i, "enc", &c).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = run_encoder(&store, &enc, &Tensor::randn(&[1, 8], 1.0, &mut rng), None, 2);
    assert_eq!(out.shape(), &[1, 8]);
}

#[test]
fn encoder_matches_straight_line_reference() {
    let c = cfg(8, 2, 2);
    let (mut store, enc) = build(3, |i| Encoder::new(i, "enc", &c).unwrap());
    randomize_norms(&mut store, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let got = run_encoder(&store, &enc, &x, None, 2);

    let mut h = to_m(&x);
    for l in 0..2 {
        let pre = format!("enc.layer{l}");
        let n = ln(&h, &pv(&store, &format!("{pre}.ln1.gain")), &pv(&store, &format!("{pre}.ln1.bias")));
        let q = mm(&n, &p(&store, &format!("{pre}.attn.wq")));
        let k = mm(&n, &p(&store, &format!("{pre}.attn.wk")));
        let v = mm(&n, &p(&store, &format!("{pre}.attn.wv")));
        let a = mm(&attn_ref(&q, &k, &v, 2, |_, _| true), &p(&store, &format!("{pre}.attn.wo")));
        h = add(&h, &a);
        let n = ln(&h, &pv(&store, &format!("{pre}.ln2.gain")), &pv(&store, &format!("{pre}.ln2.bias")));
        h = add(&h, &ffn_ref(&store, &format!("{pre}.ffn"), &n));
    }
    let want = ln(&h, &pv(&store, "enc.ln_f.gain"), &pv(&store, "enc.ln_f.bias"));
    for (r, w) in to_m(&got).iter().zip(&want) {
        for (a, b) in r.iter().zip(w) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn permuting_pad_positions_leaves_real_outputs_unchanged() {
    let c = cfg(8, 2, 2);
    let (store, enc) = build(6, |i| Encoder::new(i, "enc", &c).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let keep = [true, false, true, false, true];
    let a = run_encoder(&store, &enc, &x, Some(&keep), 2);
    // swap rows 1 and 3 (both pads)
    let mut rows = to_m(&x);
    rows.swap(1, 3);
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let b = run_encoder(&store, &enc, &Tensor::from_rows(&refs).unwrap(), Some(&keep), 2);
    for i in [0, 2, 4] {
        for (x, y) in a.row(i).iter().zip(b.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

struct Block {
    store: ParamStore<f64>,
    layer: DecoderLayer,
}

fn block(seed: u64, d: usize, heads: usize, branches: &[&str]) -> Block {
    let c = cfg(d, 1, heads);
    let (mut store, layer) = build(seed, |i| DecoderLayer::new(i, "dec", &c, branches).unwrap());
    randomize_norms(&mut store, seed + 100);
    Block { store, layer }
}

fn self_attn_ref(store: &ParamStore<f64>, x: &M, heads: usize) -> M {
    let n = ln(x, &pv(store, "dec.ln1.gain"), &pv(store, "dec.ln1.bias"));
    let q = mm(&n, &p(store, "dec.self.wq"));
    let k = mm(&n, &p(store, "dec.self.wk"));
    let v = mm(&n, &p(store, "dec.self.wv"));
    add(x, &mm(&attn_ref(&q, &k, &v, heads, |i, j| j <= i), &p(store, "dec.self.wo")))
}

#[test]
fn decoder_self_attention_matches_brute_force() {
    let b = block(10, 8, 2, &["history"]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let out = b.layer.self_attention(&mut g, &b.store, xv, None, 2, &mut Dropout::off()).unwrap();
    let want = self_attn_ref(&b.store, &to_m(&x), 2);
    for (r, w) in to_m(g.value(out.out)).iter().zip(&want) {
        for (a, e) in r.iter().zip(w) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn single_position_self_attention_is_value_path_plus_residual() {
    let b = block(12, 8, 2, &["history"]);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let out = b.layer.self_attention(&mut g, &b.store, xv, None, 2, &mut Dropout::off()).unwrap();
    let xm = to_m(&x);
    let n = ln(&xm, &pv(&b.store, "dec.ln1.gain"), &pv(&b.store, "dec.ln1.bias"));
    let want = add(&xm, &mm(&mm(&n, &p(&b.store, "dec.self.wv")), &p(&b.store, "dec.self.wo")));
    for (a, e) in g.value(out.out).data().iter().zip(&want[0]) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn self_attention_is_causal() {
    let b = block(14, 8, 2, &["history"]);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let o = b.layer.self_attention(&mut g, &b.store, xv, None, 2, &mut Dropout::off()).unwrap();
        g.value(o.out).clone()
    };
    let base = run(&x);
    let mut y = x.clone();
    for v in &mut y.data_mut()[3 * 8..] {
        *v += 1.0;
    }
    let changed = run(&y);
    for t in 0..3 {
        assert_eq!(base.row(t), changed.row(t));
    }
    assert_ne!(base.row(3), changed.row(3));
}

#[test]
fn attention_rows_sum_to_one_over_kept_keys() {
    let mask = causal_mask(3, 2);
    assert_eq!(mask.len(), 15);
    assert_eq!(&mask[..5], &[true, true, true, false, false]);
    assert_eq!(&mask[10..], &[true; 5]);
}

fn fuse(b: &Block, h_sa: &Tensor<f64>, srcs: &[Tensor<f64>], heads: usize) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let h = g.constant(h_sa.clone());
    let mut kvs = Vec::new();
    for (i, s) in srcs.iter().enumerate() {
        let sv = g.constant(s.clone());
        let (k, v) = b.layer.source_kv(&mut g, &b.store, i, sv).unwrap();
        kvs.push(SourceKv { k, v, keep: None });
    }
    let out = b.layer.fuse(&mut g, &b.store, h, &kvs, heads, &mut Dropout::off()).unwrap();
    g.value(out).clone()
}

fn cross_ref(store: &ParamStore<f64>, branch: &str, h_sa: &M, src: &M, heads: usize) -> M {
    let n = ln(h_sa, &pv(store, "dec.ln_cross.gain"), &pv(store, "dec.ln_cross.bias"));
    let q = mm(&n, &p(store, &format!("dec.cross.{branch}.wq")));
    let k = mm(src, &p(store, &format!("dec.cross.{branch}.wk")));
    let v = mm(src, &p(store, &format!("dec.cross.{branch}.wv")));
    attn_ref(&q, &k, &v, heads, |_, _| true)
}

#[test]
fn one_source_with_identity_projection_is_plain_cross_attention() {
    let mut b = block(20, 8, 1, &["history"]);
    let id = b.store.id("dec.fuse.wp").unwrap();
    b.store.set(id, Tensor::eye(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let s = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let got = fuse(&b, &h, std::slice::from_ref(&s), 1);
    let want = add(&to_m(&h), &cross_ref(&b.store, "history", &to_m(&h), &to_m(&s), 1));
    for (r, w) in to_m(&got).iter().zip(&want) {
        for (a, e) in r.iter().zip(w) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_projection_is_pure_residual() {
    let mut b = block(22, 8, 2, &["history", "knowledge", "persona"]);
    let id = b.store.id("dec.fuse.wp").unwrap();
    assert_eq!(b.store.get(id).shape(), &[24, 8]);
    b.store.set(id, Tensor::zeros(&[24, 8])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let srcs: Vec<_> = (0..3).map(|i| Tensor::randn(&[2 + i, 8], 1.0, &mut rng)).collect();
    assert_eq!(fuse(&b, &h, &srcs, 2), h);
}

#[test]
fn two_source_fusion_matches_hand_assembly() {
    let b = block(24, 8, 2, &["history", "knowledge"]);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let h = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let s1 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let s2 = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let got = fuse(&b, &h, &[s1.clone(), s2.clone()], 2);
    let a1 = cross_ref(&b.store, "history", &to_m(&h), &to_m(&s1), 2);
    let a2 = cross_ref(&b.store, "knowledge", &to_m(&h), &to_m(&s2), 2);
    let cat: M = a1.iter().zip(&a2).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
    let want = add(&to_m(&h), &mm(&cat, &p(&b.store, "dec.fuse.wp")));
    for (r, w) in to_m(&got).iter().zip(&want) {
        for (a, e) in r.iter().zip(w) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn permuting_source_slots_with_projection_blocks_is_invariant() {
    let b = block(26, 8, 2, &["history", "knowledge", "persona"]);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let h = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let srcs: Vec<_> = (0..3).map(|i| Tensor::randn(&[2 + i, 8], 1.0, &mut rng)).collect();
    let base = fuse(&b, &h, &srcs, 2);

    // slot order (persona, history, knowledge): move branch params and W_P blocks alike
    let perm = [2usize, 0, 1];
    let names = ["history", "knowledge", "persona"];
    let mut store = b.store.clone();
    for (slot, &from) in perm.iter().enumerate() {
        for w in ["wq", "wk", "wv"] {
            let t = b.store.by_name(&format!("dec.cross.{}.{w}", names[from])).unwrap().clone();
            store.set(store.id(&format!("dec.cross.{}.{w}", names[slot])).unwrap(), t).unwrap();
        }
    }
    let wp = b.store.by_name("dec.fuse.wp").unwrap();
    let mut permuted = Vec::new();
    for &from in &perm {
        permuted.extend_from_slice(&wp.data()[from * 64..(from + 1) * 64]);
    }
    store.set(store.id("dec.fuse.wp").unwrap(), Tensor::matrix(24, 8, permuted).unwrap()).unwrap();
    let moved = Block { store, layer: b.layer.clone() };
    let srcs_perm: Vec<_> = perm.iter().map(|&i| srcs[i].clone()).collect();
    let got = fuse(&moved, &h, &srcs_perm, 2);
    assert!(got.max_abs_diff(&base) < 1e-12);
}

fn block_forward(b: &Block, x: &Tensor<f64>, srcs: &[Tensor<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let mut kvs = Vec::new();
    for (i, s) in srcs.iter().enumerate() {
        let sv = g.constant(s.clone());
        let (k, v) = b.layer.source_kv(&mut g, &b.store, i, sv).unwrap();
        kvs.push(SourceKv { k, v, keep: None });
    }
    let mut drop = Dropout::off();
    let sa = b.layer.self_attention(&mut g, &b.store, xv, None, 2, &mut drop).unwrap();
    let fa = b.layer.fuse(&mut g, &b.store, sa.out, &kvs, 2, &mut drop).unwrap();
    let out = b.layer.forward(&mut g, &b.store, xv, None, &kvs, 2, &mut drop).unwrap();
    (g.value(fa).clone(), g.value(out.out).clone())
}

#[test]
fn zero_ffn_output_layer_leaves_fusion_output() {
    let mut b = block(28, 8, 2, &["history", "knowledge"]);
    for name in ["dec.ffn.w2", "dec.ffn.b2"] {
        let id = b.store.id(name).unwrap();
        let shape = b.store.get(id).shape().to_vec();
        b.store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let srcs = [Tensor::randn(&[2, 8], 1.0, &mut rng), Tensor::randn(&[5, 8], 1.0, &mut rng)];
    let (fa, out) = block_forward(&b, &x, &srcs);
    assert_eq!(fa, out);
}

#[test]
fn two_stacked_blocks_compose() {
    let c = cfg(8, 1, 2);
    let (store, layers) = build(30, |i| {
        (0..2)
            .map(|l| DecoderLayer::new(i, &format!("dec{l}"), &c, &["history"]).unwrap())
            .collect::<Vec<_>>()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let s = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut g = Graph::no_grad();
    let mut y = g.constant(x.clone());
    for layer in &layers {
        let sv = g.constant(s.clone());
        let (k, v) = layer.source_kv(&mut g, &store, 0, sv).unwrap();
        let kv = [SourceKv { k, v, keep: None }];
        y = layer.forward(&mut g, &store, y, None, &kv, 2, &mut Dropout::off()).unwrap().out;
    }
    let stacked = g.value(y).clone();
    let once = g_value_of(&store, &layers[0], &x, &s);
    let twice = g_value_of(&store, &layers[1], &once, &s);
    assert_eq!(twice, stacked);
}

fn g_value_of(store: &ParamStore<f64>, layer: &DecoderLayer, x: &Tensor<f64>, s: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let sv = g.constant(s.clone());
    let (k, v) = layer.source_kv(&mut g, store, 0, sv).unwrap();
    let kv = [SourceKv { k, v, keep: None }];
    let out = layer.forward(&mut g, store, xv, None, &kv, 2, &mut Dropout::off()).unwrap().out;
    g.value(out).clone()
}

#[test]
fn block_gradients_match_finite_differences() {
    let b = block(32, 8, 2, &["history", "knowledge"]);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let s1 = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let s2 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let proj = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let checks = gradcheck::check(&b.store, 1e-5, |g, store: &ParamStore<f64>| -> Result<_, msdf_core::TensorError> {
        let xv = g.constant(x.clone());
        let mut kvs = Vec::new();
        for (i, s) in [&s1, &s2].into_iter().enumerate() {
            let sv = g.constant(s.clone());
            let (k, v) = b.layer.source_kv(g, store, i, sv)?;
            kvs.push(SourceKv { k, v, keep: None });
        }
        let out = b.layer.forward(g, store, xv, None, &kvs, 2, &mut Dropout::off())?.out;
        let w = g.constant(proj.clone());
        let m = g.mul(out, w)?;
        g.sum(m)
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
    }
}

#[test]
fn attention_helper_with_mask_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mask = causal_mask(3, 2);
    let mut g = Graph::<f64>::no_grad();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attention(&mut g, qv, kv, vv, 2, Some(&mask)).unwrap();
    let want = attn_ref(&to_m(&q), &to_m(&k), &to_m(&v), 2, |i, j| j <= 2 + i);
    for (r, w) in to_m(g.value(out)).iter().zip(&want) {
        for (a, e) in r.iter().zip(w) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

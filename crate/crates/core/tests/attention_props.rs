use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use saft::attention::{
    caf, dense_attention, multi_head_attention, pma, self_attention, sincos_positional_encoding_2d, AttentionConfig,
    CafParams, DaParams, MhaParams, Segment, TokenSequence,
};
use saft::tensor::{Graph, ParamBuilder, ParamStore, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn cfg(dim: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        dim,
        heads,
        ffn_hidden: 2 * dim,
    }
}

fn mha_params(seed: u64, c: &AttentionConfig) -> (MhaParams, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = MhaParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "mha", c).unwrap();
    (p, store)
}

fn set_identity(store: &mut ParamStore<f64>, p: &MhaParams) {
    for l in [p.q, p.k, p.v, p.out] {
        *store.get_mut(l.w) = Tensor::eye(p.dim);
        if let Some(b) = l.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

fn permuted_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(t.numel());
    for &r in perm {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn sequence(g: &mut Graph<'_, f64>, tokens: Tensor<f64>, h: usize, w: usize) -> TokenSequence {
    let d = tokens.shape()[1];
    let t = g.constant(tokens);
    let pos = g.constant(sincos_positional_encoding_2d(h, w, d).unwrap());
    TokenSequence::new(g, t, pos, vec![Segment { level: 4, h, w }]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_stochastic(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::standalone();
        let x = g.constant(random(&mut rng, &[rows, cols], 20.0));
        let y = g.softmax(x).unwrap();
        for r in g.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises_tokens(seed in any::<u64>(), rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 16;
        let mut g = Graph::<f64>::standalone();
        let x = g.constant(random(&mut rng, &[rows, d], 5.0));
        let (gain, bias) = (g.constant(Tensor::ones([d])), g.constant(Tensor::zeros([d])));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in g.value(y).data().chunks(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mha_is_invariant_to_joint_key_value_permutation(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..9) {
        let c = cfg(8, 2);
        let (p, store) = mha_params(seed, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (q, k, v) = (random(&mut rng, &[nq, 8], 1.0), random(&mut rng, &[nk, 8], 1.0), random(&mut rng, &[nk, 8], 1.0));
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.shuffle(&mut rng);
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = [q, k.clone(), v.clone(), permuted_rows(&k, &perm), permuted_rows(&v, &perm)]
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let a = multi_head_attention(&mut g, vars[0], vars[1], vars[2], &p).unwrap();
        let b = multi_head_attention(&mut g, vars[0], vars[3], vars[4], &p).unwrap();
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-6);
    }

    #[test]
    fn pma_is_invariant_to_joint_permutation_with_encodings(seed in any::<u64>(), nk in 2usize..9) {
        let c = cfg(8, 4);
        let (p, store) = mha_params(seed, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let q = random(&mut rng, &[3, 8], 1.0);
        let pq = random(&mut rng, &[3, 8], 1.0);
        let (k, v, pk) = (random(&mut rng, &[nk, 8], 1.0), random(&mut rng, &[nk, 8], 1.0), random(&mut rng, &[nk, 8], 1.0));
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.shuffle(&mut rng);
        let mut g = Graph::inference(&store);
        let (qv, pqv) = (g.constant(q), g.constant(pq));
        let (kv, vv, pkv) = (g.constant(k.clone()), g.constant(v.clone()), g.constant(pk.clone()));
        let (kp, vp, pkp) = (
            g.constant(permuted_rows(&k, &perm)),
            g.constant(permuted_rows(&v, &perm)),
            g.constant(permuted_rows(&pk, &perm)),
        );
        let a = pma(&mut g, qv, kv, vv, pqv, pkv, &p).unwrap();
        let b = pma(&mut g, qv, kp, vp, pqv, pkp, &p).unwrap();
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-6);
        prop_assert_eq!(g.shape(a), &[3, 8]);
    }

    #[test]
    fn pma_never_encodes_values(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..7) {
        let c = cfg(8, 2);
        let (p, store) = mha_params(seed, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut g = Graph::inference(&store);
        let q = g.constant(random(&mut rng, &[nq, 8], 1.0));
        let k = g.constant(random(&mut rng, &[nk, 8], 1.0));
        let v = g.constant(random(&mut rng, &[nk, 8], 1.0));
        let pq = g.constant(random(&mut rng, &[nq, 8], 1.0));
        let pk = g.constant(random(&mut rng, &[nk, 8], 1.0));
        let out = pma(&mut g, q, k, v, pq, pk, &p).unwrap();
        let qe = g.add(q, pq).unwrap();
        let ke = g.add(k, pk).unwrap();
        let manual = multi_head_attention(&mut g, qe, ke, v, &p).unwrap();
        prop_assert_eq!(g.value(out).data(), g.value(manual).data());
        let ve = g.add(v, pk).unwrap();
        let encoded = multi_head_attention(&mut g, qe, ke, ve, &p).unwrap();
        prop_assert!(g.value(out).max_abs_diff(g.value(encoded)) > 1e-9);
        let (zq, zk) = (g.constant(Tensor::zeros([nq, 8])), g.constant(Tensor::zeros([nk, 8])));
        let plain = pma(&mut g, q, k, v, zq, zk, &p).unwrap();
        let direct = multi_head_attention(&mut g, q, k, v, &p).unwrap();
        prop_assert_eq!(g.value(plain).data(), g.value(direct).data());
    }

    #[test]
    fn dense_attention_family_preserves_shapes(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, hk in 1usize..4) {
        let c = cfg(8, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let da = DaParams::new(&mut pb, "da", &c).unwrap();
        let cp = CafParams::new(&mut pb, "caf", &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let mut g = Graph::inference(&store);
        let fq = sequence(&mut g, random(&mut rng, &[h * w, 8], 1.0), h, w);
        let fk = sequence(&mut g, random(&mut rng, &[hk * 2, 8], 1.0), hk, 2);
        let d = dense_attention(&mut g, &fq, &fk, &da).unwrap();
        let s = self_attention(&mut g, &fq, &da).unwrap();
        let f = caf(&mut g, &fq, &fk, &cp).unwrap();
        for out in [&d, &s, &f] {
            prop_assert_eq!(g.shape(out.tokens), g.shape(fq.tokens));
            prop_assert_eq!(out.pos, fq.pos);
            prop_assert_eq!(&out.origin, &fq.origin);
        }
    }
}

#[test]
fn singleton_key_returns_its_value() {
    let c = cfg(8, 2);
    let (p, mut store) = mha_params(5, &c);
    set_identity(&mut store, &p);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::inference(&store);
    let q = g.constant(random(&mut rng, &[4, 8], 1.0));
    let k = g.constant(random(&mut rng, &[1, 8], 1.0));
    let vt = random(&mut rng, &[1, 8], 1.0);
    let v = g.constant(vt.clone());
    let out = multi_head_attention(&mut g, q, k, v, &p).unwrap();
    for row in g.value(out).data().chunks(8) {
        for (a, b) in row.iter().zip(vt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let c = cfg(8, 4);
    let (p, mut store) = mha_params(7, &c);
    set_identity(&mut store, &p);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let key = random(&mut rng, &[1, 8], 1.0);
    let keys = Tensor::new([5, 8], key.data().repeat(5)).unwrap();
    let vt = random(&mut rng, &[5, 8], 1.0);
    let mut g = Graph::inference(&store);
    let q = g.constant(random(&mut rng, &[3, 8], 1.0));
    let k = g.constant(keys);
    let v = g.constant(vt.clone());
    let out = multi_head_attention(&mut g, q, k, v, &p).unwrap();
    for row in g.value(out).data().chunks(8) {
        for (c, &o) in row.iter().enumerate() {
            let mean = (0..5).map(|r| vt.data()[r * 8 + c]).sum::<f64>() / 5.0;
            assert!((o - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_value_path_reduces_dense_attention_to_layer_norm() {
    let c = cfg(8, 2);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let da = DaParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "da", &c).unwrap();
    for id in da.mha.value_path() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::inference(&store);
    let fq = sequence(&mut g, random(&mut rng, &[6, 8], 2.0), 2, 3);
    let fk = sequence(&mut g, random(&mut rng, &[4, 8], 2.0), 2, 2);
    let out = dense_attention(&mut g, &fq, &fk, &da).unwrap();
    let (gain, bias) = (g.param(da.norm.gain), g.param(da.norm.bias));
    let ln = g.layer_norm(fq.tokens, gain, bias).unwrap();
    assert!(g.value(out.tokens).max_abs_diff(g.value(ln)) < 1e-12);
}

#[test]
fn traced_attention_rows_sum_to_one() {
    let c = cfg(8, 2);
    let (p, store) = mha_params(10, &c);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::inference(&store);
    g.enable_attention_trace();
    let q = g.constant(random(&mut rng, &[5, 8], 1.0));
    let k = g.constant(random(&mut rng, &[7, 8], 1.0));
    multi_head_attention(&mut g, q, k, k, &p).unwrap();
    let trace = g.take_attention_trace();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].heads.len(), 2);
    for h in &trace[0].heads {
        assert_eq!(h.shape(), &[5, 7]);
        for row in h.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_keys_and_values_are_rejected() {
    let c = cfg(8, 2);
    let (p, store) = mha_params(12, &c);
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::zeros([2, 8]));
    let k = g.constant(Tensor::zeros([3, 8]));
    let v = g.constant(Tensor::zeros([4, 8]));
    assert!(multi_head_attention(&mut g, q, k, v, &p).is_err());
}

//! Position-encoded attention on random tokens: rows of the attention map sum
//! to one, a joint key/value permutation leaves the output unchanged, and
//! encodings only ever touch queries and keys.

use anyhow::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saft::attention::{multi_head_attention, pma, sincos_positional_encoding_2d, AttentionConfig, MhaParams};
use saft::tensor::{Graph, ParamBuilder, ParamStore, Tensor};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let cols = t.shape()[1];
    let data = order.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect();
    Tensor::new([order.len(), cols], data).unwrap()
}

fn main() -> Result<()> {
    let cfg = AttentionConfig { dim: 16, heads: 4, ffn_hidden: 32 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let p = MhaParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "mha", &cfg)?;

    let (q, k, v) = (random(&mut rng, 6, 16), random(&mut rng, 9, 16), random(&mut rng, 9, 16));
    let mut order: Vec<usize> = (0..9).collect();
    order.shuffle(&mut rng);

    let mut g = Graph::inference(&store);
    g.enable_attention_trace();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = multi_head_attention(&mut g, qv, kv, vv, &p)?;
    let trace = g.take_attention_trace();
    let worst_row = trace[0]
        .heads
        .iter()
        .flat_map(|h| h.data().chunks(9).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    println!("attention rows: max |sum - 1| = {worst_row:.2e}");

    let (kp, vp) = (g.constant(permute_rows(&k, &order)), g.constant(permute_rows(&v, &order)));
    let permuted = multi_head_attention(&mut g, qv, kp, vp, &p)?;
    println!(
        "joint key/value permutation: max output change = {:.2e}",
        g.value(out).max_abs_diff(g.value(permuted))
    );

    let pos_q = g.constant(sincos_positional_encoding_2d(2, 3, 16)?);
    let pos_k = g.constant(sincos_positional_encoding_2d(3, 3, 16)?);
    let encoded = pma(&mut g, qv, kv, vv, pos_q, pos_k, &p)?;
    let qe = g.add(qv, pos_q)?;
    let ke = g.add(kv, pos_k)?;
    let by_hand = multi_head_attention(&mut g, qe, ke, vv, &p)?;
    println!(
        "PMA equals MHA(Q+P, K+P, V) exactly: {}",
        g.value(encoded).data() == g.value(by_hand).data()
    );
    Ok(())
}

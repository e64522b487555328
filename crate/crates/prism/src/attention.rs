//! Attention: differentiable tape compositions used by the model, and raw
//! streaming kernels used for the scaling benchmark.
//!
//! Both attention flavors share the feature map `phi(x) = elu(x) + 1`
//! convention for the linear variant and `1/sqrt(dh)` score scaling for the
//! softmax variant. A layer layout assigns one flavor per block so a model
//! can be converted from softmax to linear attention block-group by
//! block-group without touching the weights.

use crate::alloc_track;
use crate::error::{Error, Result};
use crate::tensor::{ParamLeaves, ParamStore, Scalar, Tensor};
use rand::Rng;
use std::fmt;
use std::time::Instant;

const DEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Full,
    Linear,
}

/// Per-layer attention flavor for the whole backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout(pub Vec<AttnKind>);

impl AttnLayout {
    pub fn all_full(n: usize) -> AttnLayout {
        AttnLayout(vec![AttnKind::Full; n])
    }

    pub fn n_linear(&self) -> usize {
        self.0.iter().filter(|k| **k == AttnKind::Linear).count()
    }

    pub fn n_full(&self) -> usize {
        self.0.len() - self.n_linear()
    }

    /// Checkpoint encoding: 0.0 for softmax blocks, 1.0 for linear ones.
    pub fn to_tags(&self) -> Vec<f32> {
        self.0
            .iter()
            .map(|k| if *k == AttnKind::Linear { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn from_tags(tags: &[f32]) -> Result<AttnLayout> {
        tags.iter()
            .map(|&t| match t {
                t if t == 0.0 => Ok(AttnKind::Full),
                t if t == 1.0 => Ok(AttnKind::Linear),
                t => Err(Error::Contract(format!("bad layout tag {t}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(AttnLayout)
    }
}

impl fmt::Display for AttnLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.0 {
            f.write_str(if *k == AttnKind::Linear { "L" } else { "F" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for AttnLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttnLayout> {
        s.chars()
            .map(|c| match c {
                'F' | 'f' => Ok(AttnKind::Full),
                'L' | 'l' => Ok(AttnKind::Linear),
                c => Err(Error::Contract(format!("bad layout char {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(AttnLayout)
    }
}

/// Softmax attention for a single head: `softmax(q k^T / sqrt(dh)) v`.
pub fn full_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let dh = q.shape()[1];
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
    scores.softmax_rows().matmul(v)
}

/// Kernelized attention for a single head:
/// `phi(q) (phi(k)^T v) / (phi(q) sum_j phi(k_j))` with `phi = elu + 1`.
///
/// For a single token the expression collapses to `v` exactly (numerator and
/// denominator share the factor `phi(q) . phi(k)`), but float division does
/// not, so that case short-circuits; its gradient w.r.t. q and k is zero and
/// the shortcut keeps it that way.
pub fn linear_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let n = q.shape()[0];
    if n != k.shape()[0] || n != v.shape()[0] {
        return Err(Error::dims("linear_attention", &q.shape(), &k.shape()));
    }
    if n == 1 {
        return Ok(v.clone());
    }
    let phi_q = q.elu().add_scalar(1.0);
    let phi_k = k.elu().add_scalar(1.0);
    let phi_k_t = phi_k.transpose()?;
    let kv = phi_k_t.matmul(v)?;
    let ones = q.tape().constant(vec![E::one(); n], &[n, 1])?;
    let z = phi_k_t.matmul(&ones)?;
    let num = phi_q.matmul(&kv)?;
    let den = phi_q.matmul(&z)?.clamp_min(DEN_FLOOR);
    num.mul_col(&den.recip())
}

/// Weight handles of one transformer block, fetched from the live leaves by
/// prefix. Naming: `{prefix}.ln1.{g,b}`, `{prefix}.attn.{wq,bq,wk,bk,wv,bv,
/// wo,bo}`, `{prefix}.ln2.{g,b}`, `{prefix}.ffn.{w1,b1,w2,b2}`.
pub struct BlockWeights<E: Scalar> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

impl<E: Scalar> BlockWeights<E> {
    pub fn fetch(leaves: &ParamLeaves<E>, prefix: &str) -> Result<BlockWeights<E>> {
        let g = |suffix: &str| leaves.get(&format!("{prefix}.{suffix}"));
        Ok(BlockWeights {
            ln1_g: g("ln1.g")?,
            ln1_b: g("ln1.b")?,
            wq: g("attn.wq")?,
            bq: g("attn.bq")?,
            wk: g("attn.wk")?,
            bk: g("attn.bk")?,
            wv: g("attn.wv")?,
            bv: g("attn.bv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            ln2_g: g("ln2.g")?,
            ln2_b: g("ln2.b")?,
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
        })
    }
}

/// Glorot-uniform linear layer with zero bias.
pub fn init_linear<E: Scalar>(
    store: &mut ParamStore<E>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<E> = (0..fan_in * fan_out)
        .map(|_| E::from_f64(rng.gen_range(-a..a)))
        .collect();
    store.insert(&format!("{name}.w"), &[fan_in, fan_out], w);
    store.insert(&format!("{name}.b"), &[fan_out], vec![E::zero(); fan_out]);
}

fn init_proj<E: Scalar>(store: &mut ParamStore<E>, wn: &str, bn: &str, d: usize, rng: &mut impl Rng) {
    let a = (6.0 / (2 * d) as f64).sqrt();
    let w: Vec<E> = (0..d * d).map(|_| E::from_f64(rng.gen_range(-a..a))).collect();
    store.insert(wn, &[d, d], w);
    store.insert(bn, &[d], vec![E::zero(); d]);
}

/// Register all parameters of one pre-norm block of width `d`.
pub fn init_block<E: Scalar>(store: &mut ParamStore<E>, prefix: &str, d: usize, rng: &mut impl Rng) {
    store.insert(&format!("{prefix}.ln1.g"), &[d], vec![E::one(); d]);
    store.insert(&format!("{prefix}.ln1.b"), &[d], vec![E::zero(); d]);
    for name in ["wq", "wk", "wv", "wo"] {
        init_proj(
            store,
            &format!("{prefix}.attn.{name}"),
            &format!("{prefix}.attn.b{}", &name[1..]),
            d,
            rng,
        );
    }
    store.insert(&format!("{prefix}.ln2.g"), &[d], vec![E::one(); d]);
    store.insert(&format!("{prefix}.ln2.b"), &[d], vec![E::zero(); d]);
    let h = 4 * d;
    let a1 = (6.0 / (d + h) as f64).sqrt();
    let w1: Vec<E> = (0..d * h).map(|_| E::from_f64(rng.gen_range(-a1..a1))).collect();
    store.insert(&format!("{prefix}.ffn.w1"), &[d, h], w1);
    store.insert(&format!("{prefix}.ffn.b1"), &[h], vec![E::zero(); h]);
    let w2: Vec<E> = (0..h * d).map(|_| E::from_f64(rng.gen_range(-a1..a1))).collect();
    store.insert(&format!("{prefix}.ffn.w2"), &[h, d], w2);
    store.insert(&format!("{prefix}.ffn.b2"), &[d], vec![E::zero(); d]);
}

/// Multi-head attention over `[n, d]` tokens: project, split the width into
/// `heads` column groups, run the per-head kernel, concatenate, project out.
pub fn attention_mh<E: Scalar>(
    x: &Tensor<E>,
    w: &BlockWeights<E>,
    heads: usize,
    kind: AttnKind,
) -> Result<Tensor<E>> {
    let d = x.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let q = x.linear(&w.wq, &w.bq)?;
    let k = x.linear(&w.wk, &w.bk)?;
    let v = x.linear(&w.wv, &w.bv)?;
    let mut heads_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        heads_out.push(match kind {
            AttnKind::Full => full_attention(&qh, &kh, &vh)?,
            AttnKind::Linear => linear_attention(&qh, &kh, &vh)?,
        });
    }
    let cat = crate::tensor::concat(&heads_out, 1)?;
    cat.linear(&w.wo, &w.bo)
}

/// Pre-norm transformer block: attention and a 4x gelu FFN, both residual.
pub fn block_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &BlockWeights<E>,
    heads: usize,
    kind: AttnKind,
) -> Result<Tensor<E>> {
    let a = attention_mh(&x.layer_norm(&w.ln1_g, &w.ln1_b, 1e-5)?, w, heads, kind)?;
    let y = x.add(&a)?;
    let f = y
        .layer_norm(&w.ln2_g, &w.ln2_b, 1e-5)?
        .linear(&w.w1, &w.b1)?
        .gelu()
        .linear(&w.w2, &w.b2)?;
    y.add(&f)
}

/// Raw softmax-attention kernel for one head, no tape. `q`, `k`, `v` are
/// `[n, dh]` row-major, output must be `[n, dh]`. Scratch is one score row,
/// so transient allocation grows linearly with `n`.
pub fn full_attention_kernel<E: Scalar>(q: &[E], k: &[E], v: &[E], n: usize, dh: usize, out: &mut [E]) {
    assert_eq!(q.len(), n * dh);
    assert_eq!(k.len(), n * dh);
    assert_eq!(v.len(), n * dh);
    assert_eq!(out.len(), n * dh);
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut row = vec![E::zero(); n];
    for i in 0..n {
        let qi = &q[i * dh..(i + 1) * dh];
        let mut mx = E::neg_infinity();
        for (j, rj) in row.iter_mut().enumerate() {
            let kj = &k[j * dh..(j + 1) * dh];
            let mut acc = E::zero();
            for t in 0..dh {
                acc = acc + qi[t] * kj[t];
            }
            *rj = acc * scale;
            if *rj > mx {
                mx = *rj;
            }
        }
        let mut den = E::zero();
        for rj in row.iter_mut() {
            *rj = (*rj - mx).exp();
            den = den + *rj;
        }
        let oi = &mut out[i * dh..(i + 1) * dh];
        oi.fill(E::zero());
        for (j, rj) in row.iter().enumerate() {
            let wj = *rj / den;
            let vj = &v[j * dh..(j + 1) * dh];
            for t in 0..dh {
                oi[t] = oi[t] + wj * vj[t];
            }
        }
    }
}

/// Raw kernelized-attention kernel for one head, no tape. Scratch is the
/// `[dh, dh]` running state plus a `[dh]` normalizer, so transient
/// allocation is independent of `n`.
pub fn linear_attention_kernel<E: Scalar>(q: &[E], k: &[E], v: &[E], n: usize, dh: usize, out: &mut [E]) {
    assert_eq!(q.len(), n * dh);
    assert_eq!(k.len(), n * dh);
    assert_eq!(v.len(), n * dh);
    assert_eq!(out.len(), n * dh);
    if n == 1 {
        out.copy_from_slice(v);
        return;
    }
    let phi = |x: E| if x > E::zero() { x + E::one() } else { x.exp() };
    let mut state = vec![E::zero(); dh * dh];
    let mut z = vec![E::zero(); dh];
    for j in 0..n {
        let kj = &k[j * dh..(j + 1) * dh];
        let vj = &v[j * dh..(j + 1) * dh];
        for a in 0..dh {
            let pk = phi(kj[a]);
            z[a] = z[a] + pk;
            let row = &mut state[a * dh..(a + 1) * dh];
            for (b, rv) in row.iter_mut().enumerate() {
                *rv = *rv + pk * vj[b];
            }
        }
    }
    let floor = E::from_f64(DEN_FLOOR);
    for i in 0..n {
        let qi = &q[i * dh..(i + 1) * dh];
        let oi = &mut out[i * dh..(i + 1) * dh];
        oi.fill(E::zero());
        let mut den = E::zero();
        for a in 0..dh {
            let pq = phi(qi[a]);
            den = den + pq * z[a];
            let row = &state[a * dh..(a + 1) * dh];
            for (b, rv) in row.iter().enumerate() {
                oi[b] = oi[b] + pq * *rv;
            }
        }
        if den < floor {
            den = floor;
        }
        for o in oi.iter_mut() {
            *o = *o / den;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnBenchRow {
    pub kernel: &'static str,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub mean_s: f64,
    pub stddev_s: f64,
    pub peak_bytes: usize,
}

pub fn bench_csv_header() -> &'static str {
    "kernel,n,d,heads,mean_s,stddev_s,peak_bytes"
}

impl AttnBenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.9},{:.9},{}",
            self.kernel, self.n, self.d, self.heads, self.mean_s, self.stddev_s, self.peak_bytes
        )
    }
}

/// Time both kernels over a grid of sequence lengths and report transient
/// allocation peaks. Peaks read as zero unless the running binary installed
/// [`alloc_track::CountingAlloc`] as its global allocator.
pub fn bench_scaling(ns: &[usize], d: usize, heads: usize, reps: usize, seed: u64) -> Result<Vec<AttnBenchRow>> {
    use rand::SeedableRng;
    if heads == 0 || d % heads != 0 || reps == 0 {
        return Err(Error::Contract(format!(
            "bench wants reps > 0 and heads | d, got d={d} heads={heads} reps={reps}"
        )));
    }
    let dh = d / heads;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in ns {
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            (0..heads * n * dh).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (q, k, v) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
        let mut out = vec![0.0f32; heads * n * dh];
        for kernel in ["full", "linear"] {
            let mut times = Vec::with_capacity(reps);
            let mut peak = 0usize;
            for _ in 0..reps {
                let base = alloc_track::reset_transient();
                let t0 = Instant::now();
                for h in 0..heads {
                    let s = h * n * dh..(h + 1) * n * dh;
                    match kernel {
                        "full" => full_attention_kernel(&q[s.clone()], &k[s.clone()], &v[s.clone()], n, dh, &mut out[s]),
                        _ => linear_attention_kernel(&q[s.clone()], &k[s.clone()], &v[s.clone()], n, dh, &mut out[s]),
                    }
                }
                times.push(t0.elapsed().as_secs_f64());
                peak = peak.max(alloc_track::transient_peak(base));
            }
            let mean = times.iter().sum::<f64>() / reps as f64;
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
            rows.push(AttnBenchRow {
                kernel: if kernel == "full" { "full" } else { "linear" },
                n,
                d,
                heads,
                mean_s: mean,
                stddev_s: var.sqrt(),
                peak_bytes: peak,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn rand_mat(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn full_attention_matches_hand_softmax() {
        let tape: Tape<f64> = Tape::new();
        // Two tokens, dh = 1: scores are q_i * k_j, softmax per row.
        let q = tape.leaf(vec![1.0, 2.0], &[2, 1]).unwrap();
        let k = tape.leaf(vec![0.5, -0.5], &[2, 1]).unwrap();
        let v = tape.leaf(vec![10.0, 20.0], &[2, 1]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap().to_vec();
        for (i, qi) in [1.0f64, 2.0].iter().enumerate() {
            let (s0, s1) = (qi * 0.5, qi * -0.5);
            let e0 = (s0 - s0.max(s1)).exp();
            let e1 = (s1 - s0.max(s1)).exp();
            let want = (e0 * 10.0 + e1 * 20.0) / (e0 + e1);
            assert!((out[i] - want).abs() < 1e-12, "{} vs {want}", out[i]);
        }
    }

    #[test]
    fn linear_attention_matches_direct_formula() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, dh) = (5, 3);
        let qd = rand_mat(&mut rng, n, dh);
        let kd = rand_mat(&mut rng, n, dh);
        let vd = rand_mat(&mut rng, n, dh);
        let q = tape.leaf(qd.clone(), &[n, dh]).unwrap();
        let k = tape.leaf(kd.clone(), &[n, dh]).unwrap();
        let v = tape.leaf(vd.clone(), &[n, dh]).unwrap();
        let out = linear_attention(&q, &k, &v).unwrap().to_vec();

        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        for i in 0..n {
            for b in 0..dh {
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..n {
                    let mut dot = 0.0;
                    for a in 0..dh {
                        dot += phi(qd[i * dh + a]) * phi(kd[j * dh + a]);
                    }
                    num += dot * vd[j * dh + b];
                    den += dot;
                }
                let want = num / den.max(DEN_FLOOR);
                assert!((out[i * dh + b] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_linear_attention_is_exactly_v() {
        let tape: Tape<f32> = Tape::new();
        let q = tape.leaf(vec![0.3, -0.7], &[1, 2]).unwrap();
        let k = tape.leaf(vec![1.3, 0.2], &[1, 2]).unwrap();
        let v = tape.leaf(vec![0.123456, -9.875], &[1, 2]).unwrap();
        let out = linear_attention(&q, &k, &v).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn streaming_kernels_match_tape_compositions() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (n, dh) = (17, 4);
        let qd = rand_mat(&mut rng, n, dh);
        let kd = rand_mat(&mut rng, n, dh);
        let vd = rand_mat(&mut rng, n, dh);
        let q = tape.leaf(qd.clone(), &[n, dh]).unwrap();
        let k = tape.leaf(kd.clone(), &[n, dh]).unwrap();
        let v = tape.leaf(vd.clone(), &[n, dh]).unwrap();

        let mut out = vec![0.0; n * dh];
        full_attention_kernel(&qd, &kd, &vd, n, dh, &mut out);
        let want = full_attention(&q, &k, &v).unwrap().to_vec();
        for i in 0..out.len() {
            assert!((out[i] - want[i]).abs() < 1e-12);
        }

        linear_attention_kernel(&qd, &kd, &vd, n, dh, &mut out);
        let want = linear_attention(&q, &k, &v).unwrap().to_vec();
        for i in 0..out.len() {
            assert!((out[i] - want[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // Softmax weights are positive and sum to one, so outputs stay in
        // the convex hull of the value rows.
        let tape: Tape<f64> = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let (n, dh) = (9, 2);
        let q = tape.leaf(rand_mat(&mut rng, n, dh), &[n, dh]).unwrap();
        let k = tape.leaf(rand_mat(&mut rng, n, dh), &[n, dh]).unwrap();
        let vd = rand_mat(&mut rng, n, dh);
        let v = tape.leaf(vd.clone(), &[n, dh]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap().to_vec();
        for b in 0..dh {
            let lo = (0..n).map(|j| vd[j * dh + b]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|j| vd[j * dh + b]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = out[i * dh + b];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn block_forward_shapes_and_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        init_block(&mut store, "blk", 8, &mut rng);
        let tape: Tape<f64> = Tape::new();
        let leaves = store.leaves(&tape).unwrap();
        let w = BlockWeights::fetch(&leaves, "blk").unwrap();
        let x = tape.leaf(rand_mat(&mut rng, 6, 8), &[6, 8]).unwrap();
        for kind in [AttnKind::Full, AttnKind::Linear] {
            let y = block_forward(&x, &w, 2, kind).unwrap();
            assert_eq!(y.shape(), vec![6, 8]);
            let loss = y.mul(&y).unwrap().mean();
            let grads = crate::tensor::backward(&loss).unwrap();
            // Every block parameter participates.
            for (name, t) in leaves.iter() {
                let g = grads.get_or_zero(t);
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "{name} got no gradient for {kind:?}"
                );
            }
        }
    }

    #[test]
    fn block_gradients_check_numerically() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
        init_block(&mut store, "b", 4, &mut rng);
        for kind in [AttnKind::Full, AttnKind::Linear] {
            let case = crate::tensor::GradCheckCase {
                name: if kind == AttnKind::Full { "block_full" } else { "block_linear" },
                params: store.clone(),
                build: Box::new(move |tape, leaves| {
                    let w = BlockWeights::fetch(leaves, "b")?;
                    let x = tape.constant(
                        vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.8, 0.05, -0.6],
                        &[2, 4],
                    )?;
                    Ok(block_forward(&x, &w, 2, kind)?.mean())
                }),
            };
            let err = crate::tensor::grad_check(&case, 1e-5, Some(6)).unwrap();
            assert!(err < 1e-6, "{kind:?} grad error {err}");
        }
    }

    #[test]
    fn layout_roundtrips_and_counts() {
        let layout: AttnLayout = "FFLLLF".parse().unwrap();
        assert_eq!(layout.n_full(), 3);
        assert_eq!(layout.n_linear(), 3);
        assert_eq!(layout.to_string(), "FFLLLF");
        let tags = layout.to_tags();
        assert_eq!(AttnLayout::from_tags(&tags).unwrap(), layout);
        assert!("FXL".parse::<AttnLayout>().is_err());
        assert!(AttnLayout::from_tags(&[0.5]).is_err());
    }

    #[test]
    fn bench_rows_cover_grid() {
        let rows = bench_scaling(&[4, 8], 8, 2, 2, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.mean_s >= 0.0 && r.stddev_s >= 0.0));
        let line = rows[0].to_csv();
        assert_eq!(line.split(',').count(), 7);
        assert!(bench_csv_header().starts_with("kernel,n"));
    }
}

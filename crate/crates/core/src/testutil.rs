//! Shared fixtures and reference implementations for unit tests.

use rand::{Rng, SeedableRng};

use crate::nn::Linear;
use crate::param::Init;
use crate::tensor::Tensor;
use crate::window::MultiHeadAttention;

pub(crate) fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, Init::new(seed).normal_vec(n)).unwrap()
}

pub(crate) fn uniform01(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gives every bias a nonzero value so all paths carry signal.
pub(crate) fn randomize_biases<M: crate::param::Module>(module: &mut M, seed: u64, scale: f64) {
    let mut init = Init::new(seed);
    for p in module.parameters_mut() {
        if p.name().ends_with("bias") {
            let v = init
                .normal_vec(p.data().len())
                .iter()
                .map(|x| scale * x)
                .collect();
            p.set_data(v).unwrap();
        }
    }
}

/// Plain-loop multi-head attention over token rows, used as the reference
/// for every attention path.
pub(crate) fn dense_attention_oracle(
    zq: &[f64],
    zkv: &[f64],
    d: usize,
    attn: &MultiHeadAttention,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let nq = zq.len() / d;
    let nk = zkv.len() / d;
    let proj = |z: &[f64], lin: &Linear, n: usize| -> Vec<f64> {
        let (w, b) = (lin.weight.data(), lin.bias.data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = b[j] + (0..d).map(|k| z[i * d + k] * w[k * d + j]).sum::<f64>();
            }
        }
        out
    };
    let q = proj(zq, &attn.query, nq);
    let k = proj(zkv, &attn.key, nk);
    let v = proj(zkv, &attn.value, nk);
    let dh = d / attn.heads;
    let mut concat = vec![0.0; nq * d];
    for h in 0..attn.heads {
        for i in 0..nq {
            let mut logits: Vec<f64> = (0..nk)
                .map(|j| {
                    let dot: f64 = (0..dh)
                        .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                        .sum();
                    dot / (dh as f64).sqrt() + mask.map_or(0.0, |m| m[i * nk + j])
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logits.iter_mut().for_each(|l| *l = (*l - max).exp());
            let total: f64 = logits.iter().sum();
            for c in 0..dh {
                concat[i * d + h * dh + c] = (0..nk)
                    .map(|j| logits[j] / total * v[j * d + h * dh + c])
                    .sum::<f64>();
            }
        }
    }
    proj(&concat, &attn.output, nq)
}

//! Shared test oracles and fixtures.
#![allow(dead_code)]

use svt_core::autodiff::Tape;
use svt_core::error::Result;
use svt_core::rng::RngState;
use svt_core::tensor::{Element, Tensor};
use svt_core::vit::ViTConfig;
use svt_core::Var;

/// Builds a scalar loss from input values and returns it with the leaf
/// handles that correspond to those inputs.
pub type Build<T> = dyn Fn(&mut Tape<T>, &[Tensor<T>]) -> Result<(Var, Vec<Var>)>;

/// Norm-wise relative error between the tape gradient and central finite
/// differences with step `h`, over all inputs jointly.
pub fn gradcheck<T: Element>(inputs: &[Tensor<T>], h: f64, build: &Build<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, x)| match grads.get(v) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; x.numel()],
        })
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, xs)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            let o = orig.to_f64_lossy();
            xs[i].data_mut()[j] = T::from_f64_lossy(o + h);
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = T::from_f64_lossy(o - h);
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            // actual step after rounding to T
            let step = T::from_f64_lossy(o + h).to_f64_lossy() - T::from_f64_lossy(o - h).to_f64_lossy();
            numeric.push((up - down) / step);
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nn).max(1e-12))
}

pub fn random_tensor<T: Element>(shape: &[usize], seed: u64, scale: f64) -> Tensor<T> {
    let mut rng = RngState::new(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal(0.0, scale)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// `Σ w ⊙ v` with fixed pseudo-random weights, reducing any output to a scalar.
pub fn weighted_sum<T: Element>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var> {
    let w = random_tensor::<T>(tape.shape(v), seed ^ 0x5EED, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

/// Row-stochastic matrix `[rows, k]` with random positive entries.
pub fn random_distribution<T: Element>(rows: usize, k: usize, seed: u64) -> Tensor<T> {
    let mut rng = RngState::new(seed);
    let mut v = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let r: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.05).collect();
        let s: f64 = r.iter().sum();
        v.extend(r.iter().map(|x| x / s));
    }
    Tensor::from_f64(vec![rows, k], &v).unwrap()
}

pub fn tiny_vit(image: usize, patch: usize, depth: usize, dim: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        image_size: [image, image],
        patch_size: patch,
        depth,
        dim,
        heads,
        mlp_ratio: 2.0,
        dropout: 0.0,
        attn_dropout: 0.0,
    }
}

/// Two CIFAR-10 records with hand-chosen bytes: record 0 has label 3 and
/// pixel byte `(i * 7) % 256` at plane offset `i`; record 1 has label 9 and
/// an all-255 red plane with zero green/blue planes.
pub fn cifar10_fixture() -> Vec<u8> {
    let mut out = Vec::with_capacity(2 * 3073);
    out.push(3u8);
    out.extend((0..3072).map(|i| ((i * 7) % 256) as u8));
    out.push(9u8);
    out.extend(std::iter::repeat_n(255u8, 1024));
    out.extend(std::iter::repeat_n(0u8, 2048));
    out
}

pub mod grad_cases;
pub mod checks;

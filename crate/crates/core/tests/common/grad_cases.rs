//! Differentiable-operation cases for the finite-difference oracle.

use svt_core::autodiff::Tape;
use svt_core::distill::{self, HeadConfig};
use svt_core::error::Result;
use svt_core::finetune;
use svt_core::params::ParamStore;
use svt_core::rng::RngState;
use svt_core::tensor::{Element, Tensor};
use svt_core::vit::{self, ForwardOptions, InitScheme};
use svt_core::Var;

use super::{random_distribution, random_tensor, tiny_vit, weighted_sum, Build};

pub struct GradCase<T: Element> {
    pub name: String,
    pub inputs: Vec<Tensor<T>>,
    pub build: Box<Build<T>>,
}

fn leaves<T: Element>(tape: &mut Tape<T>, xs: &[Tensor<T>]) -> Vec<Var> {
    xs.iter().map(|x| tape.param(x.clone())).collect()
}

fn case<T: Element>(
    name: &str,
    inputs: Vec<Tensor<T>>,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static,
) -> GradCase<T> {
    GradCase {
        name: name.to_string(),
        inputs,
        build: Box::new(move |tape, xs| {
            let vars = leaves(tape, xs);
            let out = f(tape, &vars)?;
            let loss = if tape.value(out).numel() == 1 { out } else { weighted_sum(tape, out, 11)? };
            Ok((loss, vars))
        }),
    }
}

fn store<T: Element>(names: &[String], xs: &[Tensor<T>]) -> ParamStore<T> {
    let mut p = ParamStore::new();
    for (n, x) in names.iter().zip(xs) {
        p.insert(n.clone(), x.clone()).unwrap();
    }
    p
}

/// Encoder (depth 1, dim 8) on full-size and half-size inputs, plus the
/// projection head / distillation loss and the classifier loss.
fn model_cases<T: Element>(seed: u64) -> Vec<GradCase<T>> {
    let cfg = tiny_vit(8, 4, 1, 8, 2);
    let params: ParamStore<T> = vit::init_weights(&cfg, InitScheme::Xavier, &RngState::new(seed)).unwrap();
    // Tables start at σ = 0.02; widen them so their gradients are not negligible.
    let names: Vec<String> = params.names().to_vec();
    let values: Vec<Tensor<T>> = params
        .iter()
        .map(|(n, t)| if n == "cls_token" || n == "pos_embed" { random_tensor(t.shape(), seed + 3, 0.5) } else { t.clone() })
        .collect();
    let mut out = Vec::new();

    for (label, size) in [("full", 8usize), ("dpe", 4usize)] {
        let cfg = cfg.clone();
        let names = names.clone();
        let images = random_tensor::<T>(&[2, size, size, 3], seed + 1, 1.0);
        out.push(GradCase {
            name: format!("vit_forward_{label}"),
            inputs: values.clone(),
            build: Box::new(move |tape, xs| {
                let bound = store(&names, xs).register(tape, true);
                let x = tape.constant(images.clone());
                let _ = x;
                let enc = vit::encode(tape, &cfg, &bound, &images, ForwardOptions { want_attention: false, training: false }, &mut RngState::new(0))?;
                let loss = weighted_sum(tape, enc.cls, 5)?;
                Ok((loss, bound.vars().to_vec()))
            }),
        });
    }

    {
        let cfg = cfg.clone();
        let mut names = names.clone();
        let mut values = values.clone();
        let head = finetune::init_classifier::<T>(8, 3, &RngState::new(seed + 9));
        for (n, t) in head.iter() {
            names.push(n.to_string());
            values.push(random_tensor(t.shape(), seed + 10, 0.5));
        }
        let images = random_tensor::<T>(&[3, 8, 8, 3], seed + 2, 1.0);
        let target = random_distribution::<T>(3, 3, seed + 4);
        out.push(GradCase {
            name: "classifier_cross_entropy".into(),
            inputs: values,
            build: Box::new(move |tape, xs| {
                let bound = store(&names, xs).register(tape, true);
                let logits = finetune::classifier_logits(tape, &cfg, &bound, &images, false, &mut RngState::new(0))?;
                let loss = tape.cross_entropy(logits, &target)?;
                Ok((loss, bound.vars().to_vec()))
            }),
        });
    }

    {
        let head_cfg = HeadConfig { hidden: 6, bottleneck: 4, out_dim: 5 };
        let head: ParamStore<T> = distill::init_head(&head_cfg, 8, &RngState::new(seed + 20)).unwrap();
        let names: Vec<String> = head.names().to_vec();
        let values: Vec<Tensor<T>> = head.iter().map(|(_, t)| random_tensor(t.shape(), seed + 21, 0.5)).collect();
        let feats = random_tensor::<T>(&[12, 8], seed + 22, 1.0);
        let teachers = vec![random_distribution::<T>(1, 5, seed + 23), random_distribution::<T>(1, 5, seed + 24)];
        out.push(GradCase {
            name: "projection_head_distill_loss".into(),
            inputs: values,
            build: Box::new(move |tape, xs| {
                let bound = store(&names, xs).register(tape, true);
                let f = tape.constant(feats.clone());
                let logits = distill::head_forward(tape, &bound, f)?;
                let tau = T::from_f64_lossy(0.1);
                let mut views = Vec::new();
                for i in 0..10 {
                    let row = tape.slice(logits, 0, i, 1)?;
                    views.push(distill::student_log_distribution(tape, row, tau)?);
                }
                let loss = distill::distill_loss(tape, &teachers, &views[..2], &views[2..], true, 8)?;
                Ok((loss, bound.vars().to_vec()))
            }),
        });
    }
    out
}

pub fn grad_cases<T: Element>(seed: u64) -> Vec<GradCase<T>> {
    let r = |shape: &[usize], k: u64| random_tensor::<T>(shape, seed * 100 + k, 1.0);
    let mut v = vec![
        case("matmul_shared", vec![r(&[2, 3, 4], 1), r(&[4, 5], 2)], |t, x| t.matmul(x[0], x[1])),
        case("matmul_batched", vec![r(&[2, 3, 4], 3), r(&[2, 4, 2], 4)], |t, x| t.matmul(x[0], x[1])),
        case("matmul_nt", vec![r(&[2, 3, 4], 5), r(&[2, 5, 4], 6)], |t, x| t.matmul_nt(x[0], x[1])),
        case("add", vec![r(&[3, 4], 7), r(&[3, 4], 8)], |t, x| t.add(x[0], x[1])),
        case("add_broadcast", vec![r(&[2, 3, 4], 9), r(&[4], 10)], |t, x| t.add_broadcast(x[0], x[1])),
        case("sub", vec![r(&[5], 11), r(&[5], 12)], |t, x| t.sub(x[0], x[1])),
        case("mul", vec![r(&[3, 3], 13), r(&[3, 3], 14)], |t, x| t.mul(x[0], x[1])),
        case("scale", vec![r(&[4], 15)], |t, x| t.scale(x[0], T::from_f64_lossy(-1.5))),
        case("reshape_permute", vec![r(&[2, 3, 4], 16)], |t, x| {
            let y = t.reshape(x[0], &[6, 4])?;
            let y = t.reshape(y, &[2, 3, 4])?;
            t.permute(y, &[2, 0, 1])
        }),
        case("transpose", vec![r(&[3, 5], 17)], |t, x| t.transpose(x[0])),
        case("concat", vec![r(&[2, 3], 18), r(&[2, 2], 19)], |t, x| t.concat(&[x[0], x[1]], 1)),
        case("slice", vec![r(&[4, 3, 2], 20)], |t, x| t.slice(x[0], 1, 1, 2)),
        case("repeat_leading", vec![r(&[1, 3], 21)], |t, x| t.repeat_leading(x[0], 3)),
        case("sum_all", vec![r(&[3, 4], 22)], |t, x| t.sum_all(x[0])),
        case("mean_all", vec![r(&[3, 4], 23)], |t, x| t.mean_all(x[0])),
        case("mean_axis", vec![r(&[2, 3, 4], 24)], |t, x| t.mean_axis(x[0], 1)),
        case("gelu", vec![r(&[10], 25)], |t, x| t.gelu(x[0])),
        case("softmax_t0.5", vec![r(&[3, 5], 26)], |t, x| t.softmax(x[0], T::from_f64_lossy(0.5))),
        case("log_softmax_t0.1", vec![random_tensor::<T>(&[2, 4], seed * 100 + 27, 0.1)], |t, x| {
            t.log_softmax(x[0], T::from_f64_lossy(0.1))
        }),
        case("layer_norm", vec![r(&[3, 6], 28), r(&[6], 29), r(&[6], 30)], |t, x| t.layer_norm(x[0], x[1], x[2], 1e-6)),
        case("dropout", vec![r(&[4, 4], 31)], |t, x| t.dropout(x[0], 0.3, true, &mut RngState::new(77))),
        case("l2_normalize", vec![r(&[3, 4], 32)], |t, x| t.l2_normalize(x[0])),
    ];
    let target = random_distribution::<T>(3, 4, seed + 33);
    v.push(case("cross_entropy_soft", vec![r(&[3, 4], 34)], move |t, x| t.cross_entropy(x[0], &target)));
    v.extend(model_cases::<T>(seed));
    v
}

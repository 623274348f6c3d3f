//! Finite-difference oracles shared by the gradient tests and the acceptance suite.

use proxy_align::cmo::{sample_loss, target_labels, weighted_nll, CmoConfig, Objective};
use proxy_align::gradcore::graph::Graph;
use proxy_align::gradcore::{fd_check, grad_check_many, primitive_forward, Primitive, Tensor};
use proxy_align::lora::{attach, LoraSpec};
use proxy_align::model::{AssemblyMode, Model};
use proxy_align::rng::SeedStream;
use proxy_align::Real;
use rand::Rng as _;

use super::{micro_model, sample, BOS};

pub fn randn<T: Real>(shape: &[usize], rng: &mut proxy_align::rng::Rng) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

pub fn positive<T: Real>(shape: &[usize], rng: &mut proxy_align::rng::Rng) -> Tensor<T> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Every primitive with inputs drawn for `seed`.
pub fn cases<T: Real>(seed: u64) -> Vec<(Primitive<T>, Vec<Tensor<T>>)> {
    let mut rng = SeedStream::new(seed).child("primitives").rng();
    let (n, k, m) = (3, 4, 5);
    let mask: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.3)).collect();
    let weights: Vec<T> = (0..n * k).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..n)).collect();
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    vec![
        (
            Primitive::MatMul,
            vec![randn(&[n, k], &mut rng), randn(&[k, m], &mut rng)],
        ),
        (
            Primitive::MatMulBt,
            vec![randn(&[n, k], &mut rng), randn(&[m, k], &mut rng)],
        ),
        (Primitive::Add, vec![randn(&[n, k], &mut rng), randn(&[n, k], &mut rng)]),
        (Primitive::AddRow, vec![randn(&[n, k], &mut rng), randn(&[k], &mut rng)]),
        (Primitive::Scale(T::lit(-1.7)), vec![randn(&[n, k], &mut rng)]),
        (Primitive::Mul, vec![randn(&[n, k], &mut rng), randn(&[n, k], &mut rng)]),
        (Primitive::Gather(ids), vec![randn(&[n, k], &mut rng)]),
        (
            Primitive::LayerNorm,
            vec![randn(&[n, k], &mut rng), randn(&[k], &mut rng), randn(&[k], &mut rng)],
        ),
        (Primitive::Gelu, vec![randn(&[n, k], &mut rng)]),
        (Primitive::Softmax, vec![randn(&[n, k], &mut rng)]),
        (Primitive::LogSoftmax, vec![randn(&[n, k], &mut rng)]),
        (Primitive::Log, vec![positive(&[n, k], &mut rng)]),
        (Primitive::Sum, vec![randn(&[n, k], &mut rng)]),
        (Primitive::Mean, vec![randn(&[n, k], &mut rng)]),
        (
            Primitive::Concat(0),
            vec![randn(&[n, k], &mut rng), randn(&[2, k], &mut rng)],
        ),
        (
            Primitive::Concat(1),
            vec![randn(&[n, k], &mut rng), randn(&[n, 2], &mut rng)],
        ),
        (
            Primitive::SliceRows { start: 1, len: 2 },
            vec![randn(&[n, k], &mut rng)],
        ),
        (
            Primitive::SliceCols { start: 1, len: 2 },
            vec![randn(&[n, k], &mut rng)],
        ),
        (
            Primitive::MaskedFill {
                mask,
                fill: T::lit(-3.0),
            },
            vec![randn(&[n, k], &mut rng)],
        ),
        (Primitive::Pick(picks), vec![randn(&[n, k], &mut rng)]),
        (Primitive::WeightedSum(weights), vec![randn(&[n, k], &mut rng)]),
    ]
}

pub fn reduce_weights(out_len: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedStream::new(seed).child("reduce").rng();
    (0..out_len).map(|_| rng.random_range(0.5..1.5)).collect()
}

/// Reduces the primitive's output with fixed random weights so that every
/// output coordinate reaches the scalar.
pub fn check_primitive(op: &Primitive<f64>, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let out_len = primitive_forward(op, inputs).unwrap().len();
    let w = reduce_weights(out_len, seed);
    grad_check_many(
        |g: &mut Graph<'_, f64>, vars| {
            let y = op.apply(g, vars)?;
            g.weighted_sum(y, &w)
        },
        inputs,
        1e-4,
    )
    .unwrap()
}

pub fn widen(op: &Primitive<f32>) -> Primitive<f64> {
    let w = |x: f32| f64::from(x);
    match op.clone() {
        Primitive::Scale(c) => Primitive::Scale(w(c)),
        Primitive::MaskedFill { mask, fill } => Primitive::MaskedFill { mask, fill: w(fill) },
        Primitive::WeightedSum(v) => Primitive::WeightedSum(v.into_iter().map(w).collect()),
        Primitive::MatMul => Primitive::MatMul,
        Primitive::MatMulBt => Primitive::MatMulBt,
        Primitive::Add => Primitive::Add,
        Primitive::AddRow => Primitive::AddRow,
        Primitive::Mul => Primitive::Mul,
        Primitive::Gather(ids) => Primitive::Gather(ids),
        Primitive::LayerNorm => Primitive::LayerNorm,
        Primitive::Gelu => Primitive::Gelu,
        Primitive::Softmax => Primitive::Softmax,
        Primitive::LogSoftmax => Primitive::LogSoftmax,
        Primitive::Log => Primitive::Log,
        Primitive::Sum => Primitive::Sum,
        Primitive::Mean => Primitive::Mean,
        Primitive::Concat(a) => Primitive::Concat(a),
        Primitive::SliceRows { start, len } => Primitive::SliceRows { start, len },
        Primitive::SliceCols { start, len } => Primitive::SliceCols { start, len },
        Primitive::Pick(idx) => Primitive::Pick(idx),
    }
}

/// 32-bit tape gradients against differences of the same function evaluated
/// at 64 bits; 32-bit differences themselves are dominated by rounding.
pub fn check_primitive_f32(op: &Primitive<f32>, inputs: &[Tensor<f32>], seed: u64) -> f64 {
    let out_len = primitive_forward(op, inputs).unwrap().len();
    let w64 = reduce_weights(out_len, seed);
    let w32: Vec<f32> = w64.iter().map(|&x| x as f32).collect();
    let w64: Vec<f64> = w32.iter().map(|&x| f64::from(x)).collect();
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let y = op.apply(&mut g, &vars).unwrap();
    let out = g.weighted_sum(y, &w32).unwrap();
    let analytic: Vec<Tensor<f64>> = g
        .backward(out)
        .unwrap()
        .wrt(&g, &vars)
        .iter()
        .map(|t| t.cast())
        .collect();
    let op64 = widen(op);
    let point: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |xs: &[Tensor<f64>]| {
        let y = primitive_forward(&op64, xs)?;
        Ok(y.data().iter().zip(&w64).map(|(a, b)| a * b).sum())
    };
    fd_check(eval, &analytic, &point, 1e-4).unwrap()
}

/// Largest relative error over every trainable parameter coordinate of
/// `loss_of(model)` against the supplied analytic gradients.
pub fn model_fd<T: Real>(
    model: &Model<T>,
    grads: &[(String, Tensor<T>)],
    eps: T,
    loss_of: impl Fn(&Model<T>) -> T,
) -> T {
    let analytic: Vec<Tensor<T>> = grads.iter().map(|(_, g)| g.clone()).collect();
    let point: Vec<Tensor<T>> = grads
        .iter()
        .map(|(n, _)| model.params.get(n).unwrap().clone())
        .collect();
    let eval = |xs: &[Tensor<T>]| {
        let mut work = model.clone();
        for ((name, _), x) in grads.iter().zip(xs) {
            *work.params.get_mut(name)? = x.clone();
        }
        Ok(loss_of(&work))
    };
    fd_check(eval, &analytic, &point, eps).unwrap()
}

pub fn fd_model<T: Real>(with_lora: bool) -> Model<T> {
    let mut model = micro_model::<T>(3);
    if with_lora {
        let spec = LoraSpec {
            rank: 2,
            alpha: 4.0,
            ..LoraSpec::default()
        };
        attach(&mut model, &spec, &SeedStream::new(4)).unwrap();
        for (name, p) in model.params.iter_mut() {
            if name.ends_with("/B") {
                for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                    *x = T::lit(0.3 * ((i % 5) as f64 - 2.0));
                }
            }
        }
    } else {
        model.params.set_trainable(|n| n != proxy_align::model::VISION_STUB);
    }
    model
}

/// Tape gradients of the vanilla loss at precision `T`, checked against
/// 64-bit differences of the same model.
pub fn forward_fd<T: Real>(with_lora: bool) -> f64 {
    let model = fd_model::<T>(with_lora);
    let s = sample(&[2, 5, 7, 3, 9, 4], Some(4));
    let cfg = CmoConfig::default();
    let labels = target_labels(&s);
    let input = model.assemble(&s, AssemblyMode::Multimodal, BOS).unwrap();
    let analytic = sample_loss(&model, &input, &labels, Objective::Vanilla, &cfg, true).unwrap();
    assert!(!analytic.grads.is_empty());
    let grads: Vec<(String, Tensor<f64>)> = analytic.grads.iter().map(|(n, g)| (n.clone(), g.cast())).collect();
    let wide = model.cast::<f64>();
    let input = wide.assemble(&s, AssemblyMode::Multimodal, BOS).unwrap();
    model_fd(&wide, &grads, 1e-4, |m| {
        sample_loss(m, &input, &labels, Objective::Vanilla, &cfg, false)
            .unwrap()
            .loss
    })
}

/// The weighting is a constant of the step: the analytic CMO gradient must
/// equal the FD gradient of the weighted NLL with those weights frozen.
pub fn weighted_loss_fd(objective: Objective) -> f64 {
    let mut model = micro_model::<f64>(8);
    model.params.set_trainable(|n| n != proxy_align::model::VISION_STUB);
    let s = sample(&[3, 6, 2, 8, 5], Some(9));
    let input = model.assemble(&s, AssemblyMode::Multimodal, BOS).unwrap();
    let labels = target_labels(&s);
    let cfg = CmoConfig {
        alpha: 0.0,
        beta: 1.0,
        ..CmoConfig::default()
    };
    let out = sample_loss(&model, &input, &labels, objective, &cfg, true).unwrap();
    let weights = out.report.expect("weighted objective reports").weights.weight;
    let uniform = 1.0 / weights.len() as f64;
    assert!(
        weights.iter().any(|w| (w - uniform).abs() > 1e-3),
        "weights are uniform: {weights:?}"
    );
    assert!((weighted_nll(&model, &input, &weights).unwrap() - out.loss).abs() < 1e-12);
    model_fd(&model, &out.grads, 1e-4, |m| weighted_nll(m, &input, &weights).unwrap())
}

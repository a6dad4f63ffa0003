#![allow(dead_code)]

pub mod grad_ops;

use fusionette::autodiff::{Tape, Tensor, Var};
use fusionette::data::{DatasetSplit, EmbeddingRecord, SplitName};
use fusionette::model::Model;
use fusionette::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// ReLU inputs closer than this to 0 make a trial too close to a kink for a
/// central difference with [`FD_STEP`].
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct FdOutcome {
    /// Worst relative error over all inputs.
    pub rel_err: f64,
    pub relu_margin: Option<f64>,
}

/// Reduces `out` to a scalar as `Σ out ⊙ r` with a fixed random `r`, so every
/// output element contributes a distinct weight.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = rand_tensor(&mut rng(seed ^ 0x5eed), &shape);
    let r = tape.constant(&r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Checks analytic gradients of the scalar built by `f` against central
/// differences in every element of every input.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> FdOutcome
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let relu_margin = tape.relu_margin();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss)[0]
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut work = inputs.to_vec();
            work[i].data_mut()[j] = input.data()[j] + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = input.data()[j] - FD_STEP;
            let down = eval(&work);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    FdOutcome {
        rel_err: worst,
        relu_margin,
    }
}

/// Gradient check of the mean cross-entropy of `model` on `records` with
/// respect to every parameter.
pub fn fd_check_model(model: &Model, records: &[EmbeddingRecord]) -> FdOutcome {
    let refs: Vec<&EmbeddingRecord> = records.iter().collect();
    let mut work = model.clone();
    work.zero_grads();
    work.batch_loss(&refs, true).unwrap();

    let relu_margin = {
        let (image, text, _) = fusionette::data::stack_batch(&refs).unwrap();
        let mut tape = Tape::new();
        let (iv, tv) = (tape.leaf(image), tape.leaf(text));
        model.forward(&mut tape, iv, tv).unwrap();
        tape.relu_margin()
    };

    let names: Vec<&'static str> = model.named_params().iter().map(|(n, _)| *n).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = work
            .named_params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .grad
            .clone()
            .unwrap();
        let numel = analytic.len();
        let mut numeric = vec![0.0; numel];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = model.clone();
            let base = probe.param_mut(name).unwrap().data()[j];
            probe.param_mut(name).unwrap().data_mut()[j] = base + FD_STEP;
            let up = probe.batch_loss(&refs, false).unwrap();
            probe.param_mut(name).unwrap().data_mut()[j] = base - FD_STEP;
            let down = probe.batch_loss(&refs, false).unwrap();
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    FdOutcome {
        rel_err: worst,
        relu_margin,
    }
}

pub fn random_records(rng: &mut ChaCha8Rng, n: usize, di: usize, dt: usize, classes: usize) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|i| EmbeddingRecord {
            id: format!("r{i}"),
            f_i: rand_vec(rng, di),
            f_t: rand_vec(rng, dt),
            label: rng.gen_range(0..classes),
        })
        .collect()
}

pub fn split_of(
    records: Vec<EmbeddingRecord>,
    split_name: SplitName,
    di: usize,
    dt: usize,
    classes: usize,
) -> DatasetSplit {
    DatasetSplit {
        records,
        num_classes: classes,
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        task_id: 0,
        split_name,
        dim_image: di,
        dim_text: dt,
    }
}

/// Brute-force accuracy, macro-F1 and weighted-F1 by counting TP/FP/FN per
/// class directly from the label vectors.
pub fn brute_metrics(labels: &[usize], preds: &[usize], c: usize) -> (f64, f64, f64) {
    let n = labels.len() as f64;
    let acc = labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64 / n;
    let mut macro_sum = 0.0;
    let mut weighted = 0.0;
    for k in 0..c {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&y, &p) in labels.iter().zip(preds) {
            match (y == k, p == k) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        };
        macro_sum += f1;
        weighted += (tp + fneg) / n * f1;
    }
    (acc, macro_sum / c as f64, weighted)
}

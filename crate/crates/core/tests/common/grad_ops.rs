//! One gradient trial per differentiable op, each building random inputs from
//! a seed and reducing the op's output to a scalar.

use fusionette::attention::{cross_attn, diff_attn, self_attn, DiffAttnVars};
use fusionette::autodiff::{Tape, Tensor, Var};
use fusionette::fusion::{guided_ca_fuse, guided_gate, Activation, GuidedCaVars, VariantName, VariantSpec};
use fusionette::model::Model;
use rand::Rng;

use super::{fd_check, fd_check_model, rand_tensor, random_records, rng, weighted_sum, FdOutcome, KINK_MARGIN};

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_batched",
    "matmul_shared_rhs",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "scale_by",
    "sigmoid",
    "relu",
    "tanh",
    "softmax_rows",
    "reshape",
    "concat_last",
    "slice_last",
    "cross_entropy",
    "sum",
    "self_attn",
    "cross_attn",
    "diff_attn",
    "guided_gate",
    "guided_ca_fuse",
    "model_guided_ca_diff_attn",
];

fn unary(seed: u64, shape: &[usize], op: impl Fn(&mut Tape, Var) -> Var) -> FdOutcome {
    let x = rand_tensor(&mut rng(seed), shape);
    fd_check(&[x], |t, v| {
        let y = op(t, v[0]);
        weighted_sum(t, y, seed)
    })
}

fn binary(
    seed: u64,
    a: &[usize],
    b: &[usize],
    op: impl Fn(&mut Tape, Var, Var) -> fusionette::Result<Var>,
) -> FdOutcome {
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, a);
    let y = rand_tensor(&mut r, b);
    fd_check(&[x, y], |t, v| {
        let z = op(t, v[0], v[1])?;
        weighted_sum(t, z, seed)
    })
}

fn diff_vars(v: &[Var], d: usize) -> DiffAttnVars {
    DiffAttnVars {
        w_q: v[1],
        w_k: v[2],
        w_v: v[3],
        lambda: v[4],
        d,
    }
}

fn guided_vars(v: &[Var]) -> GuidedCaVars {
    GuidedCaVars {
        w_i: v[2],
        b_i: v[3],
        w_i_gate: v[4],
        b_i_gate: v[5],
        w_t: v[6],
        b_t: v[7],
        w_t_gate: v[8],
        b_t_gate: v[9],
    }
}

/// Runs the gradient trial for `op` with `seed`.
pub fn trial(op: &str, seed: u64) -> FdOutcome {
    match op {
        "matmul" => binary(seed, &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b)),
        "matmul_batched" => binary(seed, &[2, 3, 4], &[2, 4, 3], |t, a, b| t.matmul(a, b)),
        "matmul_shared_rhs" => binary(seed, &[2, 3, 4], &[4, 2], |t, a, b| t.matmul(a, b)),
        "transpose" => unary(seed, &[2, 3, 4], |t, a| t.transpose(a).unwrap()),
        "add" => binary(seed, &[3, 4], &[3, 4], |t, a, b| t.add(a, b)),
        "sub" => binary(seed, &[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        "mul" => binary(seed, &[3, 4], &[3, 4], |t, a, b| t.mul(a, b)),
        "add_bias" => binary(seed, &[2, 3, 4], &[4], |t, a, b| t.add_bias(a, b)),
        "scale" => unary(seed, &[3, 4], |t, a| t.scale(a, -1.7)),
        "scale_by" => binary(seed, &[3, 4], &[], |t, a, s| t.scale_by(a, s)),
        "sigmoid" => unary(seed, &[3, 4], |t, a| t.sigmoid(a)),
        "relu" => unary(seed, &[3, 4], |t, a| t.relu(a)),
        "tanh" => unary(seed, &[3, 4], |t, a| t.tanh(a)),
        "softmax_rows" => unary(seed, &[2, 3, 4], |t, a| t.softmax_rows(a).unwrap()),
        "reshape" => unary(seed, &[3, 4], |t, a| {
            let r = t.reshape(a, &[2, 6]).unwrap();
            t.sigmoid(r)
        }),
        "concat_last" => binary(seed, &[3, 2], &[3, 4], |t, a, b| t.concat_last(a, b)),
        "slice_last" => unary(seed, &[3, 6], |t, a| t.slice_last(a, 1, 3).unwrap()),
        "cross_entropy" => {
            let mut r = rng(seed);
            let logits = rand_tensor(&mut r, &[5, 3]);
            let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
            fd_check(&[logits], |t, v| t.cross_entropy(v[0], &labels))
        }
        "sum" => unary(seed, &[3, 4], |t, a| {
            let s = t.sum(a);
            t.mul(s, s).unwrap()
        }),
        "self_attn" => unary(seed, &[4, 3], |t, a| self_attn(t, a).unwrap()),
        "cross_attn" => binary(seed, &[3, 4], &[5, 4], cross_attn),
        "diff_attn" => {
            let mut r = rng(seed);
            let (n, d_model, d) = (3, 4, 2);
            let inputs = vec![
                rand_tensor(&mut r, &[n, d_model]),
                rand_tensor(&mut r, &[d_model, 2 * d]),
                rand_tensor(&mut r, &[d_model, 2 * d]),
                rand_tensor(&mut r, &[d_model, 2 * d]),
                Tensor::scalar(r.gen_range(0.0..1.0)),
            ];
            fd_check(&inputs, |t, v| {
                let y = diff_attn(t, v[0], &diff_vars(v, d))?;
                weighted_sum(t, y, seed)
            })
        }
        "guided_gate" => {
            let mut r = rng(seed);
            let (dim, h) = (5, 3);
            let inputs = vec![
                rand_tensor(&mut r, &[2, dim]),
                rand_tensor(&mut r, &[dim, h]),
                rand_tensor(&mut r, &[h]),
                rand_tensor(&mut r, &[dim, h]),
                rand_tensor(&mut r, &[h]),
            ];
            fd_check(&inputs, |t, v| {
                let (z, alpha) = guided_gate(t, v[0], v[1], v[2], v[3], v[4], Activation::Relu)?;
                let both = t.concat_last(z, alpha)?;
                weighted_sum(t, both, seed)
            })
        }
        "guided_ca_fuse" => {
            let mut r = rng(seed);
            let (di, dt, h) = (4, 6, 3);
            let mut inputs = vec![rand_tensor(&mut r, &[2, di]), rand_tensor(&mut r, &[2, dt])];
            for dim in [di, di, dt, dt] {
                inputs.push(rand_tensor(&mut r, &[dim, h]));
                inputs.push(rand_tensor(&mut r, &[h]));
            }
            fd_check(&inputs, |t, v| {
                let out = guided_ca_fuse(t, v[0], v[1], &guided_vars(v), true, 2, Activation::Relu)?;
                weighted_sum(t, out.z, seed)
            })
        }
        "model_guided_ca_diff_attn" => {
            let mut spec = VariantSpec::new(VariantName::GuidedCaDiffAttn, 8, 8, 3);
            spec.h = 4;
            spec.n_tok = 2;
            spec.n_tok_fused = 2;
            let model = Model::init(spec, seed).unwrap();
            let records = random_records(&mut rng(seed.wrapping_add(7)), 3, 8, 8, 3);
            fd_check_model(&model, &records)
        }
        other => panic!("no gradient trial for `{other}`"),
    }
}

/// Runs [`trial`], redrawing the seed while any ReLU input lies within
/// [`KINK_MARGIN`] of zero. Returns the outcome and the seed actually used.
pub fn trial_clear_of_kinks(op: &str, seed: u64) -> (FdOutcome, u64) {
    let mut s = seed;
    loop {
        let out = trial(op, s);
        if out.relu_margin.is_none_or(|m| m >= KINK_MARGIN) {
            return (out, s);
        }
        s = s.wrapping_add(1_000_003);
    }
}

//! Model assembly: parameter initialization, the forward pass of every
//! fusion variant, prediction, and the `FUSN` model file.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{decode_model, encode_model, load_model, save_model, MAGIC, VERSION};

use crate::attention::{cross_attn, diff_attn, flatten_tokens, tokenize, DiffAttnParams, DiffAttnVars};
use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::data::{stack_batch, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::fusion::{guided_ca_fuse, FusionActivations, GuidedCaParams, GuidedCaVars, VariantName, VariantSpec};

/// The linear classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w_fc: Tensor,
    pub b_fc: Tensor,
}

/// A fusion variant with its learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: VariantSpec,
    seed: u64,
    guided: Option<GuidedCaParams>,
    diff: Option<DiffAttnParams>,
    classifier: ClassifierParams,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub fused: Var,
    pub refined: Option<Var>,
    pub guided: Option<crate::fusion::FusionVars>,
    /// Parameter leaves in [`Model::named_params`] order.
    pub params: Vec<Var>,
}

/// Class decision and softmax probabilities for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape").with_grad()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`:
    /// uniform(±1/√fan_in) for every affine map, `lambda_init` for λ.
    pub fn init(spec: VariantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let guided = spec.name.uses_guided_gates().then(|| {
            let (di, dt, h) = (spec.dim_image, spec.dim_text, spec.h);
            GuidedCaParams {
                w_i: uniform(&mut rng, &[di, h], di),
                b_i: uniform(&mut rng, &[h], di),
                w_i_gate: uniform(&mut rng, &[di, h], di),
                b_i_gate: uniform(&mut rng, &[h], di),
                w_t: uniform(&mut rng, &[dt, h], dt),
                b_t: uniform(&mut rng, &[h], dt),
                w_t_gate: uniform(&mut rng, &[dt, h], dt),
                b_t_gate: uniform(&mut rng, &[h], dt),
                h,
            }
        });
        let diff = match spec.diff_dims() {
            Some((d_model, d)) => Some(DiffAttnParams::new(
                uniform(&mut rng, &[d_model, 2 * d], d_model),
                uniform(&mut rng, &[d_model, 2 * d], d_model),
                uniform(&mut rng, &[d_model, 2 * d], d_model),
                Tensor::scalar(spec.lambda_init).with_grad(),
            )?),
            None => None,
        };
        let in_dim = spec.classifier_in_dim();
        let classifier = ClassifierParams {
            w_fc: uniform(&mut rng, &[in_dim, spec.num_classes], in_dim),
            b_fc: uniform(&mut rng, &[spec.num_classes], in_dim),
        };
        Ok(Self {
            spec,
            seed,
            guided,
            diff,
            classifier,
        })
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn guided(&self) -> Option<&GuidedCaParams> {
        self.guided.as_ref()
    }

    pub fn diff(&self) -> Option<&DiffAttnParams> {
        self.diff.as_ref()
    }

    pub fn classifier(&self) -> &ClassifierParams {
        &self.classifier
    }

    /// Every parameter with its stable name, in serialization order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = &self.guided {
            out.extend([
                ("guided.w_i", &g.w_i),
                ("guided.b_i", &g.b_i),
                ("guided.w_i_gate", &g.w_i_gate),
                ("guided.b_i_gate", &g.b_i_gate),
                ("guided.w_t", &g.w_t),
                ("guided.b_t", &g.b_t),
                ("guided.w_t_gate", &g.w_t_gate),
                ("guided.b_t_gate", &g.b_t_gate),
            ]);
        }
        if let Some(d) = &self.diff {
            out.extend([
                ("diff.w_q", &d.w_q),
                ("diff.w_k", &d.w_k),
                ("diff.w_v", &d.w_v),
                ("diff.lambda", &d.lambda),
            ]);
        }
        out.extend([("fc.w", &self.classifier.w_fc), ("fc.b", &self.classifier.b_fc)]);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.guided {
            out.extend([
                ("guided.w_i", &mut g.w_i),
                ("guided.b_i", &mut g.b_i),
                ("guided.w_i_gate", &mut g.w_i_gate),
                ("guided.b_i_gate", &mut g.b_i_gate),
                ("guided.w_t", &mut g.w_t),
                ("guided.b_t", &mut g.b_t),
                ("guided.w_t_gate", &mut g.w_t_gate),
                ("guided.b_t_gate", &mut g.b_t_gate),
            ]);
        }
        if let Some(d) = &mut self.diff {
            out.extend([
                ("diff.w_q", &mut d.w_q),
                ("diff.w_k", &mut d.w_k),
                ("diff.w_v", &mut d.w_v),
                ("diff.lambda", &mut d.lambda),
            ]);
        }
        out.extend([("fc.w", &mut self.classifier.w_fc), ("fc.b", &mut self.classifier.b_fc)]);
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_params_mut()
            .into_iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.grad = None;
        }
    }

    fn check_widths(&self, image: usize, text: usize) -> Result<()> {
        if image != self.spec.dim_image || text != self.spec.dim_text {
            return Err(Error::Dimension(format!(
                "model expects image/text widths {}/{}, got {image}/{text}",
                self.spec.dim_image, self.spec.dim_text
            )));
        }
        Ok(())
    }

    /// Records the forward pass for a batch `[B, D_I]`, `[B, D_T]` and
    /// returns `[B, num_classes]` logits.
    pub fn forward(&self, tape: &mut Tape, image: Var, text: Var) -> Result<Forward> {
        let (si, st) = (tape.shape(image).to_vec(), tape.shape(text).to_vec());
        if si.len() != 2 || st.len() != 2 || si[0] != st[0] {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: si,
                rhs: st,
            });
        }
        self.check_widths(si[1], st[1])?;
        let batch = si[0];

        let guided_vars = self.guided.as_ref().map(|g| g.bind(tape));
        let diff_vars = self.diff.as_ref().map(|d| d.bind(tape));
        let fc_w = tape.param(&self.classifier.w_fc);
        let fc_b = tape.param(&self.classifier.b_fc);

        let spec = &self.spec;
        let mut guided_out = None;
        let fused = match spec.name {
            VariantName::ImageOnly => image,
            VariantName::TextOnly => text,
            VariantName::CrossAttention | VariantName::CrossDiffAttn => {
                let ti = tokenize(tape, image, spec.n_tok)?;
                let tt = tokenize(tape, text, spec.n_tok)?;
                let image_to_text = cross_attn(tape, ti, tt)?;
                let text_to_image = cross_attn(tape, tt, ti)?;
                let u = flatten_tokens(tape, image_to_text)?;
                let v = flatten_tokens(tape, text_to_image)?;
                tape.concat_last(u, v)?
            }
            VariantName::GuidedCa | VariantName::GuidedCaSelfAttn | VariantName::GuidedCaDiffAttn => {
                let vars: &GuidedCaVars = guided_vars.as_ref().expect("guided params present");
                let out = guided_ca_fuse(
                    tape,
                    image,
                    text,
                    vars,
                    spec.name.uses_self_attn(),
                    spec.n_tok,
                    spec.activation,
                )?;
                guided_out = Some(out);
                out.z
            }
        };

        let refined = match &diff_vars {
            Some(dv) => Some(self.refine(tape, fused, dv, batch)?),
            None => None,
        };
        let head_in = refined.unwrap_or(fused);
        let logits = tape.matmul(head_in, fc_w)?;
        let logits = tape.add_bias(logits, fc_b)?;

        let mut params = Vec::new();
        if let Some(g) = guided_vars {
            params.extend([
                g.w_i, g.b_i, g.w_i_gate, g.b_i_gate, g.w_t, g.b_t, g.w_t_gate, g.b_t_gate,
            ]);
        }
        if let Some(d) = diff_vars {
            params.extend([d.w_q, d.w_k, d.w_v, d.lambda]);
        }
        params.extend([fc_w, fc_b]);
        Ok(Forward {
            logits,
            fused,
            refined,
            guided: guided_out,
            params,
        })
    }

    /// Tokenizes the fused `[B, W]` vector into `n_tok_fused` rows, applies
    /// differential attention, and flattens back to `[B, W]`.
    fn refine(&self, tape: &mut Tape, fused: Var, dv: &DiffAttnVars, batch: usize) -> Result<Var> {
        let x = tokenize(tape, fused, self.spec.n_tok_fused)?;
        let y = diff_attn(tape, x, dv)?;
        let flat = flatten_tokens(tape, y)?;
        debug_assert_eq!(tape.shape(flat)[0], batch);
        Ok(flat)
    }

    /// Mean cross-entropy of a batch; when `accumulate` is set, the gradients
    /// are added into every parameter's `grad`.
    pub fn batch_loss(&mut self, records: &[&EmbeddingRecord], accumulate: bool) -> Result<f64> {
        let (image, text, labels) = stack_batch(records)?;
        let mut tape = Tape::new();
        let iv = tape.leaf(image);
        let tv = tape.leaf(text);
        let fwd = self.forward(&mut tape, iv, tv)?;
        let loss = tape.cross_entropy(fwd.logits, &labels)?;
        let value = tape.value(loss)[0];
        if accumulate {
            tape.backward(loss)?;
            for ((name, p), v) in self.named_params_mut().into_iter().zip(&fwd.params) {
                let g = tape.grad(*v).ok_or_else(|| Error::MissingGrad(name.to_string()))?;
                p.accumulate_grad(g);
            }
        }
        Ok(value)
    }

    /// `[B, num_classes]` logits for a batch of records, without gradients.
    pub fn batch_logits(&self, records: &[&EmbeddingRecord]) -> Result<Vec<Vec<f64>>> {
        let (image, text, _) = stack_batch(records)?;
        self.check_widths(image.shape()[1], text.shape()[1])?;
        let mut tape = Tape::new();
        let iv = tape.leaf(image);
        let tv = tape.leaf(text);
        let fwd = self.forward(&mut tape, iv, tv)?;
        Ok(tape
            .value(fwd.logits)
            .chunks_exact(self.spec.num_classes)
            .map(|r| r.to_vec())
            .collect())
    }

    /// Logits of a single record.
    pub fn logits(&self, rec: &EmbeddingRecord) -> Result<Tensor> {
        let row = self.batch_logits(&[rec])?.remove(0);
        Ok(Tensor::vector(row))
    }

    pub fn predict(&self, rec: &EmbeddingRecord) -> Result<Prediction> {
        let logits = self.logits(rec)?;
        let mut probs = vec![0.0; logits.numel()];
        kernels::softmax_row(logits.data(), &mut probs);
        Ok(Prediction {
            class: argmax(logits.data()),
            probs,
        })
    }

    /// Fusion intermediates for one record (guided variants only populate
    /// the gate fields; others return the fused vector as `z`).
    pub fn activations(&self, rec: &EmbeddingRecord) -> Result<FusionActivations> {
        let (image, text, _) = stack_batch(&[rec])?;
        let mut tape = Tape::new();
        let iv = tape.leaf(image);
        let tv = tape.leaf(text);
        let fwd = self.forward(&mut tape, iv, tv)?;
        let flat = |v: Var| Tensor::vector(tape.value(v).to_vec());
        let z = flat(fwd.fused);
        let z_prime = fwd.refined.map(flat);
        Ok(match fwd.guided {
            Some(g) => FusionActivations {
                z_i: flat(g.z_i),
                z_t: flat(g.z_t),
                alpha_i: flat(g.alpha_i),
                alpha_t: flat(g.alpha_t),
                z,
                z_prime,
            },
            None => FusionActivations {
                z_i: Tensor::vector(rec.f_i.clone()),
                z_t: Tensor::vector(rec.f_t.clone()),
                alpha_i: Tensor::vector(vec![1.0; rec.f_i.len()]),
                alpha_t: Tensor::vector(vec![1.0; rec.f_t.len()]),
                z,
                z_prime,
            },
        })
    }

    /// Replaces all parameter values; used when restoring a checkpoint.
    pub fn load_params_from(&mut self, other: &Model) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::InvalidConfig("checkpoint belongs to a different spec".into()));
        }
        for ((_, dst), (_, src)) in self.named_params_mut().into_iter().zip(other.named_params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Assembles an initialized model for `spec`.
pub fn build_variant(spec: VariantSpec, seed: u64) -> Result<Model> {
    Model::init(spec, seed)
}

/// Parameter count of a variant from its dimensions alone.
pub fn expected_param_count(spec: &VariantSpec) -> usize {
    let (di, dt, h, c) = (spec.dim_image, spec.dim_text, spec.h, spec.num_classes);
    let guided = if spec.name.uses_guided_gates() {
        2 * (di * h + h) + 2 * (dt * h + h)
    } else {
        0
    };
    let diff = spec.diff_dims().map_or(0, |(d_model, d)| 3 * d_model * 2 * d + 1);
    let in_dim = spec.fused_width();
    guided + diff + in_dim * c + c
}

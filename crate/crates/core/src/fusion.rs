//! Guided cross-attention gating and the registry of fusion variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{flatten_tokens, self_attn, tokenize};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The closed set of fusion pipelines. The snake-case names are the stable
/// CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    ImageOnly,
    TextOnly,
    CrossAttention,
    GuidedCa,
    GuidedCaSelfAttn,
    CrossDiffAttn,
    GuidedCaDiffAttn,
}

impl VariantName {
    pub const ALL: [VariantName; 7] = [
        VariantName::ImageOnly,
        VariantName::TextOnly,
        VariantName::CrossAttention,
        VariantName::GuidedCa,
        VariantName::GuidedCaSelfAttn,
        VariantName::CrossDiffAttn,
        VariantName::GuidedCaDiffAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::ImageOnly => "image_only",
            VariantName::TextOnly => "text_only",
            VariantName::CrossAttention => "cross_attention",
            VariantName::GuidedCa => "guided_ca",
            VariantName::GuidedCaSelfAttn => "guided_ca_self_attn",
            VariantName::CrossDiffAttn => "cross_diff_attn",
            VariantName::GuidedCaDiffAttn => "guided_ca_diff_attn",
        }
    }

    pub fn uses_guided_gates(self) -> bool {
        matches!(
            self,
            VariantName::GuidedCa | VariantName::GuidedCaSelfAttn | VariantName::GuidedCaDiffAttn
        )
    }

    pub fn uses_self_attn(self) -> bool {
        matches!(self, VariantName::GuidedCaSelfAttn | VariantName::GuidedCaDiffAttn)
    }

    pub fn uses_cross_attn(self) -> bool {
        matches!(self, VariantName::CrossAttention | VariantName::CrossDiffAttn)
    }

    pub fn uses_diff_attn(self) -> bool {
        matches!(self, VariantName::CrossDiffAttn | VariantName::GuidedCaDiffAttn)
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Nonlinearity applied to the guided projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

fn default_lambda_init() -> f64 {
    0.8
}

/// Everything needed to assemble a model for one fusion variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: VariantName,
    pub dim_image: usize,
    pub dim_text: usize,
    /// Tokens per modality for self- and cross-attention.
    pub n_tok: usize,
    /// Tokens the fused vector is split into before differential attention.
    pub n_tok_fused: usize,
    /// Width of each guided projection.
    pub h: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_lambda_init")]
    pub lambda_init: f64,
}

impl VariantSpec {
    pub const DEFAULT_N_TOK: usize = 8;
    pub const DEFAULT_N_TOK_FUSED: usize = 4;
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(name: VariantName, dim_image: usize, dim_text: usize, num_classes: usize) -> Self {
        Self {
            name,
            dim_image,
            dim_text,
            n_tok: Self::DEFAULT_N_TOK,
            n_tok_fused: Self::DEFAULT_N_TOK_FUSED,
            h: Self::DEFAULT_HIDDEN,
            num_classes,
            activation: Activation::Relu,
            lambda_init: default_lambda_init(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(format!("{}: {msg}", self.name)));
        for (field, v) in [
            ("dim_image", self.dim_image),
            ("dim_text", self.dim_text),
            ("n_tok", self.n_tok),
            ("n_tok_fused", self.n_tok_fused),
            ("h", self.h),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return invalid(format!("{field} must be positive"));
            }
        }
        if !self.lambda_init.is_finite() {
            return invalid("lambda_init must be finite".into());
        }
        let tokenized = self.name.uses_self_attn() || self.name.uses_cross_attn();
        if tokenized && (!self.dim_image.is_multiple_of(self.n_tok) || !self.dim_text.is_multiple_of(self.n_tok)) {
            return invalid(format!(
                "n_tok={} must divide dim_image={} and dim_text={}",
                self.n_tok, self.dim_image, self.dim_text
            ));
        }
        if self.name.uses_cross_attn() && self.dim_image != self.dim_text {
            return invalid(format!(
                "cross attention needs equal token widths, got dim_image={} dim_text={}",
                self.dim_image, self.dim_text
            ));
        }
        if self.name.uses_diff_attn() {
            let w = self.fused_width();
            if !w.is_multiple_of(self.n_tok_fused) || !(w / self.n_tok_fused).is_multiple_of(2) {
                return invalid(format!(
                    "n_tok_fused={} must split fused width {w} into even-width tokens",
                    self.n_tok_fused
                ));
            }
        }
        Ok(())
    }

    /// Width of the fused representation fed to differential attention or
    /// straight to the classifier.
    pub fn fused_width(&self) -> usize {
        match self.name {
            VariantName::ImageOnly => self.dim_image,
            VariantName::TextOnly => self.dim_text,
            VariantName::CrossAttention | VariantName::CrossDiffAttn => self.dim_image + self.dim_text,
            VariantName::GuidedCa | VariantName::GuidedCaSelfAttn | VariantName::GuidedCaDiffAttn => 2 * self.h,
        }
    }

    /// `(d_model, d)` of the differential-attention layer, if the variant has one.
    /// `d_model` is the fused token width and `2d = d_model`.
    pub fn diff_dims(&self) -> Option<(usize, usize)> {
        self.name.uses_diff_attn().then(|| {
            let d_model = self.fused_width() / self.n_tok_fused;
            (d_model, d_model / 2)
        })
    }

    /// Input width of the classification head.
    pub fn classifier_in_dim(&self) -> usize {
        self.fused_width()
    }
}

/// Weights of the guided cross-attention gates: a projection and a sigmoid
/// gate per modality, each an affine map to width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedCaParams {
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_i_gate: Tensor,
    pub b_i_gate: Tensor,
    pub w_t: Tensor,
    pub b_t: Tensor,
    pub w_t_gate: Tensor,
    pub b_t_gate: Tensor,
    pub h: usize,
}

impl GuidedCaParams {
    pub fn bind(&self, tape: &mut Tape) -> GuidedCaVars {
        GuidedCaVars {
            w_i: tape.param(&self.w_i),
            b_i: tape.param(&self.b_i),
            w_i_gate: tape.param(&self.w_i_gate),
            b_i_gate: tape.param(&self.b_i_gate),
            w_t: tape.param(&self.w_t),
            b_t: tape.param(&self.b_t),
            w_t_gate: tape.param(&self.w_t_gate),
            b_t_gate: tape.param(&self.b_t_gate),
        }
    }
}

/// [`GuidedCaParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GuidedCaVars {
    pub w_i: Var,
    pub b_i: Var,
    pub w_i_gate: Var,
    pub b_i_gate: Var,
    pub w_t: Var,
    pub b_t: Var,
    pub w_t_gate: Var,
    pub b_t_gate: Var,
}

/// Intermediate values of one guided fusion, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub z_i: Var,
    pub z_t: Var,
    pub alpha_i: Var,
    pub alpha_t: Var,
    pub z: Var,
}

/// Materialized fusion intermediates for a single record.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionActivations {
    pub z_i: Tensor,
    pub z_t: Tensor,
    pub alpha_i: Tensor,
    pub alpha_t: Tensor,
    pub z: Tensor,
    /// Output of differential attention when the variant applies it.
    pub z_prime: Option<Tensor>,
}

/// `z = F(fᵀW + b)`, `α = σ(fᵀW' + b')` for `f` of shape `[D]` or `[B, D]`.
pub fn guided_gate(
    tape: &mut Tape,
    f: Var,
    proj_w: Var,
    proj_b: Var,
    gate_w: Var,
    gate_b: Var,
    activation: Activation,
) -> Result<(Var, Var)> {
    let shape = tape.shape(f).to_vec();
    let vector = shape.len() == 1;
    let f2 = if vector { tape.reshape(f, &[1, shape[0]])? } else { f };

    let proj = tape.matmul(f2, proj_w)?;
    let proj = tape.add_bias(proj, proj_b)?;
    let z = activation.apply(tape, proj);

    let gate = tape.matmul(f2, gate_w)?;
    let gate = tape.add_bias(gate, gate_b)?;
    let alpha = tape.sigmoid(gate);

    if vector {
        let h = tape.shape(z)[1];
        Ok((tape.reshape(z, &[h])?, tape.reshape(alpha, &[h])?))
    } else {
        Ok((z, alpha))
    }
}

/// Self-attention over `n_tok` tokens of each row, flattened back to `[.., D]`.
pub fn tokenized_self_attn(tape: &mut Tape, f: Var, n_tok: usize) -> Result<Var> {
    let tokens = tokenize(tape, f, n_tok)?;
    let attended = self_attn(tape, tokens)?;
    flatten_tokens(tape, attended)
}

/// Guided cross-attention fusion: `concat(α_t ⊙ z_i, α_i ⊙ z_t)`.
///
/// The text gate scales the image projection and the image gate scales the
/// text projection. With `with_self_attn`, each modality first goes through
/// tokenized self-attention.
pub fn guided_ca_fuse(
    tape: &mut Tape,
    f_i: Var,
    f_t: Var,
    p: &GuidedCaVars,
    with_self_attn: bool,
    n_tok: usize,
    activation: Activation,
) -> Result<FusionVars> {
    let (f_i, f_t) = if with_self_attn {
        (
            tokenized_self_attn(tape, f_i, n_tok)?,
            tokenized_self_attn(tape, f_t, n_tok)?,
        )
    } else {
        (f_i, f_t)
    };
    let (z_i, alpha_i) = guided_gate(tape, f_i, p.w_i, p.b_i, p.w_i_gate, p.b_i_gate, activation)?;
    let (z_t, alpha_t) = guided_gate(tape, f_t, p.w_t, p.b_t, p.w_t_gate, p.b_t_gate, activation)?;
    let image_half = tape.mul(alpha_t, z_i)?;
    let text_half = tape.mul(alpha_i, z_t)?;
    let z = tape.concat_last(image_half, text_half)?;
    Ok(FusionVars {
        z_i,
        z_t,
        alpha_i,
        alpha_t,
        z,
    })
}

//! Encoder `f`, classifier `g` and the composed model `x ↦ g(f(x))`.
//!
//! The encoder is an MLP with ReLU between layers and a linear embedding
//! output. The classifier is either cosine-style (features L2-normalized,
//! bias-free, divided by a temperature) or a plain affine map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::{math, Error, Result};

/// Guard added to feature norms before normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each linear layer, input to embedding.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(core::iter::once(&self.embed_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub normalize: bool,
    pub temperature: f64,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Parameter("classifier embed_dim must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder layers.
    Body,
    /// Classifier layer.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?.requiring_grad();
        let bias = if bias {
            Some(Tensor::vector(draw(fan_out))?.requiring_grad())
        } else {
            None
        };
        Ok(Self { weight, bias })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    encoder_spec: EncoderSpec,
    classifier_spec: ClassifierSpec,
    encoder: Vec<Linear>,
    classifier: Linear,
}

/// Tape handles for every parameter of a [`Model`], in [`Model::parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    encoder: Vec<(Var, Option<Var>)>,
    classifier: (Var, Option<Var>),
    normalize: bool,
    temperature: f64,
}

impl Model {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new(encoder_spec: EncoderSpec, classifier_spec: ClassifierSpec, rng: &mut Rng) -> Result<Self> {
        encoder_spec.validate()?;
        classifier_spec.validate()?;
        if encoder_spec.embed_dim != classifier_spec.embed_dim {
            return Err(Error::Parameter(format!(
                "encoder embeds into {} dims, classifier expects {}",
                encoder_spec.embed_dim, classifier_spec.embed_dim
            )));
        }
        let encoder = encoder_spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Linear::init(i, o, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::init(
            classifier_spec.embed_dim,
            classifier_spec.num_classes,
            !classifier_spec.normalize,
            rng,
        )?;
        Ok(Self {
            encoder_spec,
            classifier_spec,
            encoder,
            classifier,
        })
    }

    /// Assembles a model from explicit layers, checking every shape.
    pub fn from_layers(
        encoder_spec: EncoderSpec,
        classifier_spec: ClassifierSpec,
        encoder: Vec<Linear>,
        classifier: Linear,
    ) -> Result<Self> {
        encoder_spec.validate()?;
        classifier_spec.validate()?;
        let dims = encoder_spec.layer_dims();
        if dims.len() != encoder.len() {
            return Err(Error::Parameter(format!(
                "expected {} encoder layers, got {}",
                dims.len(),
                encoder.len()
            )));
        }
        for ((i, o), layer) in dims.iter().zip(&encoder) {
            check_linear(layer, *i, *o, true)?;
        }
        check_linear(
            &classifier,
            classifier_spec.embed_dim,
            classifier_spec.num_classes,
            !classifier_spec.normalize,
        )?;
        let mark = |l: Linear| Linear {
            weight: l.weight.requiring_grad(),
            bias: l.bias.map(Tensor::requiring_grad),
        };
        Ok(Self {
            encoder_spec,
            classifier_spec,
            encoder: encoder.into_iter().map(mark).collect(),
            classifier: mark(classifier),
        })
    }

    pub fn encoder_spec(&self) -> &EncoderSpec {
        &self.encoder_spec
    }

    pub fn classifier_spec(&self) -> &ClassifierSpec {
        &self.classifier_spec
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn classifier_layer(&self) -> &Linear {
        &self.classifier
    }

    /// Parameters with their stable names and groups.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), ParamGroup::Body, &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("encoder.{i}.bias"), ParamGroup::Body, b));
            }
        }
        out.push(("classifier.weight".into(), ParamGroup::Head, &self.classifier.weight));
        if let Some(b) = &self.classifier.bias {
            out.push(("classifier.bias".into(), ParamGroup::Head, b));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out.push(&mut self.classifier.weight);
        if let Some(b) = &mut self.classifier.bias {
            out.push(b);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, true)
    }

    /// Records parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, false)
    }

    /// Uses `vars`, already on a tape and in [`Model::parameters`] order, as
    /// this model's parameters. Only their count is checked here; shapes are
    /// checked by the forward pass.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.parameters().len();
        if vars.len() != expected {
            return Err(Error::Parameter(format!(
                "{} parameter handles for a model with {expected}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("count checked");
        let encoder = self
            .encoder
            .iter()
            .map(|l| (next(), l.bias.as_ref().map(|_| next())))
            .collect();
        let classifier = (next(), self.classifier.bias.as_ref().map(|_| next()));
        Ok(BoundModel {
            encoder,
            classifier,
            normalize: self.classifier_spec.normalize,
            temperature: self.classifier_spec.temperature,
        })
    }

    fn bind_with(&self, tape: &mut Tape, track: bool) -> BoundModel {
        let mut put = |t: &Tensor| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| (put(&l.weight), l.bias.as_ref().map(&mut put)))
            .collect();
        let classifier = (
            put(&self.classifier.weight),
            self.classifier.bias.as_ref().map(&mut put),
        );
        BoundModel {
            encoder,
            classifier,
            normalize: self.classifier_spec.normalize,
            temperature: self.classifier_spec.temperature,
        }
    }

    /// Inference-only logits for a `B × input_dim` row-major batch.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let f = bound.forward_features(&mut tape, x)?;
        let logits = bound.forward_logits(&mut tape, f)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference-only embeddings.
    pub fn predict_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let f = bound.forward_features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }
}

fn check_linear(l: &Linear, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
    if l.weight.shape() != [fan_in, fan_out] {
        return Err(Error::Parameter(format!(
            "weight shape {:?}, expected [{fan_in}, {fan_out}]",
            l.weight.shape()
        )));
    }
    match (&l.bias, bias) {
        (Some(b), true) if b.shape() == [fan_out] => Ok(()),
        (None, false) => Ok(()),
        (b, _) => Err(Error::Parameter(format!(
            "bias {:?} does not match layer [{fan_in}, {fan_out}] (bias expected: {bias})",
            b.as_ref().map(Tensor::shape)
        ))),
    }
}

impl BoundModel {
    /// Parameter handles in [`Model::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.push(*w);
            out.extend(b);
        }
        out.push(self.classifier.0);
        out.extend(self.classifier.1);
        out
    }

    /// Handles of the classifier parameters only.
    pub fn classifier_vars(&self) -> Vec<Var> {
        let mut out = vec![self.classifier.0];
        out.extend(self.classifier.1);
        out
    }

    /// Gradients collected after [`Tape::backward`], in parameter order.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }

    /// `f(x)`: `B × input_dim → B × embed_dim`.
    pub fn forward_features(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        let mut h = batch;
        let last = self.encoder.len() - 1;
        for (i, (w, b)) in self.encoder.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            if let Some(b) = b {
                h = tape.add_row(h, *b)?;
            }
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `g(features)`: `B × embed_dim → B × C`.
    pub fn forward_logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.logits_inner(tape, features, None)
    }

    /// Logits whose classifier parameters sit behind a gradient reversal of
    /// strength `coeff`: identical forward values, classifier gradients negated
    /// and scaled.
    pub fn forward_logits_reversed_head(&self, tape: &mut Tape, features: Var, coeff: f64) -> Result<Var> {
        self.logits_inner(tape, features, Some(coeff))
    }

    fn logits_inner(&self, tape: &mut Tape, features: Var, reverse: Option<f64>) -> Result<Var> {
        let (mut w, mut b) = self.classifier;
        if let Some(c) = reverse {
            w = tape.gradient_reversal(w, c)?;
            b = b.map(|b| tape.gradient_reversal(b, c)).transpose()?;
        }
        if self.normalize {
            let x = tape.normalize_rows(features, NORM_EPS)?;
            let z = tape.matmul(x, w)?;
            Ok(tape.scale(z, 1.0 / self.temperature))
        } else {
            let z = tape.matmul(features, w)?;
            match b {
                Some(b) => tape.add_row(z, b),
                None => Ok(z),
            }
        }
    }
}

/// Gradient reversal: identity forward, `−coeff ×` gradient backward.
pub fn gradient_reversal(tape: &mut Tape, features: Var, coeff: f64) -> Result<Var> {
    tape.gradient_reversal(features, coeff)
}

//! Central finite-difference checks of every loss against the tape.
//!
//! Each case draws small random inputs, differentiates the loss with the tape
//! and compares every coordinate with `(L(x + h) − L(x − h)) / 2h`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::alignment;
use crate::consistency;
use crate::model::{ClassifierSpec, EncoderSpec, Model, ParamGroup};
use crate::seed::{rng_for, Rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{build_objective, cross_entropy, StepViews, TrainConfig, Variant};
use crate::uda::{self, UdaInputs, UdaKind, UdaTerm};
use crate::Result;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Floor of the relative-error denominator. A central difference of a loss
/// of size `L` carries round-off near `ε·L/h ≈ 1e-9`, so derivatives smaller
/// than this floor are compared on an absolute scale instead.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares tape gradients of `loss` with central differences in every
/// coordinate of every input. `signs[i]` multiplies the numeric derivative of
/// input `i` (−1 for inputs behind a unit gradient reversal).
pub fn check<F>(name: &str, inputs: &[Tensor], signs: &[f64], loss: F) -> Result<CaseReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = signs.get(i).copied().unwrap_or(1.0) * (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            coordinates += 1;
        }
    }
    Ok(CaseReport {
        name: name.into(),
        coordinates,
        max_relative_error: worst,
    })
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

fn symmetric(rng: &mut Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Labels covering every class at least once, then uniform.
fn covering_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n)
        .map(|i| if i < classes { i } else { rng.random_range(0..classes) })
        .collect()
}

fn tiny_model(rng: &mut Rng, d: usize, c: usize, normalize: bool) -> Result<Model> {
    Model::new(
        EncoderSpec {
            input_dim: d,
            hidden_dims: vec![5],
            embed_dim: 4,
        },
        ClassifierSpec {
            embed_dim: 4,
            num_classes: c,
            normalize,
            temperature: 0.5,
        },
        rng,
    )
}

/// Compares `build_objective`'s gradients with differences of its total.
fn check_objective(name: &str, model: &Model, config: &TrainConfig, views: &StepViews) -> Result<CaseReport> {
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, _, t)| t.clone()).collect();
    let mut obj = build_objective(model, config, views)?;
    let analytic = obj.backward()?;
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut m = model.clone();
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            let mut total_at = |v: f64| -> Result<f64> {
                m.parameters_mut()[i].data_mut()[j] = v;
                let o = build_objective(&m, config, views)?;
                o.tape.value(o.total).item()
            };
            let up = total_at(orig + STEP)?;
            let down = total_at(orig - STEP)?;
            m.parameters_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            coordinates += 1;
        }
    }
    Ok(CaseReport {
        name: name.into(),
        coordinates,
        max_relative_error: worst,
    })
}

/// Every case of the suite on `instances` random draws each; B ≤ 8, C ≤ 4,
/// d ≤ 6.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    let mut merge = |r: CaseReport| match reports.iter_mut().find(|x: &&mut CaseReport| x.name == r.name) {
        Some(x) => {
            x.coordinates += r.coordinates;
            x.max_relative_error = x.max_relative_error.max(r.max_relative_error);
        }
        None => reports.push(r),
    };
    for k in 0..instances as u64 {
        let mut rng = rng_for([seed, k, 0, 0x6763]);
        let b = rng.random_range(2..=8);
        let c = rng.random_range(2..=4);
        let d = rng.random_range(2..=6);

        let labels = covering_labels(&mut rng, b, c);
        let logits = symmetric(&mut rng, &[b, c]);
        merge(check("cross_entropy", &[logits.clone()], &[], |t, v| {
            cross_entropy(t, v[0], &labels)
        })?);

        merge(check("entropy", &[logits.clone()], &[], |t, v| {
            let p = t.softmax(v[0])?;
            Ok(uda::entropy(t, p))
        })?);

        let n_lmk = c.max(rng.random_range(2..=8));
        let lmk_labels = covering_labels(&mut rng, n_lmk, c);
        let src = symmetric(&mut rng, &[b, d]);
        let lmk = symmetric(&mut rng, &[lmk_labels.len(), d]);
        merge(check("prototypical", &[src.clone(), lmk.clone()], &[], |t, v| {
            let protos = alignment::compute_prototypes(t, v[1], &lmk_labels, c)?;
            alignment::prototypical_loss(t, v[0], &labels, &protos)
        })?);

        let margin = rng.random_range(0.5..2.0);
        merge(check("triplet", &[src.clone(), lmk.clone()], &[], |t, v| {
            let mined = alignment::mine_hard_triplets(t.value(v[1]), &lmk_labels, t.value(v[0]), &labels)?;
            Ok(alignment::triplet_loss(t, &mined.triplets, v[1], v[0], margin)?.loss)
        })?);

        // Weak-view probabilities peaked enough that some rows pass σ = 0.5.
        let weak = {
            let mut t = Tape::new();
            let z = t.constant(symmetric(&mut rng, &[b, c]));
            let z = t.scale(z, 4.0);
            let p = t.softmax(z)?;
            t.value(p).clone()
        };
        let gated = consistency::gate_pseudo_labels(&weak, 0.5)?;
        merge(check("consistency", &[logits.clone()], &[], |t, v| {
            let p = t.softmax(v[0])?;
            Ok(consistency::consistency_loss(t, &gated, p)?.loss)
        })?);

        // Minimax entropy: encoder parameters descend the entropy, the
        // classifier ascends it.
        let model = tiny_model(&mut rng, d, c, true)?;
        let x = symmetric(&mut rng, &[b, d]);
        let groups: Vec<ParamGroup> = model.parameters().into_iter().map(|(_, g, _)| g).collect();
        let signs: Vec<f64> = groups
            .iter()
            .map(|g| if *g == ParamGroup::Head { -1.0 } else { 1.0 })
            .collect();
        let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, _, t)| t.clone()).collect();
        for kind in [UdaKind::Ent, UdaKind::Mme] {
            let name = if kind == UdaKind::Mme { "uda_mme" } else { "uda_ent" };
            let signs = if kind == UdaKind::Mme { signs.as_slice() } else { &[] };
            merge(check(name, &params, signs, |t, v| {
                let bound = model.bind_vars(v)?;
                let xv = t.constant(x.clone());
                let f = bound.forward_features(t, xv)?;
                let term = UdaTerm { name: kind, weight: 1.0 };
                Ok(uda::uda_loss(
                    t,
                    &term,
                    &UdaInputs {
                        model: &bound,
                        source_features: f,
                        source_labels: &labels,
                        unlabeled_features: f,
                    },
                )?
                .raw)
            })?);
        }

        // The full objective: 2-row, 3-column single-channel images.
        let views = StepViews {
            labeled: uniform(&mut rng, &[8, 6], 0.0, 1.0),
            source_labels: vec![0, 1, 2, 0, 1],
            landmark_labels: vec![0, 1, 2],
            unlabeled_strong: uniform(&mut rng, &[4, 6], 0.0, 1.0),
            unlabeled_weak: uniform(&mut rng, &[4, 6], 0.0, 1.0),
        };
        let model = tiny_model(&mut rng, 6, 3, true)?;
        for variant in [Variant::EcaclP, Variant::EcaclT] {
            let config = TrainConfig {
                variant,
                uda: UdaTerm {
                    name: UdaKind::Ent,
                    weight: 0.1,
                },
                sigma: 0.0,
                ..TrainConfig::default()
            };
            let name = match variant {
                Variant::EcaclP => "objective_p",
                Variant::EcaclT => "objective_t",
            };
            merge(check_objective(name, &model, &config, &views)?);
        }
    }
    Ok(reports)
}

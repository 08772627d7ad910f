//! Unsupervised alignment term added on top of the supervised loss.
//!
//! Three built-in plugins: `none`, entropy minimization (`ent`) and minimax
//! entropy (`mme`). Other methods plug in through [`UdaPlugin`].

use core::fmt;
use core::str::FromStr;

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::model::BoundModel;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UdaKind {
    None,
    Ent,
    Mme,
}

impl FromStr for UdaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "ent" => Ok(Self::Ent),
            "mme" => Ok(Self::Mme),
            other => Err(Error::Config(format!("unknown UDA plugin `{other}`"))),
        }
    }
}

impl fmt::Display for UdaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ent => "ent",
            Self::Mme => "mme",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UdaTerm {
    pub name: UdaKind,
    pub weight: f64,
}

impl Default for UdaTerm {
    fn default() -> Self {
        Self {
            name: UdaKind::Mme,
            weight: 0.1,
        }
    }
}

impl UdaTerm {
    pub fn none() -> Self {
        Self {
            name: UdaKind::None,
            weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!(
                "UDA weight must be >= 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// What a plugin may look at: the bound model plus the embeddings of the
/// strongly augmented source batch and the weakly augmented unlabeled batch.
#[derive(Debug, Clone, Copy)]
pub struct UdaInputs<'a> {
    pub model: &'a BoundModel,
    pub source_features: Var,
    pub source_labels: &'a [usize],
    pub unlabeled_features: Var,
}

/// An unweighted unsupervised alignment loss.
pub trait UdaPlugin {
    fn loss(&self, tape: &mut Tape, inputs: &UdaInputs<'_>) -> Result<Var>;
}

/// Mean row entropy `−Σ_k p_k ln p_k`, with `0 ln 0 = 0`.
pub fn entropy(tape: &mut Tape, probs: Var) -> Var {
    let plogp = tape.xlogx(probs);
    let rows = tape.row_sum(plogp);
    let mean = tape.mean(rows);
    tape.neg(mean)
}

struct NoAlignment;

impl UdaPlugin for NoAlignment {
    fn loss(&self, tape: &mut Tape, _: &UdaInputs<'_>) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }
}

struct EntropyMinimization;

impl UdaPlugin for EntropyMinimization {
    fn loss(&self, tape: &mut Tape, inputs: &UdaInputs<'_>) -> Result<Var> {
        let logits = inputs.model.forward_logits(tape, inputs.unlabeled_features)?;
        let p = tape.softmax(logits)?;
        Ok(entropy(tape, p))
    }
}

/// Same value as entropy minimization; the classifier parameters sit behind a
/// unit gradient reversal so the classifier ascends the entropy while the
/// encoder descends it.
struct MinimaxEntropy;

impl UdaPlugin for MinimaxEntropy {
    fn loss(&self, tape: &mut Tape, inputs: &UdaInputs<'_>) -> Result<Var> {
        let logits = inputs
            .model
            .forward_logits_reversed_head(tape, inputs.unlabeled_features, 1.0)?;
        let p = tape.softmax(logits)?;
        Ok(entropy(tape, p))
    }
}

impl UdaKind {
    pub fn plugin(self) -> &'static dyn UdaPlugin {
        match self {
            Self::None => &NoAlignment,
            Self::Ent => &EntropyMinimization,
            Self::Mme => &MinimaxEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UdaLoss {
    /// `L_ua`
    pub raw: Var,
    /// `α · L_ua`
    pub weighted: Var,
}

/// Evaluates the configured plugin. `none` yields an exact constant 0.
pub fn uda_loss(tape: &mut Tape, term: &UdaTerm, inputs: &UdaInputs<'_>) -> Result<UdaLoss> {
    term.validate()?;
    let raw = term.name.plugin().loss(tape, inputs)?;
    let weighted = tape.scale(raw, term.weight);
    Ok(UdaLoss { raw, weighted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierSpec, EncoderSpec, Model, ParamGroup};
    use crate::seed::{rng_for, Rng};
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn entropy_of(rows: Tensor) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(rows);
        let h = entropy(&mut t, p);
        t.value(h).item().unwrap()
    }

    fn random_probs(rng: &mut Rng, b: usize, c: usize) -> Tensor {
        let mut d = Vec::new();
        for _ in 0..b {
            let e: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = e.iter().sum();
            d.extend(e.iter().map(|v| v / z));
        }
        Tensor::new(vec![b, c], d).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let u = Tensor::new(vec![1, 4], vec![0.25; 4]).unwrap();
        assert!((entropy_of(u) - 4f64.ln()).abs() < 1e-15);
        let one_hot = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy_of(one_hot), 0.0);
    }

    #[test]
    fn entropy_matches_per_row_oracle() {
        let mut rng = rng_for([17, 0, 0, 1]);
        for _ in 0..50 {
            let p = random_probs(&mut rng, 5, 3);
            let want: f64 = (0..5)
                .map(|i| -p.row(i).iter().map(|v| v * v.ln()).sum::<f64>())
                .sum::<f64>()
                / 5.0;
            assert!((entropy_of(p) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_names_are_config_errors() {
        assert_eq!("mme".parse::<UdaKind>().unwrap(), UdaKind::Mme);
        assert!(matches!("dann".parse::<UdaKind>(), Err(Error::Config(_))));
        assert!(UdaTerm { name: UdaKind::Ent, weight: -1.0 }.validate().is_err());
    }

    fn model(rng: &mut Rng) -> Model {
        Model::new(
            EncoderSpec {
                input_dim: 5,
                hidden_dims: vec![4],
                embed_dim: 3,
            },
            ClassifierSpec {
                embed_dim: 3,
                num_classes: 3,
                normalize: true,
                temperature: 0.5,
            },
            rng,
        )
        .unwrap()
    }

    /// (value, parameter gradients) of `α·L_ua` for one plugin.
    fn run(kind: UdaKind, weight: f64, seed: u64) -> (f64, Vec<Vec<f64>>) {
        let mut rng = rng_for([seed, 0, 0, 2]);
        let m = model(&mut rng);
        let x = Tensor::new(vec![6, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t);
        let xv = t.constant(x);
        let f = b.forward_features(&mut t, xv).unwrap();
        let term = UdaTerm { name: kind, weight };
        let l = uda_loss(
            &mut t,
            &term,
            &UdaInputs {
                model: &b,
                source_features: f,
                source_labels: &[0, 1, 2, 0, 1, 2],
                unlabeled_features: f,
            },
        )
        .unwrap();
        t.backward(l.weighted).unwrap();
        (t.value(l.weighted).item().unwrap(), b.gradients(&t))
    }

    #[test]
    fn none_is_zero_with_no_gradient() {
        let (v, g) = run(UdaKind::None, 0.1, 1);
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_weight_annihilates() {
        let (v, g) = run(UdaKind::Ent, 0.0, 2);
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn mme_reverses_the_classifier_gradient() {
        let mut rng = rng_for([3, 0, 0, 2]);
        let groups: Vec<ParamGroup> = model(&mut rng).parameters().into_iter().map(|(_, g, _)| g).collect();
        for seed in 0..10 {
            let (ve, ge) = run(UdaKind::Ent, 0.1, seed);
            let (vm, gm) = run(UdaKind::Mme, 0.1, seed);
            assert_eq!(ve.to_bits(), vm.to_bits());
            for ((g, e), m) in groups.iter().zip(&ge).zip(&gm) {
                for (e, m) in e.iter().zip(m) {
                    match g {
                        ParamGroup::Head => assert_eq!(*m, -e),
                        ParamGroup::Body => assert_eq!(m, e),
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn uniform_maximizes_and_one_hot_minimizes(seed in any::<u64>(), c in 2usize..6) {
            let mut rng = rng_for([seed, 0, 0, 3]);
            let u = Tensor::new(vec![1, c], vec![1.0 / c as f64; c]).unwrap();
            let hu = entropy_of(u);
            let p = random_probs(&mut rng, 1, c);
            prop_assert!(entropy_of(p.clone()) <= hu + 1e-15);
            prop_assert!(entropy_of(p) > 0.0);
            let mut hot = vec![0.0; c];
            hot[rng.random_range(0..c)] = 1.0;
            prop_assert_eq!(entropy_of(Tensor::new(vec![1, c], hot).unwrap()), 0.0);
        }
    }
}

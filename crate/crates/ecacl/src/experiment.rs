//! Whole training runs and the grids built from them: the ablation table,
//! hyperparameter sweeps and multi-seed statistics.

use std::fmt::Write as _;

use ecacl_core::augment::{BatchAugmenter, SequentialAugmenter};
use ecacl_core::model::Model;
use ecacl_core::train::{prepare_data, sampler_for, MetricsRecord, TrainConfig, Trainer};
use rayon::prelude::*;
use rayon::ThreadPoolBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub final_eval: MetricsRecord,
}

/// Trains `config` from scratch, passing every record to `sink`.
pub fn train_run(
    config: &TrainConfig,
    augmenter: &dyn BatchAugmenter,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunResult> {
    let data = prepare_data(config)?;
    let sampler = sampler_for(config, &data)?;
    let model = config.init_model(data.input_dim(), data.num_classes())?;
    let mut trainer = Trainer::new(config.clone(), model, augmenter)?;
    let eval = data.target.unlabeled.evaluation_dataset();
    let mut failure = None;
    let fitted = trainer.fit(&data, &sampler, &eval, |r| {
        sink(r).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            ecacl_core::Error::Contract(format!("metrics sink failed: {msg}"))
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunResult {
        final_eval: fitted?,
        model: trainer.into_model(),
    })
}

/// Final target mean class accuracy of each config, computed on `jobs`
/// threads. Runs are independent, so the result does not depend on `jobs`.
pub fn final_accuracies(configs: &[TrainConfig], jobs: usize) -> Result<Vec<f64>> {
    let pool = ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start experiment workers: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .map(|c| Ok(train_run(c, &SequentialAugmenter, |_| Ok(()))?.final_eval.mean_class_accuracy))
            .collect()
    })
}

/// Mean and sample standard deviation of one configuration over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedStats {
    pub fn new(name: impl Into<String>, per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            name: name.into(),
            per_seed,
            mean,
            std,
        }
    }
}

/// `config` once per landmark split seed.
pub fn over_split_seeds(config: &TrainConfig, seeds: &[u64]) -> Vec<TrainConfig> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            c.split.split_seed = s;
            c
        })
        .collect()
}

/// Runs each named config over every seed, all jobs sharing one pool.
pub fn seed_stats(named: &[(String, TrainConfig)], seeds: &[u64], jobs: usize) -> Result<Vec<SeedStats>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let configs: Vec<TrainConfig> = named
        .iter()
        .flat_map(|(_, c)| over_split_seeds(c, seeds))
        .collect();
    let acc = final_accuracies(&configs, jobs)?;
    Ok(named
        .iter()
        .zip(acc.chunks(seeds.len()))
        .map(|((name, _), a)| SeedStats::new(name.clone(), a.to_vec()))
        .collect())
}

/// One row of the ablation grid. Every row keeps the configured UDA plugin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Categorical alignment (`λ1` as configured, else 0).
    pub ca: bool,
    /// Strong augmentation on the labeled paths.
    pub sa: bool,
    /// Consistency alignment (`λ2` as configured, else 0).
    pub cona: bool,
}

impl AblationRow {
    pub fn grid() -> Vec<Self> {
        (0..8)
            .map(|i| Self {
                ca: i & 1 != 0,
                sa: i & 2 != 0,
                cona: i & 4 != 0,
            })
            .collect()
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if !self.ca {
            c.lambda1 = 0.0;
        }
        if !self.cona {
            c.lambda2 = 0.0;
        }
        c.strong_on_labeled = self.sa;
        c
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        format!("CA {} SA {} CONA {}", mark(self.ca), mark(self.sa), mark(self.cona))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: SeedStats,
    pub rows: Vec<(AblationRow, SeedStats)>,
}

/// The source-and-target-only baseline of `base`.
pub fn baseline_config(base: &TrainConfig) -> TrainConfig {
    base.clone().source_and_target_only()
}

pub fn ablate(base: &TrainConfig, seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    let rows = AblationRow::grid();
    let mut named = vec![("ST".to_owned(), baseline_config(base))];
    named.extend(rows.iter().map(|r| (r.label(), r.apply(base))));
    let mut stats = seed_stats(&named, seeds, jobs)?.into_iter();
    let baseline = stats.next().expect("baseline row");
    Ok(AblationReport {
        baseline,
        rows: rows.into_iter().zip(stats).collect(),
    })
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut rows = vec![&self.baseline];
        rows.extend(self.rows.iter().map(|(_, s)| s));
        stats_table("row", &rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Sigma,
    Lambda1,
    Lambda2,
}

impl SweepParam {
    pub fn set(&self, config: &mut TrainConfig, value: f64) {
        match self {
            Self::Sigma => config.sigma = value,
            Self::Lambda1 => config.lambda1 = value,
            Self::Lambda2 => config.lambda2 = value,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sigma => "sigma",
            Self::Lambda1 => "lambda1",
            Self::Lambda2 => "lambda2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub baseline: SeedStats,
    pub points: Vec<(f64, SeedStats)>,
}

pub fn sweep(base: &TrainConfig, param: SweepParam, values: &[f64], seeds: &[u64], jobs: usize) -> Result<SweepReport> {
    let mut named = vec![("ST".to_owned(), baseline_config(base))];
    for &v in values {
        let mut c = base.clone();
        param.set(&mut c, v);
        c.validate()?;
        named.push((format!("{}={v}", param.name()), c));
    }
    let mut stats = seed_stats(&named, seeds, jobs)?.into_iter();
    let baseline = stats.next().expect("baseline row");
    Ok(SweepReport {
        param,
        baseline,
        points: values.iter().copied().zip(stats).collect(),
    })
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut rows = vec![&self.baseline];
        rows.extend(self.points.iter().map(|(_, s)| s));
        stats_table(self.param.name(), &rows)
    }

    /// Largest minus smallest mean over the swept values.
    pub fn spread(&self) -> f64 {
        let means = self.points.iter().map(|(_, s)| s.mean);
        means.clone().fold(f64::MIN, f64::max) - means.fold(f64::MAX, f64::min)
    }
}

fn stats_table(head: &str, rows: &[&SeedStats]) -> String {
    let width = rows.iter().map(|s| s.name.len()).max().unwrap_or(0).max(head.len());
    let mut out = format!("{head:<width$}  MCA mean   std    per seed\n");
    for s in rows {
        let seeds: Vec<String> = s.per_seed.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>5.2}   {}",
            s.name,
            100.0 * s.mean,
            100.0 * s.std,
            seeds.join(" ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_every_combination_once() {
        let g = AblationRow::grid();
        assert_eq!(g.len(), 8);
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn rows_toggle_only_their_terms() {
        let base = TrainConfig::default();
        let none = AblationRow {
            ca: false,
            sa: false,
            cona: false,
        }
        .apply(&base);
        assert_eq!((none.lambda1, none.lambda2, none.strong_on_labeled), (0.0, 0.0, false));
        assert_eq!(none.uda, base.uda);
        let all = AblationRow {
            ca: true,
            sa: true,
            cona: true,
        }
        .apply(&base);
        assert_eq!(all, base);
    }

    #[test]
    fn seed_stats_use_sample_deviation() {
        let s = SeedStats::new("x", vec![0.5, 0.7]);
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(SeedStats::new("y", vec![0.3]).std, 0.0);
    }

    #[test]
    fn split_seeds_only_change_the_split() {
        let base = TrainConfig::default();
        let cs = over_split_seeds(&base, &[3, 4]);
        assert_eq!(cs[1].split.split_seed, 4);
        let mut back = cs[0].clone();
        back.split.split_seed = base.split.split_seed;
        assert_eq!(back, base);
    }
}

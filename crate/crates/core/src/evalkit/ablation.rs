//! Component, sampling and batch-ratio ablations over several seeds.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_with, forgetting_delta, parallel_map, DiceReport, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::sampler::{BatchRatio, Strategy};
use crate::synthgen::{generate_dataset, ClassSplit, GeneratorParams, MultiLabelVolume, Role};
use crate::trainer::{train_base, train_novel, EpochLog, TrainConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MC3D_THREADS";

/// Worker count: `MC3D_THREADS` when set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// A novel-step configuration under a row name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: TrainConfig,
}

impl NamedConfig {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

/// Groups of ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Loss components added one at a time.
    Components,
    /// Contrastive sampling strategies with everything else on.
    Sampling,
    /// Contrastive batch ratios with everything else on.
    Ratios,
    All,
}

impl Suite {
    /// Row configurations derived from `base`; its switches are overridden.
    pub fn configs(self, base: &TrainConfig) -> Vec<NamedConfig> {
        let full = TrainConfig {
            use_dis: true,
            use_vc: true,
            use_dw: true,
            ..base.clone()
        };
        let components = || {
            vec![
                NamedConfig::new("lwf", full.clone().lwf()),
                NamedConfig::new("lwf+dis", TrainConfig { use_dis: true, ..full.clone().lwf() }),
                NamedConfig::new("lwf+dis+vc", TrainConfig { use_dw: false, ..full.clone() }),
                NamedConfig::new("lwf+dis+vc+dw", full.clone()),
            ]
        };
        let strategy = |s: Strategy| NamedConfig::new(s.to_string(), TrainConfig { strategy: s, ..full.clone() });
        let ratio = |r: f64, label: &str| {
            NamedConfig::new(
                format!("ratio-{label}"),
                TrainConfig {
                    ratio: BatchRatio::new(r).expect("allowed ratio"),
                    ..full.clone()
                },
            )
        };
        match self {
            Suite::Components => components(),
            Suite::Sampling => vec![strategy(Strategy::BalancedHard), strategy(Strategy::Balanced), strategy(Strategy::Random)],
            Suite::Ratios => vec![ratio(0.125, "1/8"), ratio(0.25, "1/4"), ratio(0.5, "1/2"), ratio(1.0, "1")],
            Suite::All => {
                let mut v = components();
                v.push(strategy(Strategy::Balanced));
                v.push(strategy(Strategy::Random));
                v.push(ratio(0.25, "1/4"));
                v.push(ratio(0.5, "1/2"));
                v.push(ratio(1.0, "1"));
                v
            }
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Suite::Components),
            "sampling" => Ok(Suite::Sampling),
            "ratios" => Ok(Suite::Ratios),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown ablation suite {other:?} (expected components, sampling, ratios or all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Components => "components",
            Suite::Sampling => "sampling",
            Suite::Ratios => "ratios",
            Suite::All => "all",
        })
    }
}

/// One (configuration, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub config: String,
    pub seed: u64,
    pub report: DiceReport,
    /// Mean base-class Dice drop from the base model.
    pub forgetting: f64,
    pub final_epoch: EpochLog,
    /// Mean per-epoch wall time of the contrastive branch.
    pub vc_seconds_per_epoch: f64,
    pub seconds: f64,
}

/// CSV row of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub base_mean: f64,
    pub novel_mean: f64,
    pub all_mean: f64,
    pub forgetting: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub configs: Vec<String>,
    pub seeds: Vec<u64>,
    /// Test report of the shared base model.
    pub base_report: DiceReport,
    /// Base-step wall time: generation, training and evaluation.
    pub base_seconds: f64,
    /// Seed-major: every configuration of the first seed, then the next seed.
    pub cells: Vec<AblationCell>,
}

/// Median of `values`; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationMatrix {
    pub fn cells_for<'a>(&'a self, config: &'a str) -> impl Iterator<Item = &'a AblationCell> + 'a {
        self.cells.iter().filter(move |c| c.config == config)
    }

    /// Median of `metric` over the seeds of one configuration.
    pub fn median_of(&self, config: &str, metric: impl Fn(&AblationCell) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.cells_for(config).map(metric).collect();
        median(&v)
    }

    pub fn rows(&self) -> Vec<AblationRow> {
        self.cells
            .iter()
            .map(|c| AblationRow {
                config: c.config.clone(),
                seed: c.seed,
                base_mean: c.report.base_mean,
                novel_mean: c.report.novel_mean.unwrap_or(f64::NAN),
                all_mean: c.report.all_mean,
                forgetting: c.forgetting,
            })
            .collect()
    }

    /// Columns `config,seed,base_mean,novel_mean,all_mean,forgetting`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row).map_err(|e| Error::Evaluation(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Evaluation(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// The shared base step: dataset, base model and its test report.
struct BaseStep {
    base: crate::model::SegModel,
    report: DiceReport,
    oneshot: MultiLabelVolume,
    test: Vec<MultiLabelVolume>,
    split: ClassSplit,
    seconds: f64,
}

fn base_step(generator: &GeneratorParams, train: &TrainConfig) -> Result<BaseStep> {
    let start = Instant::now();
    let data = generate_dataset(generator)?;
    let (base, _) = train_base(&data, train)?;
    let test: Vec<MultiLabelVolume> = data.by_role(Role::Test).into_iter().cloned().collect();
    let refs: Vec<&MultiLabelVolume> = test.iter().collect();
    let split = data.manifest.split.clone();
    let report = evaluate_with(&base, &refs, &split, DEFAULT_THRESHOLD, 1)?;
    log::info!("base mean Dice {:.4}", report.base_mean);
    Ok(BaseStep {
        base,
        report,
        oneshot: data.oneshot().clone(),
        test,
        split,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Generates the dataset of `generator` and trains one base model on it
/// with `train`. Every configuration then runs its novel step from that
/// base once per seed, and each run is evaluated on the test subjects.
/// Jobs run on up to `threads` workers; results do not depend on the
/// thread count.
pub fn run_ablation(
    generator: &GeneratorParams,
    train: &TrainConfig,
    configs: &[NamedConfig],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationMatrix> {
    if seeds.is_empty() || configs.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one configuration".into()));
    }
    let names: BTreeSet<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    if names.len() != configs.len() {
        return Err(Error::Config("ablation configuration names must be unique".into()));
    }
    train.validate()?;
    for c in configs {
        c.config.validate()?;
    }
    let shared = base_step(generator, train)?;
    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..configs.len()).map(move |c| (s, c)))
        .collect();
    let cells = parallel_map(&jobs, threads, |&(s, c)| {
        let start = Instant::now();
        let named = &configs[c];
        let cfg = TrainConfig {
            seed: seeds[s],
            ..named.config.clone()
        };
        let out = train_novel(&shared.base, &shared.oneshot, &shared.split, &cfg)?;
        let refs: Vec<&MultiLabelVolume> = shared.test.iter().collect();
        let report = evaluate_with(&out.model, &refs, &shared.split, DEFAULT_THRESHOLD, 1)?;
        let forgetting = forgetting_delta(&shared.report, &report)?.mean;
        let epochs = out.report.vc_seconds.len().max(1) as f64;
        log::info!(
            "seed {} {}: all {:.4} base {:.4} novel {:.4} forgetting {:.4}",
            seeds[s],
            named.name,
            report.all_mean,
            report.base_mean,
            report.novel_mean.unwrap_or(f64::NAN),
            forgetting
        );
        Ok(AblationCell {
            config: named.name.clone(),
            seed: seeds[s],
            report,
            forgetting,
            final_epoch: out.report.epochs.last().cloned().expect("at least one epoch"),
            vc_seconds_per_epoch: out.report.vc_seconds.iter().sum::<f64>() / epochs,
            seconds: start.elapsed().as_secs_f64(),
        })
    })?;
    Ok(AblationMatrix {
        configs: configs.iter().map(|c| c.name.clone()).collect(),
        seeds: seeds.to_vec(),
        base_report: shared.report,
        base_seconds: shared.seconds,
        cells,
    })
}

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{align_labels, count_distinct, mean_f1, ALIGNMENT_RULE};
use super::synthetic::{LatentDataset, SyntheticConfig};
use crate::active::{apply_feedback, random_selection, should_query, ActiveConfig, QueryMode};
use crate::dpgmm::{estimate_hyperparams, HyperConfig, ModelState};
use crate::error::{Error, Result};
use crate::gibbs::{gibbs_run, Assignment, GibbsOptions};
use crate::particle::{pf_init, ParticleConfig, ResampleScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Gibbs,
    #[default]
    Pf,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Gibbs => "gibbs",
            Engine::Pf => "pf",
        })
    }
}

/// Which records get a true label in oracle runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Selection {
    /// Entropy rule of the active configuration.
    #[default]
    Entropy,
    /// Each record independently with probability `p`.
    Random { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub engine: Engine,
    pub hyper: HyperConfig,
    pub particles: usize,
    pub enp_threshold: Option<f64>,
    pub scheme: ResampleScheme,
    pub active: ActiveConfig,
    pub selection: Selection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            engine: Engine::Pf,
            hyper: HyperConfig::default(),
            particles: 100,
            enp_threshold: None,
            scheme: ResampleScheme::Systematic,
            active: ActiveConfig::default(),
            selection: Selection::Entropy,
        }
    }
}

/// Where each run's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The same dataset for every run.
    Fixed(LatentDataset),
    /// A fresh draw per run, keyed by the run seed.
    Synthetic(SyntheticConfig),
}

impl DataSource {
    pub fn dataset(&self, seed: u64) -> Result<LatentDataset> {
        match self {
            DataSource::Fixed(d) => Ok(d.clone()),
            DataSource::Synthetic(c) => c.generate(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub predictions: Vec<String>,
    pub mean_f1: f64,
    pub distinct: usize,
    pub queries: usize,
    pub runtime_secs: f64,
}

/// Runs one engine over the stream of `data` with `seed`.
pub fn run_once(data: &LatentDataset, config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    config.active.validate()?;
    if data.test_x.len() != data.test_labels.len() || data.train_x.len() != data.train_labels.len() {
        return Err(Error::invalid("dataset features and labels differ in length"));
    }
    if config.active.mode == QueryMode::Interactive {
        return Err(Error::invalid(
            "batch runs answer queries from the truth; use oracle mode",
        ));
    }
    let start = Instant::now();
    let hyper = estimate_hyperparams(&data.train_x, &data.train_labels, &config.hyper)?;
    let model = ModelState::from_training(hyper, &data.train_x, &data.train_labels)?;
    let mut queries = 0;
    let predictions = match config.engine {
        Engine::Gibbs => {
            let mut model = model;
            let opts = GibbsOptions {
                seed,
                assignment: Assignment::Sample,
            };
            gibbs_run(&mut model, &data.test_x, opts)?.predictions
        }
        Engine::Pf => {
            let pcfg = ParticleConfig {
                num_particles: config.particles,
                enp_threshold: config.enp_threshold,
                seed,
                scheme: config.scheme,
            };
            let mut ens = pf_init(model.hyper.clone(), model.classes().to_vec(), &pcfg)?;
            let mut out = Vec::with_capacity(data.test_x.len());
            for (i, x) in data.test_x.iter().enumerate() {
                let step = ens.step(x)?;
                let ask = match (config.active.mode, config.selection) {
                    (QueryMode::Off, _) => false,
                    (_, Selection::Entropy) => should_query(&step.prediction.probs(), &config.active, queries),
                    (_, Selection::Random { p }) => config.active.budget_left(queries) && random_selection(seed, i, p),
                };
                if ask {
                    queries += 1;
                    apply_feedback(&mut ens, step.index, &data.test_labels[i])?;
                    out.push(data.test_labels[i].clone());
                } else {
                    out.push(step.prediction.label);
                }
            }
            out
        }
    };
    let known = data.known_labels();
    let alignment = align_labels(&predictions, &data.test_labels, &known)?;
    Ok(RunResult {
        seed,
        mean_f1: mean_f1(&predictions, &data.test_labels, &alignment)?,
        distinct: count_distinct(&predictions),
        queries,
        predictions,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub engine: Engine,
    pub runs: usize,
    pub alignment: String,
    pub mean_f1: Summary,
    pub distinct: Summary,
    pub queries: Summary,
    pub runtime_secs: Summary,
    pub per_run: Vec<RunResult>,
}

impl ExperimentReport {
    pub fn f1_values(&self) -> Vec<f64> {
        self.per_run.iter().map(|r| r.mean_f1).collect()
    }

    /// Queried fraction of stream records over all runs.
    pub fn query_ratio(&self) -> f64 {
        let asked: usize = self.per_run.iter().map(|r| r.queries).sum();
        let total: usize = self.per_run.iter().map(|r| r.predictions.len()).sum();
        if total == 0 {
            0.0
        } else {
            asked as f64 / total as f64
        }
    }

    /// Human-readable table, one header line and one row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# alignment: {}", self.alignment);
        let _ = writeln!(
            s,
            "engine\truns\tmean_f1\tf1_std\tdistinct\tdistinct_std\tqueries\truntime_s"
        );
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\t{:.3}",
            self.engine,
            self.runs,
            self.mean_f1.mean,
            self.mean_f1.std,
            self.distinct.mean,
            self.distinct.std,
            self.queries.mean,
            self.runtime_secs.mean
        );
        s
    }
}

/// One seeded run per entry of `seeds`, in parallel; results keep seed order.
pub fn run_experiment(source: &DataSource, config: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one run is required"));
    }
    let per_run = seeds
        .par_iter()
        .map(|&s| run_once(&source.dataset(s)?, config, s))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&RunResult) -> f64| Summary::of(&per_run.iter().map(f).collect::<Vec<_>>());
    Ok(ExperimentReport {
        engine: config.engine,
        runs: seeds.len(),
        alignment: ALIGNMENT_RULE.to_owned(),
        mean_f1: col(&|r| r.mean_f1),
        distinct: col(&|r| r.distinct as f64),
        queries: col(&|r| r.queries as f64),
        runtime_secs: col(&|r| r.runtime_secs),
        per_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    H,
    Alpha,
    M,
    Tau,
    T0,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" => Ok(Self::H),
            "alpha" => Ok(Self::Alpha),
            "m" => Ok(Self::M),
            "tau" => Ok(Self::Tau),
            "t0" => Ok(Self::T0),
            _ => Err(Error::invalid(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::H => "h",
            Self::Alpha => "alpha",
            Self::M => "M",
            Self::Tau => "tau",
            Self::T0 => "T0",
        })
    }
}

/// Sets a configuration parameter in place. `h` applies only to synthetic
/// sources; `T0` needs the raw records and is left to the caller.
pub fn apply_param(
    param: SweepParam,
    value: f64,
    source: &mut DataSource,
    config: &mut ExperimentConfig,
) -> Result<()> {
    match param {
        SweepParam::Alpha => config.hyper.alpha = value,
        SweepParam::M => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::invalid(format!("M must be a positive integer, got {value}")));
            }
            config.particles = value as usize;
        }
        SweepParam::Tau => config.active.tau = value,
        SweepParam::H => match source {
            DataSource::Synthetic(c) if value >= 1.0 && value.fract() == 0.0 => c.dim = value as usize,
            DataSource::Synthetic(_) => {
                return Err(Error::invalid(format!("h must be a positive integer, got {value}")))
            }
            DataSource::Fixed(_) => return Err(Error::invalid("h requires re-embedding the records")),
        },
        SweepParam::T0 => return Err(Error::invalid("T0 requires re-splitting the records")),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParam,
    pub rows: Vec<(f64, ExperimentReport)>,
}

impl SweepTable {
    /// Plot-ready CSV: one row per value.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},engine,runs,mean_f1,f1_std,distinct,distinct_std,queries,query_ratio,runtime_s\n",
            self.parameter
        );
        for (v, r) in &self.rows {
            let _ = writeln!(
                s,
                "{v},{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6},{:.6}",
                r.engine,
                r.runs,
                r.mean_f1.mean,
                r.mean_f1.std,
                r.distinct.mean,
                r.distinct.std,
                r.queries.mean,
                r.query_ratio(),
                r.runtime_secs.mean
            );
        }
        s
    }

    /// Largest minus smallest mean-F1 across rows.
    pub fn f1_spread(&self) -> f64 {
        let means = self.rows.iter().map(|(_, r)| r.mean_f1.mean);
        let hi = means.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// One experiment per value. `setup` turns a value into the source and
/// configuration to run; [`apply_param`] covers the common cases.
pub fn sweep<F>(parameter: SweepParam, values: &[f64], seeds: &[u64], mut setup: F) -> Result<SweepTable>
where
    F: FnMut(f64) -> Result<(DataSource, ExperimentConfig)>,
{
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let rows = values
        .iter()
        .map(|&v| {
            let (src, cfg) = setup(v)?;
            Ok((v, run_experiment(&src, &cfg, seeds)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { parameter, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataSource {
        DataSource::Synthetic(SyntheticConfig {
            n_train: 20,
            n_stream: 15,
            ..Default::default()
        })
    }

    fn cfg(engine: Engine) -> ExperimentConfig {
        ExperimentConfig {
            engine,
            particles: 8,
            ..Default::default()
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let r = run_experiment(&small(), &cfg(Engine::Pf), &[3]).unwrap();
        assert_eq!(r.runs, 1);
        assert_eq!(r.mean_f1.std, 0.0);
        assert!((0.0..=1.0).contains(&r.mean_f1.mean));
    }

    #[test]
    fn repeated_seeds_repeat_results() {
        for engine in [Engine::Gibbs, Engine::Pf] {
            let r = run_experiment(&small(), &cfg(engine), &[9, 9]).unwrap();
            assert_eq!(r.per_run[0].predictions, r.per_run[1].predictions);
            assert_eq!(r.per_run[0].mean_f1, r.per_run[1].mean_f1);
        }
    }

    #[test]
    fn full_supervision_is_perfect() {
        let mut c = cfg(Engine::Pf);
        c.active = ActiveConfig {
            tau: 0.0,
            budget: None,
            mode: QueryMode::Oracle,
        };
        let r = run_experiment(&small(), &c, &[1, 2]).unwrap();
        assert_eq!(r.mean_f1.mean, 1.0);
        assert_eq!(r.query_ratio(), 1.0);
    }

    #[test]
    fn budget_caps_queries() {
        let mut c = cfg(Engine::Pf);
        c.active = ActiveConfig {
            tau: 0.0,
            budget: Some(4),
            mode: QueryMode::Oracle,
        };
        let r = run_once(&small().dataset(0).unwrap(), &c, 0).unwrap();
        assert_eq!(r.queries, 4);
    }

    #[test]
    fn single_value_sweep_matches_experiment() {
        let seeds = [5, 6];
        let table = sweep(SweepParam::Alpha, &[50.0], &seeds, |v| {
            let mut src = small();
            let mut c = cfg(Engine::Pf);
            apply_param(SweepParam::Alpha, v, &mut src, &mut c)?;
            Ok((src, c))
        })
        .unwrap();
        let mut c = cfg(Engine::Pf);
        c.hyper.alpha = 50.0;
        let direct = run_experiment(&small(), &c, &seeds).unwrap();
        assert_eq!(table.rows[0].1.f1_values(), direct.f1_values());
        assert!(table.to_csv().starts_with("alpha,engine"));
        assert_eq!(table.f1_spread(), 0.0);
    }

    #[test]
    fn empty_sweep_is_an_error() {
        assert!(sweep(SweepParam::M, &[], &[1], |_| Ok((small(), cfg(Engine::Pf)))).is_err());
        assert!(run_experiment(&small(), &cfg(Engine::Pf), &[]).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}

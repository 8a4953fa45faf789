//! Pipeline configuration: defaults, an optional TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use namedis::active::{ActiveConfig, QueryMode};
use namedis::dpgmm::{HyperConfig, Sigma0Scale};
use namedis::eval::{Engine, ExperimentConfig, SyntheticConfig};
use namedis::nnmf::{NnlsOptions, NnmfOptions};
use namedis::particle::ResampleScheme;
use namedis::pipeline::PrepareOptions;
use namedis::session::SessionConfig;

use crate::error::{CliError, CliResult};

/// Environment variable naming a configuration file.
pub const CONFIG_ENV: &str = "NAMEDIS_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub artifacts: PathBuf,
    pub t0: u32,
    pub h: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub m_offset: f64,
    pub sigma0_scale: Sigma0Scale,
    pub engine: Engine,
    pub particles: usize,
    pub enp_threshold: Option<f64>,
    pub resampling: ResampleScheme,
    pub tau: f64,
    pub budget: Option<usize>,
    pub mode: QueryMode,
    pub seed: u64,
    pub runs: usize,
    pub snapshot: Option<PathBuf>,
    pub query_timeout_secs: f64,
    pub nnmf_max_iters: usize,
    pub nnmf_tol: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let hyper = HyperConfig::default();
        let nnmf = NnmfOptions::default();
        Self {
            dataset: None,
            artifacts: PathBuf::from("artifacts"),
            t0: 2,
            h: 10,
            alpha: hyper.alpha,
            kappa: hyper.kappa,
            m_offset: hyper.m_offset,
            sigma0_scale: Sigma0Scale::Pooled,
            engine: Engine::Pf,
            particles: 100,
            enp_threshold: None,
            resampling: ResampleScheme::Systematic,
            tau: 1.0,
            budget: None,
            mode: QueryMode::Off,
            seed: 0,
            runs: 1,
            snapshot: None,
            query_timeout_secs: 300.0,
            nnmf_max_iters: nnmf.max_iters,
            nnmf_tol: nnmf.tol,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads `explicit`, else the file named by the environment variable,
    /// else the defaults.
    pub fn load(explicit: Option<&Path>) -> CliResult<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::from_file(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.t0 == 0 {
            return bad("t0 must be at least 1".into());
        }
        if self.h == 0 {
            return bad("h must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !(self.kappa > 0.0) || !(self.m_offset > 0.0) {
            return bad("alpha must be non-negative, kappa and m_offset positive".into());
        }
        if self.particles == 0 {
            return bad("particles must be at least 1".into());
        }
        if let Some(t) = self.enp_threshold {
            if !(t >= 0.0) {
                return bad("enp_threshold must be non-negative".into());
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if !(self.query_timeout_secs > 0.0) {
            return bad("query_timeout_secs must be positive".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> HyperConfig {
        HyperConfig {
            alpha: self.alpha,
            kappa: self.kappa,
            m_offset: self.m_offset,
            sigma0_scale: self.sigma0_scale,
        }
    }

    pub fn active(&self) -> ActiveConfig {
        ActiveConfig {
            tau: self.tau,
            budget: self.budget,
            mode: self.mode,
        }
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            t0: self.t0,
            h: self.h,
            nnmf: NnmfOptions {
                max_iters: self.nnmf_max_iters,
                tol: self.nnmf_tol,
                seed: self.seed,
            },
            nnls: NnlsOptions::default(),
        }
    }

    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            engine: self.engine,
            particles: self.particles,
            enp_threshold: self.enp_threshold,
            scheme: self.resampling,
            seed: self.seed,
            active: self.active(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            engine: self.engine,
            hyper: self.hyper(),
            particles: self.particles,
            enp_threshold: self.enp_threshold,
            scheme: self.resampling,
            active: self.active(),
            selection: Default::default(),
        }
    }

    /// Run seeds `seed, seed + 1, …`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let c: PipelineConfig = toml::from_str("alpha = 10.0\nengine = \"gibbs\"\nmode = \"oracle\"\n").unwrap();
        assert_eq!(c.alpha, 10.0);
        assert_eq!(c.engine, Engine::Gibbs);
        assert_eq!(c.mode, QueryMode::Oracle);
        assert_eq!(c.h, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("alhpa = 1.0").is_err());
    }

    #[test]
    fn out_of_range_values_rejected() {
        let c = PipelineConfig {
            tau: 2.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Run configuration: an optional TOML file, overridden by command-line flags,
//! validated in full before any command touches the filesystem.
//!
//! Relative paths inside a config file resolve against the file's directory;
//! paths given on the command line resolve against the working directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use chanprune_core::cluster::Metric;
use chanprune_core::fitness::{EvaluatorSpec, ToyEvalParams};
use chanprune_core::pipeline::ToyDemoConfig;
use chanprune_core::pso::SwarmConfig;
use chanprune_core::structmodel::{build_template, ArchTemplate};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<String>,
    pub eps: f64,
    pub min_pts: usize,
    pub metric: Metric,
    pub swarm: SwarmConfig,
    pub evaluator: Option<EvaluatorSpec>,
    pub toy: ToyOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let demo = ToyDemoConfig::default();
        Self {
            arch: None,
            eps: demo.eps,
            min_pts: demo.min_pts,
            metric: demo.metric,
            swarm: SwarmConfig::default(),
            evaluator: None,
            toy: ToyOptions::default(),
            paths: Paths::default(),
        }
    }
}

/// Settings used only by `toy`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyOptions {
    pub capture_samples: usize,
    pub base_epochs: usize,
    pub fitness: ToyEvalParams,
}

impl Default for ToyOptions {
    fn default() -> Self {
        let demo = ToyDemoConfig::default();
        Self {
            capture_samples: demo.capture_samples,
            base_epochs: demo.base_epochs,
            fitness: demo.fitness,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// ACPF files read by `cluster`.
    pub dumps: Vec<PathBuf>,
    /// Preliminary structure: written by `cluster`, read by `search`.
    pub structure: Option<PathBuf>,
    /// Searched structure written by `search`.
    pub output: Option<PathBuf>,
    /// Per-cycle history log written by `search` and `toy`.
    pub history: Option<PathBuf>,
    /// Reference structure for `report`; the unpruned network when absent.
    pub baseline: Option<PathBuf>,
}

/// `--evaluator` value.
#[derive(Debug, Clone, PartialEq)]
pub enum EvaluatorChoice {
    Surrogate,
    Toynet,
    External(Vec<String>),
}

impl FromStr for EvaluatorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surrogate" => Ok(Self::Surrogate),
            "toynet" => Ok(Self::Toynet),
            _ => match s.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => {
                    Ok(Self::External(cmd.split_whitespace().map(String::from).collect()))
                }
                _ => Err(format!("expected surrogate, toynet or external:CMD, got `{s}`")),
            },
        }
    }
}

/// Flags that override config values. `--evaluator` is resolved separately in
/// [`RunConfig::evaluator_for`] because its defaults depend on the template.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub arch: Option<String>,
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
    pub metric: Option<Metric>,
    pub cycles: Option<usize>,
    pub pop: Option<usize>,
    pub seed: Option<u64>,
}

/// Default surrogate when `--evaluator surrogate` is given without a surrogate
/// section: optimum at the unpruned widths, softened by a size penalty so the
/// best structure is a genuinely smaller one.
pub fn default_surrogate(t: &ArchTemplate) -> EvaluatorSpec {
    let norm = t.original_counts().iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
    EvaluatorSpec::Surrogate {
        target: None,
        sharpness: (0.5 * norm).max(1.0),
        penalty: 0.5,
    }
}

impl RunConfig {
    /// Reads a config file, resolving its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.paths.dumps.iter_mut().for_each(fix);
        for p in [
            &mut cfg.paths.structure,
            &mut cfg.paths.output,
            &mut cfg.paths.history,
            &mut cfg.paths.baseline,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = &o.arch {
            self.arch = Some(a.clone());
        }
        if let Some(e) = o.eps {
            self.eps = e;
        }
        if let Some(m) = o.min_pts {
            self.min_pts = m;
        }
        if let Some(m) = o.metric {
            self.metric = m;
        }
        if let Some(c) = o.cycles {
            self.swarm.cycles = c;
        }
        if let Some(n) = o.pop {
            self.swarm.n_particles = n;
        }
        if let Some(s) = o.seed {
            self.swarm.seed = s;
        }
    }

    /// The template named by `arch`.
    pub fn template(&self) -> Result<ArchTemplate, CliError> {
        let arch = self
            .arch
            .as_deref()
            .ok_or_else(|| CliError::config("no architecture given (set `arch` or pass --arch)"))?;
        Ok(build_template(arch)?)
    }

    pub fn check_clustering(&self) -> Result<(), CliError> {
        if !self.eps.is_finite() || self.eps < 0.0 {
            return Err(CliError::config(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if self.min_pts < 1 {
            return Err(CliError::config("min_pts must be >= 1"));
        }
        Ok(())
    }

    /// Evaluator after applying `--evaluator`: a matching config section keeps its
    /// parameters; otherwise defaults are used.
    pub fn evaluator_for(&self, choice: Option<&EvaluatorChoice>, t: &ArchTemplate) -> Result<EvaluatorSpec, CliError> {
        let spec = match (choice, &self.evaluator) {
            (None, Some(spec)) => spec.clone(),
            (None, None) => {
                return Err(CliError::config(
                    "no evaluator configured (set [evaluator] or pass --evaluator)",
                ))
            }
            (Some(EvaluatorChoice::Surrogate), Some(s @ EvaluatorSpec::Surrogate { .. })) => s.clone(),
            (Some(EvaluatorChoice::Surrogate), _) => default_surrogate(t),
            (Some(EvaluatorChoice::Toynet), Some(s @ EvaluatorSpec::Toynet(_))) => s.clone(),
            (Some(EvaluatorChoice::Toynet), _) => EvaluatorSpec::Toynet(self.toy.fitness.clone()),
            (
                Some(EvaluatorChoice::External(cmd)),
                Some(EvaluatorSpec::External {
                    timeout_ms,
                    max_parallelism,
                    epochs,
                    ..
                }),
            ) => EvaluatorSpec::External {
                command: cmd.clone(),
                timeout_ms: *timeout_ms,
                max_parallelism: *max_parallelism,
                epochs: *epochs,
            },
            (Some(EvaluatorChoice::External(cmd)), _) => EvaluatorSpec::External {
                command: cmd.clone(),
                timeout_ms: 600_000,
                max_parallelism: 1,
                epochs: 3,
            },
        };
        spec.validate()?;
        if let EvaluatorSpec::Surrogate {
            target: Some(target), ..
        } = &spec
        {
            t.validate(&chanprune_core::StructureVector::new(&t.arch_id, target.clone()))
                .map_err(|e| CliError::config(format!("surrogate target: {e}")))?;
        }
        Ok(spec)
    }

    /// The toy demo settings this config describes.
    pub fn toy_demo(&self) -> ToyDemoConfig {
        ToyDemoConfig {
            arch: self.arch.clone().unwrap_or_else(|| ToyDemoConfig::default().arch),
            seed: self.swarm.seed,
            eps: self.eps,
            min_pts: self.min_pts,
            metric: self.metric,
            capture_samples: self.toy.capture_samples,
            base_epochs: self.toy.base_epochs,
            fitness: self.toy.fitness.clone(),
            swarm: self.swarm.clone(),
        }
    }
}

/// Rejects output paths that could not be created: empty, a directory, or in a
/// missing directory.
pub fn check_output_path(p: &Path, what: &str) -> Result<(), CliError> {
    if p.as_os_str().is_empty() {
        return Err(CliError::config(format!("{what} path is empty")));
    }
    if p.is_dir() {
        return Err(CliError::config(format!("{what} path {} is a directory", p.display())));
    }
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::config(format!(
            "directory of {what} path {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

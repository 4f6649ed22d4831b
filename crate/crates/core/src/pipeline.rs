//! End-to-end desk-scale run on a toy network: train a baseline, capture its
//! feature maps, cluster them into a preliminary structure, refine it with the
//! swarm, then retrain both the clustered and the searched structures with the
//! FLOP-scaled epoch budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_layers, ClusterError, LayerClustering, Metric};
use crate::featio::FeatureDump;
use crate::fitness::{retrain_budget, structure_seed, FitnessError, ToyEvalParams, ToyEvaluator};
use crate::pso::{run_search_observed, HistoryRecord, PsoError, SwarmConfig};
use crate::structmodel::{
    apply_structure, build_template, compression_report, ArchTemplate, CompressionReport, StructError, StructureVector,
};
use crate::toynet::{SynthDataset, ToyError, ToyNet, TrainParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Structure(#[from] StructError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Search(#[from] PsoError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("invalid demo configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDemoConfig {
    /// A `toynet-*` template id.
    pub arch: String,
    pub seed: u64,
    pub eps: f64,
    pub min_pts: usize,
    pub metric: Metric,
    /// Training images pushed through the baseline to capture feature maps.
    pub capture_samples: usize,
    /// Epochs for the baseline, and the base of the retrain budget.
    pub base_epochs: usize,
    /// Short-training fitness used during the search.
    pub fitness: ToyEvalParams,
    pub swarm: SwarmConfig,
}

impl Default for ToyDemoConfig {
    fn default() -> Self {
        Self {
            arch: "toynet-3".into(),
            seed: 0,
            eps: 0.1,
            min_pts: 5,
            metric: Metric::Cosine,
            capture_samples: 64,
            base_epochs: 10,
            fitness: ToyEvalParams::default(),
            swarm: SwarmConfig::default(),
        }
    }
}

impl ToyDemoConfig {
    pub fn validate(&self) -> Result<ArchTemplate, PipelineError> {
        if !self.arch.starts_with("toynet-") {
            return Err(PipelineError::InvalidConfig(format!(
                "`{}` is not a toy template",
                self.arch
            )));
        }
        let t = build_template(&self.arch)?;
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(PipelineError::InvalidConfig(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if self.min_pts < 1 || self.capture_samples < 1 || self.base_epochs < 1 {
            return Err(PipelineError::InvalidConfig(
                "min_pts, capture_samples and base_epochs must be >= 1".into(),
            ));
        }
        if self.capture_samples > self.fitness.train_samples {
            return Err(PipelineError::InvalidConfig(format!(
                "capture_samples ({}) exceeds the training set ({})",
                self.capture_samples, self.fitness.train_samples
            )));
        }
        crate::fitness::EvaluatorSpec::Toynet(self.fitness.clone()).validate()?;
        self.swarm.validate(&t)?;
        Ok(t)
    }
}

/// A structure after its final training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrained {
    pub structure: StructureVector,
    pub epochs: usize,
    pub fitness: f64,
    pub report: CompressionReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDemoOutcome {
    pub baseline: Retrained,
    /// Feature maps captured from the trained baseline.
    pub dumps: Vec<FeatureDump>,
    pub layers: Vec<LayerClustering>,
    /// Preliminary structure from clustering alone, retrained.
    pub clustered: Retrained,
    /// Swarm winner, retrained.
    pub searched: Retrained,
    pub search_fitness: f64,
    pub history: Vec<HistoryRecord>,
}

fn train_and_score(
    t: &ArchTemplate,
    s: &StructureVector,
    epochs: usize,
    cfg: &ToyDemoConfig,
    train: &SynthDataset,
    test: &SynthDataset,
) -> Result<(ToyNet, f64), PipelineError> {
    let seed = structure_seed(s, cfg.seed);
    let mut net = ToyNet::new(&apply_structure(t, s)?, seed)?;
    net.train(
        train,
        &TrainParams {
            epochs,
            lr: cfg.fitness.lr,
            batch_size: cfg.fitness.batch_size,
            seed,
        },
    )?;
    let acc = net.accuracy(test)?;
    Ok((net, acc))
}

/// Retrains `s` for the baseline epochs scaled by its FLOP reduction.
fn retrain(
    t: &ArchTemplate,
    s: &StructureVector,
    cfg: &ToyDemoConfig,
    train: &SynthDataset,
    test: &SynthDataset,
) -> Result<Retrained, PipelineError> {
    let report = compression_report(t, &t.baseline(), s)?;
    let epochs = retrain_budget(report.baseline.flops, report.pruned.flops, cfg.base_epochs)?;
    let (_, fitness) = train_and_score(t, s, epochs, cfg, train, test)?;
    Ok(Retrained {
        structure: s.clone(),
        epochs,
        fitness,
        report,
    })
}

/// Captured post-activation maps of the trained baseline on the first training images.
pub fn capture_dumps(net: &ToyNet, train: &SynthDataset, samples: usize) -> Result<Vec<FeatureDump>, PipelineError> {
    let (_, dumps) = net.forward_capture(&train.inputs[..samples.min(train.len())])?;
    Ok(dumps)
}

pub fn run_toy_demo(cfg: &ToyDemoConfig) -> Result<ToyDemoOutcome, PipelineError> {
    run_toy_demo_observed(cfg, |_| {})
}

/// Runs the demo; `observe` receives every search history record as it is produced.
pub fn run_toy_demo_observed(
    cfg: &ToyDemoConfig,
    observe: impl FnMut(&HistoryRecord),
) -> Result<ToyDemoOutcome, PipelineError> {
    let t = cfg.validate()?;
    let (train, test) = cfg.fitness.datasets(t.num_classes)?;

    let base = t.baseline();
    let (base_net, base_fitness) = train_and_score(&t, &base, cfg.base_epochs, cfg, &train, &test)?;
    let baseline = Retrained {
        report: compression_report(&t, &base, &base)?,
        structure: base,
        epochs: cfg.base_epochs,
        fitness: base_fitness,
    };

    let dumps = capture_dumps(&base_net, &train, cfg.capture_samples)?;
    let layers = cluster_layers(&dumps, &t, cfg.eps, cfg.min_pts, cfg.metric)?;
    let c_prime = StructureVector::new(&t.arch_id, layers.iter().map(LayerClustering::kept).collect());

    let mut evaluator = ToyEvaluator::new(t.clone(), cfg.fitness.clone())?;
    let swarm = SwarmConfig {
        seed: cfg.seed,
        ..cfg.swarm.clone()
    };
    let search = run_search_observed(&c_prime, &t, &swarm, &mut evaluator, observe)?;

    let clustered = retrain(&t, &c_prime, cfg, &train, &test)?;
    let searched = retrain(&t, &search.gbest, cfg, &train, &test)?;
    Ok(ToyDemoOutcome {
        baseline,
        dumps,
        layers,
        clustered,
        searched,
        search_fitness: search.gbest_fitness,
        history: search.history,
    })
}

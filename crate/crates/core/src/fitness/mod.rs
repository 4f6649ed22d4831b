//! Fitness evaluation: the evaluator contract, a deterministic surrogate landscape,
//! the toy-network evaluator, the external worker protocol and the retrain budget.

mod protocol;
mod surrogate;

pub use protocol::{
    external_evaluate, EvalOutcome, EvalRequest, EvalResponse, ExternalSpec, ProtocolClient, PROTOCOL_VERSION,
};
pub use surrogate::{surrogate_fitness, SurrogateEvaluator};

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pso::canonical_key;
use crate::structmodel::{apply_structure, ArchTemplate, StructError, StructureVector};
use crate::toynet::{synth_dataset_with, SynthDataset, SynthParams, ToyError, ToyNet, TrainParams};

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("evaluator timed out after {timeout:?} waiting for {what}")]
    EvalTimeout { what: String, timeout: Duration },
    #[error("evaluator protocol violation: {0}")]
    ProtocolError(String),
    #[error("evaluator process exited: {0}")]
    EvaluatorCrashed(String),
    #[error("evaluator reported an error: {0}")]
    Rejected(String),
    #[error("could not start evaluator: {0}")]
    Spawn(std::io::Error),
    #[error("pruned network has zero FLOPs")]
    DegenerateStructure,
    #[error("invalid evaluator configuration: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Structure(#[from] StructError),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

/// A failure inside a batch, with the position of the offending job.
#[derive(Debug, Error)]
#[error("evaluation {index} failed: {source}")]
pub struct BatchFailure {
    pub index: usize,
    #[source]
    pub source: FitnessError,
}

/// Something that scores structures with a value in `[0, 1]`.
pub trait Evaluator {
    fn evaluate(&mut self, s: &StructureVector, seed: u64) -> Result<f64, FitnessError>;

    /// Scores several structures. Implementations may run the jobs concurrently.
    fn evaluate_batch(&mut self, jobs: &[(StructureVector, u64)]) -> Result<Vec<f64>, BatchFailure> {
        jobs.iter()
            .enumerate()
            .map(|(index, (s, seed))| self.evaluate(s, *seed).map_err(|source| BatchFailure { index, source }))
            .collect()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&mut self, s: &StructureVector, seed: u64) -> Result<f64, FitnessError> {
        (**self).evaluate(s, seed)
    }

    fn evaluate_batch(&mut self, jobs: &[(StructureVector, u64)]) -> Result<Vec<f64>, BatchFailure> {
        (**self).evaluate_batch(jobs)
    }
}

/// Settings of the toy-network evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEvalParams {
    pub dataset_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub noise: f64,
    pub margin: f64,
}

impl Default for ToyEvalParams {
    fn default() -> Self {
        let synth = SynthParams::default();
        Self {
            dataset_seed: 0,
            train_samples: 256,
            test_samples: 1000,
            epochs: 3,
            lr: 0.05,
            batch_size: 16,
            noise: synth.noise,
            margin: synth.margin,
        }
    }
}

impl ToyEvalParams {
    pub fn synth(&self) -> SynthParams {
        SynthParams {
            noise: self.noise,
            margin: self.margin,
            ..SynthParams::default()
        }
    }

    /// Train and test sets; the test set uses a derived seed so the two never coincide.
    pub fn datasets(&self, classes: usize) -> Result<(SynthDataset, SynthDataset), ToyError> {
        let train = synth_dataset_with(self.dataset_seed, self.train_samples, classes, &self.synth())?;
        let test = synth_dataset_with(
            self.dataset_seed ^ 0x7e57_7e57_7e57_7e57,
            self.test_samples,
            classes,
            &self.synth(),
        )?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Surrogate {
        /// Planted optimum; defaults to the template baseline.
        #[serde(default)]
        target: Option<Vec<usize>>,
        sharpness: f64,
        #[serde(default)]
        penalty: f64,
    },
    Toynet(ToyEvalParams),
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_parallelism")]
        max_parallelism: usize,
        #[serde(default = "default_epochs")]
        epochs: usize,
    },
}

fn default_timeout_ms() -> u64 {
    600_000
}

fn default_parallelism() -> usize {
    1
}

fn default_epochs() -> usize {
    3
}

impl EvaluatorSpec {
    pub fn validate(&self) -> Result<(), FitnessError> {
        let bad = |m: &str| Err(FitnessError::InvalidSpec(m.to_string()));
        match self {
            EvaluatorSpec::Surrogate { sharpness, penalty, .. } => {
                if !(*sharpness > 0.0) || !sharpness.is_finite() {
                    return bad("surrogate sharpness must be > 0");
                }
                if !(0.0..1.0).contains(penalty) {
                    return bad("surrogate penalty must lie in [0, 1)");
                }
            }
            EvaluatorSpec::Toynet(p) => {
                if p.epochs < 1 {
                    return bad("toynet epochs must be >= 1");
                }
                if p.batch_size < 1 || !(p.lr > 0.0) || !(p.noise > 0.0) || !(p.margin > 0.0) {
                    return bad("toynet batch size, lr, noise and margin must be positive");
                }
                if p.train_samples < 2 || p.test_samples < 2 {
                    return bad("toynet datasets need at least 2 samples");
                }
            }
            EvaluatorSpec::External {
                command,
                timeout_ms,
                max_parallelism,
                epochs,
            } => {
                if command.is_empty() {
                    return bad("external command is empty");
                }
                if *timeout_ms == 0 {
                    return bad("external timeout must be > 0");
                }
                if *max_parallelism == 0 {
                    return bad("external max_parallelism must be >= 1");
                }
                if *epochs < 1 {
                    return bad("external epochs must be >= 1");
                }
            }
        }
        Ok(())
    }
}

/// Instantiates the evaluator described by `spec` for template `t`.
pub fn build_evaluator(spec: &EvaluatorSpec, t: &ArchTemplate) -> Result<Box<dyn Evaluator + Send>, FitnessError> {
    spec.validate()?;
    Ok(match spec {
        EvaluatorSpec::Surrogate {
            target,
            sharpness,
            penalty,
        } => {
            let target = StructureVector::new(&t.arch_id, target.clone().unwrap_or_else(|| t.original_counts()));
            Box::new(SurrogateEvaluator::new(t.clone(), target, *sharpness, *penalty)?)
        }
        EvaluatorSpec::Toynet(p) => Box::new(ToyEvaluator::new(t.clone(), p.clone())?),
        EvaluatorSpec::External {
            command,
            timeout_ms,
            max_parallelism,
            epochs,
        } => Box::new(ExternalEvaluator::new(
            ExternalSpec {
                command: command.clone(),
                timeout: Duration::from_millis(*timeout_ms),
                max_parallelism: *max_parallelism,
            },
            *epochs,
        )),
    })
}

/// One-shot evaluation of a single structure.
pub fn evaluate(s: &StructureVector, spec: &EvaluatorSpec, t: &ArchTemplate, seed: u64) -> Result<f64, FitnessError> {
    t.validate(s)?;
    build_evaluator(spec, t)?.evaluate(s, seed)
}

/// Evaluation seed of a structure within a run: a hash of its canonical key xor the run seed.
pub fn structure_seed(s: &StructureVector, run_seed: u64) -> u64 {
    let digest = Sha256::digest(canonical_key(s));
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")) ^ run_seed
}

/// Post-search training epochs: `ceil(base_epochs * baseline_flops / pruned_flops)`.
pub fn retrain_budget(baseline_flops: u64, pruned_flops: u64, base_epochs: usize) -> Result<usize, FitnessError> {
    if pruned_flops == 0 {
        return Err(FitnessError::DegenerateStructure);
    }
    let num = base_epochs as u128 * baseline_flops as u128;
    Ok(num.div_ceil(pruned_flops as u128) as usize)
}

/// Trains each candidate from scratch on the synthetic task and reports test accuracy.
pub struct ToyEvaluator {
    template: ArchTemplate,
    params: ToyEvalParams,
    train: SynthDataset,
    test: SynthDataset,
}

impl ToyEvaluator {
    pub fn new(template: ArchTemplate, params: ToyEvalParams) -> Result<Self, FitnessError> {
        let (train, test) = params.datasets(template.num_classes)?;
        Ok(Self {
            template,
            params,
            train,
            test,
        })
    }

    fn score(&self, s: &StructureVector, seed: u64) -> Result<f64, FitnessError> {
        let net = apply_structure(&self.template, s)?;
        let mut toy = ToyNet::new(&net, seed)?;
        toy.train(
            &self.train,
            &TrainParams {
                epochs: self.params.epochs,
                lr: self.params.lr,
                batch_size: self.params.batch_size,
                seed,
            },
        )?;
        Ok(toy.accuracy(&self.test)?)
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&mut self, s: &StructureVector, seed: u64) -> Result<f64, FitnessError> {
        self.score(s, seed)
    }

    fn evaluate_batch(&mut self, jobs: &[(StructureVector, u64)]) -> Result<Vec<f64>, BatchFailure> {
        let this = &*self;
        jobs.par_iter()
            .enumerate()
            .map(|(index, (s, seed))| this.score(s, *seed).map_err(|source| BatchFailure { index, source }))
            .collect()
    }
}

/// Delegates scoring to worker processes speaking the line protocol.
pub struct ExternalEvaluator {
    client: ProtocolClient,
    epochs: usize,
    next_id: u64,
}

impl ExternalEvaluator {
    pub fn new(spec: ExternalSpec, epochs: usize) -> Self {
        Self {
            client: ProtocolClient::new(spec),
            epochs,
            next_id: 0,
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&mut self, s: &StructureVector, seed: u64) -> Result<f64, FitnessError> {
        self.evaluate_batch(&[(s.clone(), seed)])
            .map(|v| v[0])
            .map_err(|f| f.source)
    }

    fn evaluate_batch(&mut self, jobs: &[(StructureVector, u64)]) -> Result<Vec<f64>, BatchFailure> {
        let first = self.next_id;
        self.next_id += jobs.len() as u64;
        let requests: Vec<EvalRequest> = jobs
            .iter()
            .enumerate()
            .map(|(i, (s, seed))| EvalRequest {
                id: first + i as u64,
                arch: s.arch_id.clone(),
                channels: s.channels.clone(),
                epochs: self.epochs,
                seed: *seed,
            })
            .collect();
        let responses = self.client.run(&requests).map_err(|(id, source)| BatchFailure {
            index: id.map_or(0, |id| (id - first) as usize),
            source,
        })?;
        responses
            .into_iter()
            .enumerate()
            .map(|(index, r)| match r.outcome {
                EvalOutcome::Fitness(f) => Ok(f),
                EvalOutcome::Error(msg) => Err(BatchFailure {
                    index,
                    source: FitnessError::Rejected(msg),
                }),
            })
            .collect()
    }
}

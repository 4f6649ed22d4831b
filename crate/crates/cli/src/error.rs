//! Command failures and their exit codes.
//!
//! | code | meaning |
//! |-----:|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | command-line usage error |
//! | 3 | invalid configuration |
//! | 4 | file I/O failure |
//! | 5 | malformed feature dump |
//! | 6 | feature dump missing for a layer (or no dump file at all) |
//! | 7 | dump channel count disagrees with the template |
//! | 8 | dead channel (zero mean map) under cosine distance |
//! | 9 | structure invalid for the architecture |
//! | 10 | evaluator timed out |
//! | 11 | evaluator protocol violation |
//! | 12 | evaluator process failed to start or exited |
//! | 13 | evaluator reported an error |
//! | 14 | training failed (divergence, degenerate network) |

use std::fmt;

use chanprune_core::cluster::ClusterError;
use chanprune_core::featio::FeatioError;
use chanprune_core::fitness::FitnessError;
use chanprune_core::pipeline::PipelineError;
use chanprune_core::pso::PsoError;
use chanprune_core::structmodel::StructError;
use chanprune_core::toynet::ToyError;

pub mod code {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const DUMP_FORMAT: u8 = 5;
    pub const MISSING_LAYER: u8 = 6;
    pub const SHAPE_MISMATCH: u8 = 7;
    pub const ZERO_NORM: u8 = 8;
    pub const STRUCTURE: u8 = 9;
    pub const EVAL_TIMEOUT: u8 = 10;
    pub const PROTOCOL: u8 = 11;
    pub const EVALUATOR_CRASHED: u8 = 12;
    pub const EVALUATOR_REJECTED: u8 = 13;
    pub const TRAINING: u8 = 14;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(code::CONFIG, message)
    }

    pub fn io(what: impl fmt::Display, e: std::io::Error) -> Self {
        Self::new(code::IO, format!("{what}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn struct_code(e: &StructError) -> u8 {
    match e {
        StructError::UnknownArchitecture(_) => code::CONFIG,
        StructError::InvalidTemplate { .. } => code::INTERNAL,
        StructError::Io(_) => code::IO,
        StructError::StructureMismatch(_) | StructError::ChannelOutOfRange { .. } | StructError::Parse(_) => {
            code::STRUCTURE
        }
    }
}

fn toy_code(e: &ToyError) -> u8 {
    match e {
        ToyError::InvalidParams(_) => code::CONFIG,
        _ => code::TRAINING,
    }
}

fn fitness_code(e: &FitnessError) -> u8 {
    match e {
        FitnessError::EvalTimeout { .. } => code::EVAL_TIMEOUT,
        FitnessError::ProtocolError(_) => code::PROTOCOL,
        FitnessError::EvaluatorCrashed(_) | FitnessError::Spawn(_) => code::EVALUATOR_CRASHED,
        FitnessError::Rejected(_) => code::EVALUATOR_REJECTED,
        FitnessError::DegenerateStructure => code::TRAINING,
        FitnessError::InvalidSpec(_) => code::CONFIG,
        FitnessError::Structure(s) => struct_code(s),
        FitnessError::Toy(t) => toy_code(t),
    }
}

fn cluster_code(e: &ClusterError) -> u8 {
    match e {
        ClusterError::ZeroNormChannel { .. } => code::ZERO_NORM,
        ClusterError::RaggedMaps(_) => code::DUMP_FORMAT,
        ClusterError::MissingLayer(_) => code::MISSING_LAYER,
        ClusterError::ShapeMismatch { .. } => code::SHAPE_MISMATCH,
        ClusterError::InvalidParams(_) => code::CONFIG,
    }
}

macro_rules! from_error {
    ($ty:ty, $code:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                #[allow(clippy::redundant_closure_call)]
                let code = ($code)(&e);
                CliError::new(code, e.to_string())
            }
        }
    };
}

from_error!(StructError, struct_code);
from_error!(FitnessError, fitness_code);
from_error!(ClusterError, cluster_code);
from_error!(ToyError, toy_code);
from_error!(FeatioError, |e: &FeatioError| match e {
    FeatioError::Io(_) => code::IO,
    _ => code::DUMP_FORMAT,
});
from_error!(PsoError, |e: &PsoError| match e {
    PsoError::Evaluator { source, .. } => fitness_code(source),
    PsoError::InvalidConfig(_) => code::CONFIG,
    PsoError::Structure(s) => struct_code(s),
});
from_error!(PipelineError, |e: &PipelineError| match e {
    PipelineError::Structure(s) => struct_code(s),
    PipelineError::Cluster(c) => cluster_code(c),
    PipelineError::Search(PsoError::Evaluator { source, .. }) => fitness_code(source),
    PipelineError::Search(PsoError::InvalidConfig(_)) => code::CONFIG,
    PipelineError::Search(PsoError::Structure(s)) => struct_code(s),
    PipelineError::Fitness(f) => fitness_code(f),
    PipelineError::Toy(t) => toy_code(t),
    PipelineError::InvalidConfig(_) => code::CONFIG,
});

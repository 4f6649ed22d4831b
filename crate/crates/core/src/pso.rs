//! Particle-swarm refinement of a channel-count vector.
//!
//! Particles live on the integer lattice `[1, original]^G` of free prune groups.
//! Each cycle is a barrier: every particle moves, the whole swarm is scored as one
//! batch (possibly concurrently), then personal and global bests are updated in
//! particle order with strict-improvement replacement.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{structure_seed, BatchFailure, Evaluator, FitnessError};
use crate::structmodel::{ArchTemplate, StructError, StructureVector};

#[derive(Debug, Error)]
pub enum PsoError {
    #[error("evaluation of particle {particle} failed in cycle {cycle}: {source}")]
    Evaluator {
        particle: usize,
        cycle: usize,
        #[source]
        source: FitnessError,
        /// Records of the cycles completed before the failure.
        history: Vec<HistoryRecord>,
    },
    #[error("invalid swarm configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Structure(#[from] StructError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmConfig {
    pub n_particles: usize,
    pub cycles: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub w_max: f64,
    pub w_min: f64,
    /// Per-group velocity bound; `None` selects [`default_v_max`].
    pub v_max: Option<Vec<f64>>,
    /// Channel learning rate applied to the velocity in the position step.
    pub r: f64,
    pub seed: u64,
    /// Score each distinct structure once and reuse the result.
    pub cache: bool,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            n_particles: 6,
            cycles: 5,
            alpha1: 2.0,
            alpha2: 2.0,
            w_max: 0.9,
            w_min: 0.4,
            v_max: None,
            r: 2.0,
            seed: 0,
            cache: true,
        }
    }
}

/// `max(1, 0.1 * original)` for every free group.
pub fn default_v_max(t: &ArchTemplate) -> Vec<f64> {
    t.original_counts().iter().map(|&c| (0.1 * c as f64).max(1.0)).collect()
}

impl SwarmConfig {
    pub fn validate(&self, t: &ArchTemplate) -> Result<(), PsoError> {
        let bad = |m: String| Err(PsoError::InvalidConfig(m));
        if self.n_particles < 1 {
            return bad("n_particles must be >= 1".into());
        }
        let finite = [self.alpha1, self.alpha2, self.w_max, self.w_min, self.r];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("alpha1, alpha2, w_max, w_min and r must be finite".into());
        }
        if self.w_max < self.w_min {
            return bad(format!("w_max ({}) must be >= w_min ({})", self.w_max, self.w_min));
        }
        if let Some(v) = &self.v_max {
            if v.len() != t.num_free() {
                return bad(format!(
                    "v_max has {} entries, template {} has {} free groups",
                    v.len(),
                    t.arch_id,
                    t.num_free()
                ));
            }
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad("v_max entries must be finite and > 0".into());
            }
        }
        Ok(())
    }

    /// The velocity bound in effect for `t`.
    pub fn resolved_v_max(&self, t: &ArchTemplate) -> Vec<f64> {
        self.v_max.clone().unwrap_or_else(|| default_v_max(t))
    }
}

/// Source of the random numbers consumed by the update rules.
///
/// The swarm is driven through this trait so tests can script exact draws.
pub trait Draws {
    /// Uniform over `{-1, 0, 1}`.
    fn delta(&mut self) -> i64;
    /// Uniform over `[0, 1)`.
    fn unit(&mut self) -> f64;
    /// Uniform over `[-bound, bound]`.
    fn symmetric(&mut self, bound: f64) -> f64;
}

/// [`Draws`] backed by any [`Rng`].
#[derive(Debug, Clone)]
pub struct RandDraws<R>(pub R);

impl RandDraws<ChaCha8Rng> {
    pub fn seeded(seed: u64) -> Self {
        RandDraws(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl<R: Rng> Draws for RandDraws<R> {
    fn delta(&mut self) -> i64 {
        self.0.random_range(-1..=1)
    }

    fn unit(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    fn symmetric(&mut self, bound: f64) -> f64 {
        if bound > 0.0 {
            self.0.random_range(-bound..=bound)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: StructureVector,
    pub velocity: Vec<f64>,
    pub pbest: StructureVector,
    pub pbest_fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub gbest: StructureVector,
    pub gbest_fitness: f64,
    pub cycle: usize,
    pub fitness_cache: HashMap<Vec<u8>, f64>,
    /// Number of evaluator calls made so far.
    pub evaluations: usize,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub cycle: usize,
    pub gbest_fitness: f64,
    pub gbest_channels: Vec<usize>,
}

impl HistoryRecord {
    fn of(state: &SwarmState) -> Self {
        Self {
            cycle: state.cycle,
            gbest_fitness: state.gbest_fitness,
            gbest_channels: state.gbest.channels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub gbest: StructureVector,
    pub gbest_fitness: f64,
    /// Cycle 0 is the initial population, then one record per cycle.
    pub history: Vec<HistoryRecord>,
    pub evaluations: usize,
}

/// Injective byte encoding of a structure: length-prefixed arch id, then the
/// channel count and every channel as little-endian `u32`.
pub fn canonical_key(s: &StructureVector) -> Vec<u8> {
    let mut key = Vec::with_capacity(8 + s.arch_id.len() + 4 * s.channels.len());
    key.extend_from_slice(&(s.arch_id.len() as u32).to_le_bytes());
    key.extend_from_slice(s.arch_id.as_bytes());
    key.extend_from_slice(&(s.channels.len() as u32).to_le_bytes());
    for &c in &s.channels {
        key.extend_from_slice(&(c as u32).to_le_bytes());
    }
    key
}

/// Linear inertia decay from `w_max` at cycle 0 to `w_min` at the last cycle.
pub fn inertia(t_cycle: usize, cfg: &SwarmConfig) -> f64 {
    if cfg.cycles == 0 {
        return cfg.w_min;
    }
    let t_total = cfg.cycles as f64;
    let t = t_cycle.min(cfg.cycles) as f64;
    (cfg.w_max - cfg.w_min) * (t_total - t) / t_total + cfg.w_min
}

fn clamp_channel(x: f64, original: usize) -> usize {
    x.clamp(1.0, original as f64) as usize
}

/// Starting positions: particle `n` (1-based) sits at `c' + n * delta`, clamped.
pub fn init_positions(
    c_prime: &StructureVector,
    t: &ArchTemplate,
    n_particles: usize,
    draws: &mut impl Draws,
) -> Vec<StructureVector> {
    let originals = t.original_counts();
    (1..=n_particles)
        .map(|n| {
            let channels = c_prime
                .channels
                .iter()
                .zip(&originals)
                .map(|(&c, &orig)| {
                    let moved = c as i64 + n as i64 * draws.delta();
                    clamp_channel(moved as f64, orig)
                })
                .collect();
            StructureVector::new(&c_prime.arch_id, channels)
        })
        .collect()
}

/// New velocity of `p`, clamped to `[-v_max, v_max]` per group.
pub fn update_velocity(
    p: &Particle,
    gbest: &StructureVector,
    w: f64,
    cfg: &SwarmConfig,
    v_max: &[f64],
    draws: &mut impl Draws,
) -> Vec<f64> {
    (0..p.velocity.len())
        .map(|g| {
            let pos = p.position.channels[g] as f64;
            let r1 = draws.unit();
            let r2 = draws.unit();
            let v = w * p.velocity[g]
                + cfg.alpha1 * r1 * (p.pbest.channels[g] as f64 - pos)
                + cfg.alpha2 * r2 * (gbest.channels[g] as f64 - pos);
            v.clamp(-v_max[g], v_max[g])
        })
        .collect()
}

/// New position of `p`: `round(pos + r * v)`, rounded half away from zero and clamped.
pub fn update_position(p: &Particle, t: &ArchTemplate, cfg: &SwarmConfig) -> StructureVector {
    let channels = p
        .position
        .channels
        .iter()
        .zip(&p.velocity)
        .zip(t.free_groups())
        .map(|((&pos, &v), g)| clamp_channel((pos as f64 + cfg.r * v).round(), g.original_count))
        .collect();
    StructureVector::new(&p.position.arch_id, channels)
}

fn eval_seed(s: &StructureVector, cfg: &SwarmConfig, cycle: usize, particle: usize) -> u64 {
    if cfg.cache {
        structure_seed(s, cfg.seed)
    } else {
        // a fresh draw per visit when fitness is allowed to be stochastic
        let visit = ((cycle as u64) << 32 | particle as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        structure_seed(s, cfg.seed ^ visit)
    }
}

/// Scores one position per particle, consulting and filling the cache.
fn score_positions<E: Evaluator + ?Sized>(
    state_cache: &mut HashMap<Vec<u8>, f64>,
    evaluations: &mut usize,
    positions: &[StructureVector],
    cfg: &SwarmConfig,
    cycle: usize,
    evaluator: &mut E,
) -> Result<Vec<f64>, (usize, FitnessError)> {
    let mut scores = vec![f64::NAN; positions.len()];
    let mut jobs: Vec<(StructureVector, u64)> = Vec::new();
    // particle index of every job, and the job each particle waits on
    let mut job_owner: Vec<usize> = Vec::new();
    let mut waiting: Vec<(usize, usize)> = Vec::new();
    let mut queued: HashMap<Vec<u8>, usize> = HashMap::new();

    for (i, s) in positions.iter().enumerate() {
        let key = canonical_key(s);
        if cfg.cache {
            if let Some(&f) = state_cache.get(&key) {
                scores[i] = f;
                continue;
            }
            if let Some(&j) = queued.get(&key) {
                waiting.push((i, j));
                continue;
            }
            queued.insert(key, jobs.len());
        }
        waiting.push((i, jobs.len()));
        job_owner.push(i);
        jobs.push((s.clone(), eval_seed(s, cfg, cycle, i)));
    }

    let results = if jobs.is_empty() {
        Vec::new()
    } else {
        evaluator
            .evaluate_batch(&jobs)
            .map_err(|BatchFailure { index, source }| (job_owner.get(index).copied().unwrap_or(0), source))?
    };
    *evaluations += jobs.len();
    for (j, &f) in results.iter().enumerate() {
        if !f.is_finite() {
            return Err((
                job_owner[j],
                FitnessError::ProtocolError(format!("evaluator returned non-finite fitness {f}")),
            ));
        }
        if cfg.cache {
            state_cache.insert(canonical_key(&jobs[j].0), f);
        }
    }
    for (i, j) in waiting {
        scores[i] = results[j];
    }
    Ok(scores)
}

fn evaluator_error(cycle: usize, history: &[HistoryRecord]) -> impl FnOnce((usize, FitnessError)) -> PsoError + '_ {
    move |(particle, source)| PsoError::Evaluator {
        particle,
        cycle,
        source,
        history: history.to_vec(),
    }
}

fn check_inputs(c_prime: &StructureVector, t: &ArchTemplate, cfg: &SwarmConfig) -> Result<(), PsoError> {
    cfg.validate(t)?;
    t.validate(c_prime)?;
    Ok(())
}

/// Builds and scores the initial swarm using explicit draws.
pub fn init_population_with<E: Evaluator + ?Sized>(
    c_prime: &StructureVector,
    t: &ArchTemplate,
    cfg: &SwarmConfig,
    evaluator: &mut E,
    draws: &mut impl Draws,
) -> Result<SwarmState, PsoError> {
    check_inputs(c_prime, t, cfg)?;
    let v_max = cfg.resolved_v_max(t);
    let positions = init_positions(c_prime, t, cfg.n_particles, draws);
    let velocities: Vec<Vec<f64>> = positions
        .iter()
        .map(|_| v_max.iter().map(|&b| draws.symmetric(b)).collect())
        .collect();

    let mut cache = HashMap::new();
    let mut evaluations = 0;
    let scores = score_positions(&mut cache, &mut evaluations, &positions, cfg, 0, evaluator)
        .map_err(evaluator_error(0, &[]))?;

    let particles: Vec<Particle> = positions
        .into_iter()
        .zip(velocities)
        .zip(&scores)
        .map(|((position, velocity), &f)| Particle {
            pbest: position.clone(),
            position,
            velocity,
            pbest_fitness: f,
        })
        .collect();
    let mut best = 0;
    for (i, p) in particles.iter().enumerate() {
        if p.pbest_fitness > particles[best].pbest_fitness {
            best = i;
        }
    }
    Ok(SwarmState {
        gbest: particles[best].pbest.clone(),
        gbest_fitness: particles[best].pbest_fitness,
        particles,
        cycle: 0,
        fitness_cache: cache,
        evaluations,
    })
}

/// Builds and scores the initial swarm from `cfg.seed`.
pub fn init_population<E: Evaluator + ?Sized>(
    c_prime: &StructureVector,
    t: &ArchTemplate,
    cfg: &SwarmConfig,
    evaluator: &mut E,
) -> Result<SwarmState, PsoError> {
    init_population_with(c_prime, t, cfg, evaluator, &mut RandDraws::seeded(cfg.seed))
}

/// Advances the swarm by one cycle.
pub fn step<E: Evaluator + ?Sized>(
    state: &mut SwarmState,
    t: &ArchTemplate,
    cfg: &SwarmConfig,
    evaluator: &mut E,
    draws: &mut impl Draws,
    history: &[HistoryRecord],
) -> Result<(), PsoError> {
    let cycle = state.cycle + 1;
    let w = inertia(cycle, cfg);
    let v_max = cfg.resolved_v_max(t);
    for p in &mut state.particles {
        p.velocity = update_velocity(p, &state.gbest, w, cfg, &v_max, draws);
        p.position = update_position(p, t, cfg);
    }
    let positions: Vec<StructureVector> = state.particles.iter().map(|p| p.position.clone()).collect();
    let scores = score_positions(
        &mut state.fitness_cache,
        &mut state.evaluations,
        &positions,
        cfg,
        cycle,
        evaluator,
    )
    .map_err(evaluator_error(cycle, history))?;
    for (p, f) in state.particles.iter_mut().zip(scores) {
        if f > p.pbest_fitness {
            p.pbest = p.position.clone();
            p.pbest_fitness = f;
        }
        if p.pbest_fitness > state.gbest_fitness {
            state.gbest = p.pbest.clone();
            state.gbest_fitness = p.pbest_fitness;
        }
    }
    state.cycle = cycle;
    Ok(())
}

/// Full search; `observe` sees each history record as soon as it exists.
pub fn run_search_observed<E: Evaluator + ?Sized>(
    c_prime: &StructureVector,
    t: &ArchTemplate,
    cfg: &SwarmConfig,
    evaluator: &mut E,
    mut observe: impl FnMut(&HistoryRecord),
) -> Result<SearchOutcome, PsoError> {
    let mut draws = RandDraws::seeded(cfg.seed);
    let mut state = init_population_with(c_prime, t, cfg, evaluator, &mut draws)?;
    let mut history = vec![HistoryRecord::of(&state)];
    observe(&history[0]);
    for _ in 0..cfg.cycles {
        step(&mut state, t, cfg, evaluator, &mut draws, &history)?;
        history.push(HistoryRecord::of(&state));
        observe(history.last().expect("just pushed"));
    }
    Ok(SearchOutcome {
        gbest: state.gbest,
        gbest_fitness: state.gbest_fitness,
        history,
        evaluations: state.evaluations,
    })
}

pub fn run_search<E: Evaluator + ?Sized>(
    c_prime: &StructureVector,
    t: &ArchTemplate,
    cfg: &SwarmConfig,
    evaluator: &mut E,
) -> Result<SearchOutcome, PsoError> {
    run_search_observed(c_prime, t, cfg, evaluator, |_| {})
}

//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Runs without the libtest harness so the verdict lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use chanprune_core::cluster::{dbscan, pairwise_distance, pruned_channel_count, DistanceMatrix, Metric};
use chanprune_core::featio::AveragedMaps;
use chanprune_core::fitness::{
    external_evaluate, retrain_budget, EvalOutcome, EvalRequest, ExternalSpec, FitnessError, SurrogateEvaluator,
};
use chanprune_core::pipeline::{run_toy_demo, ToyDemoConfig};
use chanprune_core::pso::{
    inertia, init_positions, run_search, update_position, update_velocity, Draws, Particle, RandDraws, SwarmConfig,
};
use chanprune_core::structmodel::{
    apply_structure, build_template, count_flops, count_params, CompressionReport, StructureVector, Totals,
};
use chanprune_core::toynet::{synth_dataset_with, SynthParams, ToyNet, TrainParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- accounting

/// Published baseline totals, in millions: (arch, params, flops).
const BASELINES: [(&str, f64, f64); 2] = [("vgg16-cifar", 14.73, 314.59), ("resnet56-cifar", 0.85, 127.62)];

fn accounting() -> Verdict {
    let start = Instant::now();
    let mut detail = Vec::new();
    for (arch, p_ref, f_ref) in BASELINES {
        let t = build_template(arch).map_err(|e| e.to_string())?;
        let net = apply_structure(&t, &t.baseline()).map_err(|e| e.to_string())?;
        let p = count_params(&net) as f64 / 1e6;
        let f = count_flops(&net) as f64 / 1e6;
        detail.push(format!("{arch} {p:.2}M/{f:.2}M"));
        ensure(
            (p - p_ref).abs() <= 0.03 * p_ref,
            format!("{arch} params {p:.3}M vs {p_ref}M"),
        )?;
        ensure(
            (f - f_ref).abs() <= 0.03 * f_ref,
            format!("{arch} flops {f:.3}M vs {f_ref}M"),
        )?;
    }
    let el = start.elapsed();
    ensure(el < Duration::from_secs(1), format!("took {el:?}"))?;
    Ok(format!("{} in {el:.2?}", detail.join(", ")))
}

// ----------------------------------------------------------- drop percentage

fn drop_percentage() -> Verdict {
    let base = Totals {
        params: 14_730_000,
        flops: 314_590_000,
    };
    let pruned = Totals {
        params: 2_760_000,
        flops: 93_520_000,
    };
    let r = CompressionReport::from_totals("vgg16-cifar", base, pruned, Vec::new());
    let (p, f) = (format!("{:.2}", r.params_drop_pct), format!("{:.2}", r.flops_drop_pct));
    let detail = format!("params {p}% (want 81.28), flops {f}% (want 70.25)");
    ensure(p == "81.28" && f == "70.25", detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- clustering

/// (clusters, noise) from connected components of core points in the eps graph.
fn oracle(d: &DistanceMatrix, eps: f64, min_pts: usize) -> (usize, usize) {
    let n = d.len();
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d.get(i, j) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut roots: Vec<usize> = (0..n).filter(|&i| core[i]).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    let noise = (0..n)
        .filter(|&i| !core[i] && !(0..n).any(|j| core[j] && d.get(i, j) <= eps))
        .count();
    (roots.len(), noise)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random planted instance of at most 64 channels: tight bundles plus outliers.
fn planted(rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let groups = rng.random_range(0..6);
    let size = rng.random_range(1..9);
    let outliers = rng.random_range(0..12);
    let dim = rng.random_range(2..24);
    let jitter = rng.random_range(0.0..0.2);
    let mut out = Vec::new();
    for _ in 0..groups {
        let centre = random_unit(rng, dim);
        for _ in 0..size {
            let scale = rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            out.push(
                centre
                    .iter()
                    .map(|c| scale * (c + rng.random_range(-jitter..jitter)))
                    .collect(),
            );
        }
    }
    for _ in 0..outliers {
        out.push(random_unit(rng, dim));
    }
    if out.is_empty() {
        out.push(random_unit(rng, dim));
    }
    out.shuffle(rng);
    out.truncate(64);
    out
}

fn cosine(channels: Vec<Vec<f64>>) -> DistanceMatrix {
    let m = AveragedMaps {
        layer_name: "layer".into(),
        channels,
    };
    pairwise_distance(&m, Metric::Cosine).unwrap()
}

fn clustering_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let d = cosine(planted(&mut rng));
        let eps = rng.random_range(0.0..0.3);
        let min_pts = rng.random_range(1..7);
        let r = dbscan(&d, eps, min_pts);
        let want = oracle(&d, eps, min_pts);
        ensure(
            (r.num_clusters, r.num_noise) == want,
            format!("case {case}: {:?} vs {want:?}", (r.num_clusters, r.num_noise)),
        )?;
    }
    let el = start.elapsed();
    ensure(el < Duration::from_secs(10), format!("took {el:?}"))?;
    Ok(format!("50/50 instances exact in {el:.2?}"))
}

fn clustering_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    let vs = planted(&mut rng);
    let r = dbscan(&cosine(vs.clone()), 0.05, 3);
    for i in 0..100 {
        let mut shuffled = vs.clone();
        shuffled.shuffle(&mut rng);
        let s = dbscan(&cosine(shuffled), 0.05, 3);
        ensure(
            (s.num_clusters, s.num_noise) == (r.num_clusters, r.num_noise),
            format!("shuffle {i} changed the counts"),
        )?;
    }

    for inst in 0..20 {
        let d = cosine(planted(&mut rng));
        let min_pts = rng.random_range(1..7);
        let mut last = usize::MAX;
        for k in 0..20 {
            let kept = pruned_channel_count(&dbscan(&d, k as f64 * 0.05, min_pts));
            ensure(
                kept <= last,
                format!("instance {inst}: kept rose to {kept} at eps {}", k as f64 * 0.05),
            )?;
            last = kept;
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let vs = planted(&mut rng);
        let scaled: Vec<Vec<f64>> = vs
            .iter()
            .map(|v| {
                let s = rng.random_range(1e-3..1e3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                v.iter().map(|x| s * x).collect()
            })
            .collect();
        let (a, b) = (cosine(vs), cosine(scaled));
        for i in 0..a.len() {
            for j in 0..a.len() {
                worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("scale changed a distance by {worst:e}"))?;
    Ok(format!("100 shuffles, 20x20 eps sweep, scale deviation {worst:.1e}"))
}

// ----------------------------------------------------------------------- PSO

/// Exhaustive optimum of the surrogate below over all 16^6 structures.
const OPTIMUM_FITNESS: f64 = 0.919735691340312;

fn swarm_search() -> Verdict {
    let start = Instant::now();
    let t = build_template("toynet-6").map_err(|e| e.to_string())?;
    let target = StructureVector::new("toynet-6", vec![12, 6, 9, 4, 10, 7]);
    let c_prime = StructureVector::new("toynet-6", vec![15, 4, 11, 7, 7, 9]);
    let mut hits = 0;
    for seed in 0..10 {
        let mut ev = SurrogateEvaluator::new(t.clone(), target.clone(), 16.0, 0.3).map_err(|e| e.to_string())?;
        let cfg = SwarmConfig {
            n_particles: 6,
            cycles: 20,
            seed,
            ..SwarmConfig::default()
        };
        let out = run_search(&c_prime, &t, &cfg, &mut ev).map_err(|e| e.to_string())?;
        ensure(
            out.history.windows(2).all(|w| w[1].gbest_fitness >= w[0].gbest_fitness),
            format!("seed {seed}: history decreased"),
        )?;
        if out.gbest_fitness >= 0.98 * OPTIMUM_FITNESS {
            hits += 1;
        }
    }
    let el = start.elapsed();
    ensure(hits >= 9, format!("{hits}/10 seeds within 2%"))?;
    ensure(el < Duration::from_secs(30), format!("took {el:?}"))?;
    Ok(format!(
        "{hits}/10 seeds within 2% of {OPTIMUM_FITNESS:.4}, in {el:.2?}"
    ))
}

/// Draws replayed from fixed values.
struct Scripted {
    delta: i64,
    unit: f64,
}

impl Draws for Scripted {
    fn delta(&mut self) -> i64 {
        self.delta
    }
    fn unit(&mut self) -> f64 {
        self.unit
    }
    fn symmetric(&mut self, _: f64) -> f64 {
        0.0
    }
}

fn particle(arch: &str, pos: usize, v: f64, pbest: usize) -> Particle {
    Particle {
        position: StructureVector::new(arch, vec![pos]),
        velocity: vec![v],
        pbest: StructureVector::new(arch, vec![pbest]),
        pbest_fitness: 0.0,
    }
}

fn update_rules() -> Verdict {
    let cfg = SwarmConfig {
        cycles: 10,
        ..SwarmConfig::default()
    };
    for (t, want) in [(0, 0.9), (10, 0.4), (5, 0.65)] {
        let w = inertia(t, &cfg);
        ensure((w - want).abs() <= 1e-12, format!("inertia({t}) = {w}, want {want}"))?;
    }

    let mut one = Scripted { delta: 0, unit: 1.0 };
    let p = particle("toynet-1w64", 10, 1.0, 12);
    let gbest = StructureVector::new("toynet-1w64", vec![14]);
    let v = update_velocity(&p, &gbest, 0.5, &cfg, &[100.0], &mut one)[0];
    ensure((v - 12.5).abs() <= 1e-12, format!("velocity {v}, want 12.5"))?;
    let v = update_velocity(&p, &gbest, 0.5, &cfg, &[6.4], &mut one)[0];
    ensure(v == 6.4, format!("clamped velocity {v}, want 6.4"))?;

    let t64 = build_template("toynet-1w64").map_err(|e| e.to_string())?;
    let pos = update_position(&particle("toynet-1w64", 10, 1.4, 10), &t64, &cfg).channels[0];
    ensure(pos == 13, format!("10 + 2*1.4 -> {pos}, want 13"))?;
    let pos = update_position(&particle("toynet-1w64", 3, -5.0, 3), &t64, &cfg).channels[0];
    ensure(pos == 1, format!("3 + 2*-5 -> {pos}, want 1"))?;

    let t2 = build_template("toynet-2").map_err(|e| e.to_string())?;
    let c_prime = StructureVector::new("toynet-2", vec![10, 8]);
    for seed in 0..200 {
        let p = &init_positions(&c_prime, &t2, 1, &mut RandDraws::seeded(seed))[0];
        ensure(
            (9..=11).contains(&p.channels[0]) && (7..=9).contains(&p.channels[1]),
            format!("initial position {:?}", p.channels),
        )?;
    }
    let still = init_positions(&c_prime, &t2, 4, &mut Scripted { delta: 0, unit: 0.0 });
    ensure(still.iter().all(|p| *p == c_prime), "zero offsets moved a particle")?;
    let floor = init_positions(
        &StructureVector::new("toynet-2", vec![1, 1]),
        &t2,
        3,
        &mut Scripted { delta: -1, unit: 0.0 },
    );
    ensure(
        floor.iter().all(|p| p.channels == [1, 1]),
        "offsets went below one channel",
    )?;

    let t = build_template("toynet-6w32").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draws = RandDraws::seeded(6);
    let random =
        |rng: &mut ChaCha8Rng| StructureVector::new("toynet-6w32", (0..6).map(|_| rng.random_range(1..=32)).collect());
    for i in 0..100_000 {
        let cfg = SwarmConfig {
            alpha1: rng.random_range(0.0..4.0),
            alpha2: rng.random_range(0.0..4.0),
            r: rng.random_range(0.1..5.0),
            ..SwarmConfig::default()
        };
        let v_max: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..10.0)).collect();
        let mut p = Particle {
            position: random(&mut rng),
            velocity: (0..6).map(|_| rng.random_range(-50.0..50.0)).collect(),
            pbest: random(&mut rng),
            pbest_fitness: 0.0,
        };
        let gbest = random(&mut rng);
        p.velocity = update_velocity(&p, &gbest, rng.random_range(0.0..1.0), &cfg, &v_max, &mut draws);
        ensure(
            p.velocity.iter().zip(&v_max).all(|(v, m)| v.abs() <= *m),
            format!("update {i}: velocity escaped"),
        )?;
        let pos = update_position(&p, &t, &cfg);
        ensure(
            pos.channels.iter().all(|&c| (1..=32).contains(&c)),
            format!("update {i}: position escaped"),
        )?;
    }
    Ok("inertia, velocity, position and initialisation cases exact; 100000 fuzzed updates in bounds".into())
}

// ---------------------------------------------------------------- toy trainer

fn toy_net(arch: &str, seed: u64) -> ToyNet {
    let t = build_template(arch).unwrap();
    ToyNet::new(&apply_structure(&t, &t.baseline()).unwrap(), seed).unwrap()
}

fn toy_trainer() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let n = toy_net("toynet-2", seed);
        let r = n
            .grad_check(&n.random_batch(4, seed + 100), &[0, 1, 2, 3], 1e-4, 1e-5, 200, seed)
            .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
    }
    ensure(worst < 1e-4, format!("gradient relative error {worst:e}"))?;

    let easy = SynthParams {
        margin: 8.0,
        ..SynthParams::default()
    };
    let data = synth_dataset_with(1, 256, 2, &easy).map_err(|e| e.to_string())?;
    let params = TrainParams {
        epochs: 10,
        lr: 0.05,
        batch_size: 16,
        seed: 3,
    };
    let mut n = toy_net("toynet-2c2", 3);
    n.train(&data, &params).map_err(|e| e.to_string())?;
    let acc = n.accuracy(&data).map_err(|e| e.to_string())?;
    ensure(acc >= 0.95, format!("separable accuracy {acc}"))?;

    let run = || {
        let mut n = toy_net("toynet-2c2", 3);
        let log = n.train(&data, &params).unwrap();
        (
            n.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            log.epoch_losses,
        )
    };
    ensure(run() == run(), "two same-seed runs differ")?;
    Ok(format!(
        "gradient error {worst:.1e}, separable accuracy {acc:.3}, bit-identical reruns"
    ))
}

// ------------------------------------------------------------------ pipeline

/// (fitness, params) per stage row of the toy table.
fn stage(stdout: &str, name: &str) -> Option<(f64, u64)> {
    stdout.lines().find_map(|l| {
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.first() != Some(&name) || cols.len() < 4 {
            return None;
        }
        Some((cols[2].parse().ok()?, cols[3].parse().ok()?))
    })
}

fn pipeline() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_chanprune"))
        .args(["toy", "--seed", "0", "--out"])
        .arg(dir.path().join("run"))
        .output()
        .map_err(|e| e.to_string())?;
    let el = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(
        out.status.success(),
        format!(
            "toy exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ),
    )?;
    let (base_fit, base_params) = stage(&stdout, "baseline").ok_or("no baseline row")?;
    let (clus_fit, _) = stage(&stdout, "clustered").ok_or("no clustered row")?;
    let (fit, params) = stage(&stdout, "searched").ok_or("no searched row")?;
    ensure(
        params < base_params,
        format!("searched params {params} vs baseline {base_params}"),
    )?;
    ensure(
        (fit - base_fit).abs() <= 0.05,
        format!("searched fitness {fit:.3} vs baseline {base_fit:.3}"),
    )?;
    ensure(el < Duration::from_secs(120), format!("toy run took {el:?}"))?;

    let mut wins = usize::from(fit >= clus_fit);
    for seed in 1..10 {
        let o = run_toy_demo(&ToyDemoConfig {
            seed,
            ..ToyDemoConfig::default()
        })
        .map_err(|e| format!("seed {seed}: {e}"))?;
        wins += usize::from(o.searched.fitness >= o.clustered.fitness);
    }
    ensure(wins >= 7, format!("searched >= clustered on {wins}/10 seeds"))?;
    Ok(format!(
        "seed 0: {params} vs {base_params} params, fitness {fit:.3} vs {base_fit:.3}, {el:.1?}; searched >= clustered on {wins}/10 seeds"
    ))
}

// -------------------------------------------------------------------- budget

fn budget() -> Verdict {
    let e = retrain_budget(314_590_000, 152_640_000, 160).map_err(|e| e.to_string())?;
    ensure(e == 330, format!("{e} epochs, want 330"))?;
    Ok("160 epochs scaled to 330".into())
}

// ------------------------------------------------------------------ protocol

fn stub_spec(args: &[&str], timeout: Duration, max_parallelism: usize) -> ExternalSpec {
    ExternalSpec {
        command: std::iter::once(env!("CARGO_BIN_EXE_chanprune-stub-evaluator"))
            .chain(args.iter().copied())
            .map(String::from)
            .collect(),
        timeout,
        max_parallelism,
    }
}

fn requests(n: u64) -> Vec<EvalRequest> {
    (0..n)
        .map(|id| EvalRequest {
            id,
            arch: "toynet-2".into(),
            channels: vec![1 + id as usize, 2],
            epochs: 3,
            seed: id,
        })
        .collect()
}

fn echoed(mode: &[&str], par: usize) -> Result<(), String> {
    let got =
        external_evaluate(&requests(8), &stub_spec(mode, Duration::from_secs(5), par)).map_err(|e| e.to_string())?;
    ensure(got.len() == 8, format!("{mode:?}: {} responses", got.len()))?;
    for r in &got {
        let want = (1 + r.id) as f64 / 1000.0;
        ensure(
            matches!(r.outcome, EvalOutcome::Fitness(f) if f == want),
            format!("{mode:?}: request {} got {:?}", r.id, r.outcome),
        )?;
    }
    Ok(())
}

fn protocol() -> Verdict {
    echoed(&["echo"], 1)?;
    echoed(&["reverse", "--parallelism", "4"], 4)?;

    let timeout = Duration::from_millis(300);
    let start = Instant::now();
    let err = external_evaluate(&requests(2), &stub_spec(&["hang"], timeout, 1));
    let el = start.elapsed();
    ensure(
        matches!(err, Err(FitnessError::EvalTimeout { .. })),
        format!("silent worker gave {err:?}"),
    )?;
    ensure(
        el < timeout + Duration::from_secs(2),
        format!("timeout fired after {el:?}"),
    )?;

    let err = external_evaluate(
        &requests(4),
        &stub_spec(&["crash", "--after", "2"], Duration::from_secs(5), 1),
    );
    ensure(
        matches!(err, Err(FitnessError::EvaluatorCrashed(_))),
        format!("crashing worker gave {err:?}"),
    )?;
    Ok(format!("echo, out-of-order, timeout ({el:.2?} for {timeout:?}), crash"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("accounting", accounting),
        ("drop-percentage", drop_percentage),
        ("clustering-oracle", clustering_oracle),
        ("clustering-properties", clustering_properties),
        ("swarm-search", swarm_search),
        ("update-rules", update_rules),
        ("toy-trainer", toy_trainer),
        ("toy-pipeline", pipeline),
        ("retrain-budget", budget),
        ("protocol", protocol),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

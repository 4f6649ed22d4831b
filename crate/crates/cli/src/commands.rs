//! The four subcommands. Each validates everything it will need, then reads its
//! inputs, and only then writes outputs.
//!
//! Tables go to stdout as tab-separated text with a header row and a fixed column
//! order; tables are separated by one blank line. Diagnostics go to stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chanprune_core::cluster::{layer_distances, LayerClustering};
use chanprune_core::featio::{read_dump, write_dump, FeatureDump};
use chanprune_core::fitness::{build_evaluator, EvaluatorSpec};
use chanprune_core::pipeline::{run_toy_demo_observed, Retrained};
use chanprune_core::pso::{run_search_observed, HistoryRecord};
use chanprune_core::structmodel::{
    build_template, compression_report, read_structure, write_structure, ArchTemplate, CompressionReport, StructError,
    StructureMeta, StructureVector, Totals,
};
use serde_json::json;

use crate::config::{check_output_path, EvaluatorChoice, RunConfig};
use crate::error::{code, CliError};

fn join(channels: &[usize]) -> String {
    channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn print_layers(out: &mut impl Write, layers: &[LayerClustering]) -> std::io::Result<()> {
    writeln!(out, "group\tlayer\toriginal\tclusters\tnoise\tkept")?;
    for l in layers {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            l.group,
            l.layer,
            l.original,
            l.result.num_clusters,
            l.result.num_noise,
            l.kept()
        )?;
    }
    Ok(())
}

fn print_report(out: &mut impl Write, r: &CompressionReport) -> std::io::Result<()> {
    writeln!(out, "quantity\tbaseline\tpruned\tdrop\tdrop_pct")?;
    writeln!(
        out,
        "params\t{}\t{}\t{}\t{:.2}",
        r.baseline.params, r.pruned.params, r.params_drop, r.params_drop_pct
    )?;
    writeln!(
        out,
        "flops\t{}\t{}\t{}\t{:.2}",
        r.baseline.flops, r.pruned.flops, r.flops_drop, r.flops_drop_pct
    )
}

fn print_groups(out: &mut impl Write, r: &CompressionReport) -> std::io::Result<()> {
    writeln!(out, "group\tname\tbaseline\tpruned")?;
    for g in &r.groups {
        writeln!(out, "{}\t{}\t{}\t{}", g.group, g.name, g.baseline, g.pruned)?;
    }
    Ok(())
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io("writing to stdout", e)
}

fn read_dumps(paths: &[PathBuf]) -> Result<Vec<FeatureDump>, CliError> {
    if paths.is_empty() {
        return Err(CliError::config(
            "no feature dump files given (set paths.dumps or pass --dumps)",
        ));
    }
    let mut all = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(CliError::new(
                code::MISSING_LAYER,
                format!("feature dump file {} does not exist", p.display()),
            ));
        }
        all.extend(read_dump(p)?);
    }
    Ok(all)
}

fn meta(pairs: serde_json::Value) -> StructureMeta {
    match pairs {
        serde_json::Value::Object(m) => m.into_iter().collect(),
        _ => unreachable!("meta is always built from an object literal"),
    }
}

/// Clusters dumped feature maps into the preliminary structure.
pub fn cmd_cluster(cfg: &RunConfig, out_path: Option<PathBuf>, sweep: Option<&[f64]>) -> Result<(), CliError> {
    let t = cfg.template()?;
    cfg.check_clustering()?;
    let target = out_path.or_else(|| cfg.paths.structure.clone());
    if let Some(eps) = sweep {
        if eps.is_empty() || eps.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(CliError::config("--sweep needs finite eps values >= 0"));
        }
    } else {
        let p = target
            .as_deref()
            .ok_or_else(|| CliError::config("no output path for the structure (set paths.structure or pass --out)"))?;
        check_output_path(p, "structure")?;
    }

    let dumps = read_dumps(&cfg.paths.dumps)?;
    let distances = layer_distances(&dumps, &t, cfg.metric)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();

    if let Some(eps_values) = sweep {
        writeln!(out, "eps\tkept_total\tparams_drop_pct\tflops_drop_pct\tchannels").map_err(stdout_err)?;
        for &eps in eps_values {
            let kept: Vec<usize> = distances.iter().map(|d| d.cluster(eps, cfg.min_pts).kept()).collect();
            let s = StructureVector::new(&t.arch_id, kept);
            let r = compression_report(&t, &t.baseline(), &s)?;
            writeln!(
                out,
                "{eps}\t{}\t{:.2}\t{:.2}\t{}",
                s.channels.iter().sum::<usize>(),
                r.params_drop_pct,
                r.flops_drop_pct,
                join(&s.channels)
            )
            .map_err(stdout_err)?;
        }
        return Ok(());
    }

    let layers: Vec<LayerClustering> = distances.iter().map(|d| d.cluster(cfg.eps, cfg.min_pts)).collect();
    let c_prime = StructureVector::new(&t.arch_id, layers.iter().map(LayerClustering::kept).collect());
    let report = compression_report(&t, &t.baseline(), &c_prime)?;
    print_layers(&mut out, &layers).map_err(stdout_err)?;
    writeln!(out).map_err(stdout_err)?;
    print_report(&mut out, &report).map_err(stdout_err)?;

    let m = meta(json!({"eps": cfg.eps, "min_pts": cfg.min_pts, "metric": cfg.metric.name()}));
    write_structure(target.expect("checked above"), &c_prime, Some(&m))?;
    Ok(())
}

/// Append-only history log, flushed after every record.
struct HistoryLog {
    file: Option<BufWriter<File>>,
    failed: Option<std::io::Error>,
}

impl HistoryLog {
    fn create(path: Option<&Path>) -> Result<Self, CliError> {
        let file = path
            .map(|p| File::create(p).map_err(|e| CliError::io(format!("creating {}", p.display()), e)))
            .transpose()?
            .map(BufWriter::new);
        Ok(Self { file, failed: None })
    }

    fn record(&mut self, r: &HistoryRecord) {
        if let (Some(f), None) = (&mut self.file, &self.failed) {
            let line = serde_json::to_string(r).expect("history records always serialize");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(self) -> Result<(), CliError> {
        match self.failed {
            Some(e) => Err(CliError::io("writing history log", e)),
            None => Ok(()),
        }
    }
}

/// Reads a structure file and checks it against `arch`, when one is fixed.
fn load_structure(path: &Path, arch: Option<&str>, what: &str) -> Result<(StructureVector, ArchTemplate), CliError> {
    if !path.exists() {
        return Err(CliError::new(
            code::IO,
            format!("{what} file {} does not exist", path.display()),
        ));
    }
    let (s, _) = read_structure(path)?;
    if let Some(a) = arch {
        if a != s.arch_id {
            return Err(StructError::StructureMismatch(format!(
                "{what} {} is for `{}`, expected `{a}`",
                path.display(),
                s.arch_id
            ))
            .into());
        }
    }
    let t = build_template(&s.arch_id)?;
    t.validate(&s)?;
    Ok((s, t))
}

/// Refines a preliminary structure with the swarm.
pub fn cmd_search(
    cfg: &RunConfig,
    choice: Option<&EvaluatorChoice>,
    structure: Option<PathBuf>,
    out_path: Option<PathBuf>,
    history: Option<PathBuf>,
) -> Result<(), CliError> {
    let c_path = structure
        .or_else(|| cfg.paths.structure.clone())
        .ok_or_else(|| CliError::config("no preliminary structure (set paths.structure or pass --structure)"))?;
    let out_path = out_path
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| CliError::config("no output path (set paths.output or pass --out)"))?;
    check_output_path(&out_path, "output")?;
    let history = history.or_else(|| cfg.paths.history.clone());
    if let Some(h) = &history {
        check_output_path(h, "history")?;
    }
    let (c_prime, t) = load_structure(&c_path, cfg.arch.as_deref(), "preliminary structure")?;
    let spec = cfg.evaluator_for(choice, &t)?;
    cfg.swarm.validate(&t)?;

    let mut evaluator = build_evaluator(&spec, &t)?;
    let mut log = HistoryLog::create(history.as_deref())?;
    let result = run_search_observed(&c_prime, &t, &cfg.swarm, &mut evaluator, |r| log.record(r));
    drop(evaluator);
    log.finish()?;
    let outcome = result?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "cycle\tgbest_fitness\tchannels").map_err(stdout_err)?;
    for h in &outcome.history {
        writeln!(out, "{}\t{}\t{}", h.cycle, h.gbest_fitness, join(&h.gbest_channels)).map_err(stdout_err)?;
    }
    writeln!(out).map_err(stdout_err)?;
    let report = compression_report(&t, &t.baseline(), &outcome.gbest)?;
    print_report(&mut out, &report).map_err(stdout_err)?;

    let kind = match spec {
        EvaluatorSpec::Surrogate { .. } => "surrogate",
        EvaluatorSpec::Toynet(_) => "toynet",
        EvaluatorSpec::External { .. } => "external",
    };
    let m = meta(json!({
        "fitness": outcome.gbest_fitness,
        "evaluations": outcome.evaluations,
        "cycles": cfg.swarm.cycles,
        "seed": cfg.swarm.seed,
        "evaluator": kind,
    }));
    write_structure(&out_path, &outcome.gbest, Some(&m))?;
    Ok(())
}

/// Where `report` takes its pruned side from.
pub enum ReportInput {
    Structure(PathBuf),
    /// Synthetic (params, FLOPs) totals with no structure behind them.
    Totals(Totals),
}

pub struct ReportArgs {
    pub input: ReportInput,
    pub baseline: Option<PathBuf>,
    pub baseline_totals: Option<Totals>,
    pub json: bool,
    pub out: Option<PathBuf>,
}

/// Parameter and FLOP drops of a structure against a baseline.
pub fn cmd_report(cfg: &RunConfig, args: ReportArgs) -> Result<(), CliError> {
    if let Some(p) = &args.out {
        check_output_path(p, "report")?;
    }
    let arch = cfg.arch.as_deref();
    let report = match &args.input {
        ReportInput::Totals(pruned) => {
            let base = match (args.baseline_totals, arch) {
                (Some(b), _) => b,
                (None, Some(_)) => {
                    let t = cfg.template()?;
                    chanprune_core::structmodel::totals(&t, &t.baseline())?
                }
                (None, None) => return Err(CliError::config("synthetic totals need --baseline-totals or --arch")),
            };
            if base.params == 0 || base.flops == 0 {
                return Err(CliError::config("baseline totals must be positive"));
            }
            CompressionReport::from_totals(arch.unwrap_or("-"), base, *pruned, vec![])
        }
        ReportInput::Structure(path) => {
            if args.baseline_totals.is_some() {
                return Err(CliError::config("--baseline-totals only applies to --pruned-totals"));
            }
            let (s, t) = load_structure(path, arch, "structure")?;
            let base = match args.baseline.as_ref().or(cfg.paths.baseline.as_ref()) {
                Some(b) => load_structure(b, Some(&t.arch_id), "baseline")?.0,
                None => t.baseline(),
            };
            compression_report(&t, &base, &s)?
        }
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let text = serde_json::to_string_pretty(&report).expect("reports always serialize");
    if args.json {
        writeln!(out, "{text}").map_err(stdout_err)?;
    } else {
        print_report(&mut out, &report).map_err(stdout_err)?;
        if !report.groups.is_empty() {
            writeln!(out).map_err(stdout_err)?;
            print_groups(&mut out, &report).map_err(stdout_err)?;
        }
    }
    if let Some(p) = &args.out {
        std::fs::write(p, text + "\n").map_err(|e| CliError::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

fn retrained_row(out: &mut impl Write, stage: &str, r: &Retrained) -> std::io::Result<()> {
    writeln!(
        out,
        "{stage}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{}",
        r.epochs,
        r.fitness,
        r.report.pruned.params,
        r.report.pruned.flops,
        r.report.params_drop_pct,
        r.report.flops_drop_pct,
        join(&r.structure.channels)
    )
}

/// Runs the whole pipeline on a toy network and synthetic data.
pub fn cmd_toy(cfg: &RunConfig, choice: Option<&EvaluatorChoice>, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let mut demo = cfg.toy_demo();
    match (choice, &cfg.evaluator) {
        (Some(EvaluatorChoice::Toynet) | None, Some(EvaluatorSpec::Toynet(p))) => demo.fitness = p.clone(),
        (Some(EvaluatorChoice::Toynet) | None, None) => {}
        _ => {
            return Err(CliError::config(
                "toy runs score structures with the toynet evaluator only",
            ))
        }
    }
    demo.validate()?;
    if let Some(dir) = &out_dir {
        if dir.exists() && !dir.is_dir() {
            return Err(CliError::config(format!(
                "--out {} exists and is not a directory",
                dir.display()
            )));
        }
        if let Some(parent) = dir.parent() {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(CliError::config(format!(
                    "parent of --out {} does not exist",
                    dir.display()
                )));
            }
        }
    }
    let history = out_dir
        .as_ref()
        .map(|d| d.join("history.jsonl"))
        .or_else(|| cfg.paths.history.clone());
    if let (Some(h), None) = (&history, &out_dir) {
        check_output_path(h, "history")?;
    }

    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let mut log = HistoryLog::create(history.as_deref())?;
    let result = run_toy_demo_observed(&demo, |r| log.record(r));
    log.finish()?;
    let o = result?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    print_layers(&mut out, &o.layers).map_err(stdout_err)?;
    writeln!(out).map_err(stdout_err)?;
    writeln!(
        out,
        "stage\tepochs\tfitness\tparams\tflops\tparams_drop_pct\tflops_drop_pct\tchannels"
    )
    .map_err(stdout_err)?;
    retrained_row(&mut out, "baseline", &o.baseline).map_err(stdout_err)?;
    retrained_row(&mut out, "clustered", &o.clustered).map_err(stdout_err)?;
    retrained_row(&mut out, "searched", &o.searched).map_err(stdout_err)?;
    writeln!(out).map_err(stdout_err)?;
    writeln!(out, "cycle\tgbest_fitness\tchannels").map_err(stdout_err)?;
    for h in &o.history {
        writeln!(out, "{}\t{}\t{}", h.cycle, h.gbest_fitness, join(&h.gbest_channels)).map_err(stdout_err)?;
    }

    if let Some(dir) = &out_dir {
        write_dump(dir.join("dumps.acpf"), &o.dumps)?;
        let m = meta(json!({"eps": demo.eps, "min_pts": demo.min_pts, "metric": demo.metric.name()}));
        write_structure(dir.join("c_prime.json"), &o.clustered.structure, Some(&m))?;
        let m = meta(json!({"fitness": o.search_fitness, "retrained_fitness": o.searched.fitness, "seed": demo.seed}));
        write_structure(dir.join("gbest.json"), &o.searched.structure, Some(&m))?;
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use omtl_core::datastore::{generate_synthetic, load_dataset, make_folds, Dataset, FoldPlan, SynthConfig};
use omtl_core::gradcheck::{check_random_instance, GradCheckReport, TOLERANCE};
use omtl_core::metrics::{compare_models, EvalReport, ScoredSet};
use omtl_core::model::{OmtlModel, Variant};
use omtl_core::ontology::{grow_from_core, load_graph, save_graph, GrowthConfig, OntologyGraph};
use omtl_core::trainer::{run_cv, score, train, TrainConfig};
use omtl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "omtl", version, about = "Ontology-driven multi-task learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a graph file is a well-formed DAG.
    ValidateGraph {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Grow a subgraph upward from core nodes by random predecessor walks.
    Augment {
        #[arg(long)]
        graph: PathBuf,
        /// Comma-separated core node ids.
        #[arg(long, value_delimiter = ',', required = true)]
        core: Vec<String>,
        #[arg(long = "hops", alias = "max-hops", default_value_t = 2)]
        max_hops: usize,
        #[arg(long = "iters", alias = "iterations", default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic graph and cohort.
    Synth {
        /// JSON generator settings; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Starve the last leaf to 200 records.
        #[arg(long)]
        benchmark: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_graph: PathBuf,
        #[arg(long)]
        out_data: PathBuf,
    },
    /// Write a stratified k-fold plan.
    Folds {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        subset: FoldArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a trained model and write metrics.
    Eval {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        subset: FoldArgs,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        roc_out: Option<PathBuf>,
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Cross-validate several variants on the same folds.
    Cv {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "omtl,mmoe,moe,sb")]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Existing fold plan; derived from --seed when absent.
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        report: PathBuf,
        /// Directory for pooled out-of-fold scores, one file per variant.
        #[arg(long)]
        scores_dir: Option<PathBuf>,
    },
    /// Compare evaluation reports, optionally with a DeLong test on scores.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, requires_all = ["scores_a", "scores_b"])]
        delong: bool,
        #[arg(long)]
        scores_a: Option<PathBuf>,
        #[arg(long)]
        scores_b: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        instances: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct FoldArgs {
    /// Restrict to one fold of a plan: training uses the other folds,
    /// evaluation uses this one.
    #[arg(long, requires = "fold")]
    folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

impl FoldArgs {
    fn indices(&self, data: &Dataset, held_out: bool) -> Result<Vec<usize>> {
        match (&self.folds, self.fold) {
            (Some(path), Some(fold)) => {
                let plan = FoldPlan::load(path)?;
                if fold >= plan.k {
                    return Err(Error::Config(format!("fold {fold} out of range for k={}", plan.k)));
                }
                let (train, test) = plan.split(data, fold)?;
                Ok(if held_out { test } else { train })
            }
            _ => Ok((0..data.len()).collect()),
        }
    }
}

/// Everything that determines an output; timing lives in a separate sidecar.
#[derive(Serialize, Default)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: Option<u64>,
    config_hash: Option<String>,
    graph_hash: Option<String>,
    data_hash: Option<String>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Timing {
    started_unix: f64,
    elapsed_seconds: f64,
}

fn hash_json<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializable")))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", p.display())),
            other => other,
        }),
        None => Ok(TrainConfig::default()),
    }
}

fn load_inputs(io: &DataArgs) -> Result<(OntologyGraph, Dataset)> {
    let graph = load_graph(&io.graph)?;
    let data = load_dataset(&io.data, &graph)?;
    Ok((graph, data))
}

fn finish(primary: &Path, mut manifest: Manifest, outputs: &[&Path], started: (SystemTime, Instant)) -> Result<()> {
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    write_json(&sidecar(primary, ".manifest.json"), &manifest)?;
    let started_unix = started.0.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    write_json(
        &sidecar(primary, ".timing.json"),
        &Timing { started_unix, elapsed_seconds: started.1.elapsed().as_secs_f64() },
    )
}

fn manifest(command: &str) -> Manifest {
    Manifest {
        tool: "omtl",
        version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = (SystemTime::now(), Instant::now());
    match cli.command {
        Command::ValidateGraph { graph } => {
            let g = load_graph(&graph)?;
            println!(
                "ok: {} nodes, {} edges, depth {}, {} core",
                g.len(),
                g.edges().len(),
                g.depth(),
                g.core_nodes().count()
            );
        }
        Command::Augment { graph, core, max_hops, iterations, seed, out } => {
            let g = load_graph(&graph)?;
            let cfg = GrowthConfig { core_ids: core, max_hops, iterations, seed };
            let grown = grow_from_core(&g, &cfg)?;
            save_graph(&grown, &out)?;
            println!("grew {} core nodes to {} nodes", cfg.core_ids.len(), grown.len());
            let m = Manifest {
                seed: Some(seed),
                config_hash: Some(hash_json(&cfg)),
                graph_hash: Some(g.content_hash()),
                ..manifest("augment")
            };
            finish(&out, m, &[&out], started)?;
        }
        Command::Synth { config, benchmark, seed, out_graph, out_data } => {
            let mut cfg: SynthConfig = match &config {
                Some(p) => read_json(p)?,
                None if benchmark => SynthConfig::benchmark(seed),
                None => SynthConfig::default(),
            };
            cfg.seed = seed;
            if benchmark {
                cfg.records_override.entry(cfg.low_data_leaf()).or_insert(200);
            }
            let (g, d) = generate_synthetic(&cfg)?;
            save_graph(&g, &out_graph)?;
            d.save(&out_data)?;
            println!("{} nodes, {} records", g.len(), d.len());
            let m = Manifest {
                seed: Some(seed),
                config_hash: Some(hash_json(&cfg)),
                graph_hash: Some(g.content_hash()),
                data_hash: Some(d.content_hash()),
                ..manifest("synth")
            };
            finish(&out_data, m, &[&out_graph, &out_data], started)?;
        }
        Command::Folds { io, k, seed, out } => {
            let (g, d) = load_inputs(&io)?;
            let plan = make_folds(&d, &g, k, seed)?;
            plan.save(&out)?;
            let m = Manifest {
                seed: Some(seed),
                graph_hash: Some(g.content_hash()),
                data_hash: Some(d.content_hash()),
                ..manifest("folds")
            };
            finish(&out, m, &[&out], started)?;
        }
        Command::Train { io, config, variant, seed, subset, out, log } => {
            let (g, d) = load_inputs(&io)?;
            let mut cfg = load_train_config(&config)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let idx = subset.indices(&d, false)?;
            let (model, train_log) = train(&g, &d, &idx, &cfg, cfg.seed)?;
            model.save(&out)?;
            let mut outputs = vec![out.as_path()];
            if let Some(p) = &log {
                write_json(p, &train_log)?;
                outputs.push(p);
            }
            for s in &train_log.phases {
                println!("{:?}: {} epochs, best validation loss {:.6}", s.phase, s.epochs_run, s.best_val.total);
            }
            let m = Manifest {
                seed: Some(cfg.seed),
                config_hash: Some(cfg.content_hash()),
                graph_hash: Some(g.content_hash()),
                data_hash: Some(d.content_hash()),
                ..manifest("train")
            };
            finish(&out, m, &outputs, started)?;
        }
        Command::Eval { io, model, subset, report, roc_out, scores_out } => {
            let (g, d) = load_inputs(&io)?;
            let m = OmtlModel::load(&model, &g)?;
            let idx = subset.indices(&d, true)?;
            let sets = score(&m, &g, &d, &idx)?;
            let r = EvalReport::from_scored(m.spec.variant.name(), &sets)?;
            write_json(&report, &r)?;
            let mut outputs = vec![report.as_path()];
            if let Some(p) = &roc_out {
                write_json(p, &r.roc)?;
                outputs.push(p);
            }
            if let Some(p) = &scores_out {
                write_json(p, &sets)?;
                outputs.push(p);
            }
            print_strata(&r);
            let mf = Manifest {
                graph_hash: Some(g.content_hash()),
                data_hash: Some(d.content_hash()),
                config_hash: Some(hash_json(&m.spec)),
                ..manifest("eval")
            };
            finish(&report, mf, &outputs, started)?;
        }
        Command::Cv { io, config, variants, k, folds, seed, jobs, report, scores_dir } => {
            let (g, d) = load_inputs(&io)?;
            let mut cfg = load_train_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let plan = match &folds {
                Some(p) => FoldPlan::load(p)?,
                None => make_folds(&d, &g, k, cfg.seed)?,
            };
            let out = run_cv(&g, &d, &plan, &cfg, &variants, jobs)?;
            write_json(&report, &out.report)?;
            let mut outputs = vec![report.clone()];
            if let Some(dir) = &scores_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                for (v, sets) in &out.scores {
                    let p = dir.join(format!("{v}.scores.json"));
                    write_json(&p, sets)?;
                    outputs.push(p);
                }
            }
            for a in &out.report.aggregate {
                println!(
                    "{:<5} {}/{}: mean AUC {}",
                    a.variant,
                    a.node,
                    a.outcome,
                    a.mean_auc.map_or("n/a".into(), |x| format!("{x:.4}"))
                );
            }
            let m = Manifest {
                seed: Some(cfg.seed),
                config_hash: Some(cfg.content_hash()),
                graph_hash: Some(g.content_hash()),
                data_hash: Some(d.content_hash()),
                ..manifest("cv")
            };
            let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
            finish(&report, m, &refs, started)?;
        }
        Command::Compare { reports, delong, scores_a, scores_b, out } => {
            let loaded: Vec<EvalReport> = reports.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
            let mut combined = EvalReport {
                model: loaded.iter().map(|r| r.model.as_str()).collect::<Vec<_>>().join(","),
                ..Default::default()
            };
            for r in &loaded {
                println!("{}:", r.model);
                print_strata(r);
            }
            if delong {
                let (pa, pb) = (scores_a.expect("required by clap"), scores_b.expect("required by clap"));
                let a: Vec<ScoredSet> = read_json(&pa)?;
                let b: Vec<ScoredSet> = read_json(&pb)?;
                let name = |i: usize, p: &Path| {
                    loaded.get(i).map(|r| r.model.clone()).unwrap_or_else(|| p.display().to_string())
                };
                combined.comparisons = compare_models(&name(0, &pa), &a, &name(1, &pb), &b)?;
                combined.metadata.insert("delong".into(), "paired, on the supplied score files".into());
                for c in &combined.comparisons {
                    println!(
                        "{}/{}: {} {:.4} vs {} {:.4}, dAUC {:+.4}, p {:.4}{}",
                        c.node,
                        c.outcome,
                        c.model_a,
                        c.auc_a,
                        c.model_b,
                        c.auc_b,
                        c.delta_auc,
                        c.p_value,
                        if c.significant_at_05 { " *" } else { "" }
                    );
                }
            }
            for r in loaded {
                combined.strata.extend(r.strata.into_iter().map(|mut s| {
                    s.note = Some(r.model.clone());
                    s
                }));
            }
            if let Some(p) = &out {
                write_json(p, &combined)?;
                finish(p, manifest("compare"), &[p], started)?;
            }
        }
        Command::Gradcheck { seed, instances, out } => {
            let reports: Vec<GradCheckReport> =
                (0..instances.max(1)).map(|i| check_random_instance(seed + i)).collect::<Result<_>>()?;
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("at least one instance");
            println!(
                "max relative error {:.3e} at {} (seed {}, tolerance {TOLERANCE:e})",
                worst.max_rel_error, worst.worst_param, worst.seed
            );
            if let Some(p) = &out {
                write_json(p, &reports)?;
                let m = Manifest { seed: Some(seed), ..manifest("gradcheck") };
                finish(p, m, &[p], started)?;
            }
            if !worst.passed() {
                return Err(Error::Numerical(format!(
                    "max relative gradient error {:.3e} >= {TOLERANCE:e}",
                    worst.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn print_strata(r: &EvalReport) {
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    for s in &r.strata {
        println!(
            "  {}/{}: n={} pos={} AUC {} APS {}",
            s.node,
            s.outcome,
            s.n,
            s.n_positive,
            fmt(s.auc),
            fmt(s.aps)
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

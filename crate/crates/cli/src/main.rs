use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rareboost_core::augment::{self, AugmentOp};
use rareboost_core::csc::{self, ToyConfig, TOY_SEED};
use rareboost_core::dataset::{self, Dataset};
use rareboost_core::generate::{generate, GenerateOptions};
use rareboost_core::labelmap::{LabelMap, UNIFIED_CLASSES};
use rareboost_core::metrics::{self, ZeroUnion};
use rareboost_core::rebalance::{self, RebalancePlan, DEFAULT_RARE};
use rareboost_core::scene::SceneSpec;

#[derive(Parser)]
#[command(name = "rareboost-forge", version, about = "Synthetic LiDAR datasets with controlled rare-class counts")]
struct Cli {
    /// Print machine-readable JSON instead of text tables.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RAREBOOST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one sequence from a scene spec and per-class targets.
    Generate {
        #[arg(long)]
        scene: PathBuf,
        /// Flat `class = count` file or a plan file (its additions are used).
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 100)]
        scans: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene and sensor seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "00")]
        sequence: String,
        /// Allow instances that no scan can see.
        #[arg(long)]
        allow_hidden: bool,
    },
    /// Add per-class counts to a baseline and report rare-class totals.
    Plan {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        additions: PathBuf,
        /// Comma-separated rare classes.
        #[arg(long, value_delimiter = ',')]
        rare: Option<Vec<String>>,
    },
    /// Compare distinct instances per class in a dataset with a plan.
    Audit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Rewrite a dataset's labels into unified class ids.
    MapLabels {
        /// Map file or shipped map name.
        #[arg(long)]
        map: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply point dropout or coordinate jitter to every scan.
    Augment {
        #[arg(long, value_enum)]
        op: OpArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = augment::DEFAULT_KEEP)]
        keep: f64,
        #[arg(long, default_value_t = augment::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = augment::DEFAULT_CLIP)]
        clip: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Points and distinct instances per unified class.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Map file or shipped map name.
        #[arg(long)]
        map: String,
    },
    /// Per-class IoU and mIoU of predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Map file or shipped map name for ground-truth labels.
        #[arg(long)]
        map: String,
        /// Map for prediction labels (default: same as --map).
        #[arg(long)]
        pred_map: Option<String>,
        /// Score classes absent from both sides as 0 instead of skipping them.
        #[arg(long)]
        count_zero_union: bool,
    },
    /// Gradient, closed-form and toy-alignment checks of the contrastive loss.
    CscCheck {
        /// More gradient instances and a toy run over several seeds.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = TOY_SEED)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Dropout,
    Jitter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

/// A map file path, or the name of a shipped map.
fn load_map(arg: &str) -> Result<LabelMap> {
    let path = Path::new(arg);
    if path.exists() {
        return LabelMap::load(path).with_context(|| format!("loading label map {arg}"));
    }
    LabelMap::builtin(arg).ok_or_else(|| anyhow!("'{arg}' is neither a map file nor a shipped map name"))
}

/// Ok(false) means the command ran but its check failed.
fn run(cli: &Cli) -> Result<bool> {
    let json = cli.json;
    match &cli.command {
        Command::Generate {
            scene,
            targets,
            scans,
            out,
            seed,
            sequence,
            allow_hidden,
        } => {
            if *scans == 0 {
                bail!("--scans must be at least 1");
            }
            let spec = SceneSpec::load(scene).with_context(|| format!("loading scene {}", scene.display()))?;
            let targets = rebalance::load_targets(targets)?;
            let opts = GenerateOptions {
                scans: *scans,
                seed: *seed,
                sequence: sequence.clone(),
                allow_hidden: *allow_hidden,
            };
            let summary = generate(&spec, &targets, &opts, out).map_err(|e| {
                let hint = matches!(e, rareboost_core::Error::InfeasiblePlacement { .. })
                    && spec.require_sightline
                    && !allow_hidden;
                let e = anyhow::Error::from(e);
                if hint {
                    e.context(format!(
                        "every instance must be visible from one of the {scans} scan positions; \
                         use more scans, lower the targets, or pass --allow-hidden"
                    ))
                } else {
                    e
                }
            })?;
            emit(json, &summary, || {
                let mut s = format!(
                    "wrote {} scans to {} (seed {})\npoints: {} total, {}..{} per scan\ninstances:",
                    summary.scans,
                    summary.sequence.display(),
                    summary.rng_seed,
                    summary.points,
                    summary.min_points,
                    summary.max_points
                );
                for (c, n) in &summary.instances {
                    s.push_str(&format!("\n  {c:<12} {n}"));
                }
                s
            })?;
            Ok(true)
        }
        Command::Plan {
            baseline,
            additions,
            rare,
        } => {
            let rare = rare
                .clone()
                .unwrap_or_else(|| DEFAULT_RARE.iter().map(|s| s.to_string()).collect());
            let p = rebalance::plan(&rebalance::load_baseline(baseline)?, &rebalance::load_targets(additions)?, &rare)?;
            #[derive(Serialize)]
            struct Out<'a> {
                #[serde(flatten)]
                plan: &'a RebalancePlan,
                rare_total_before: usize,
                rare_total_after: usize,
            }
            let out = Out {
                plan: &p,
                rare_total_before: p.rare_total_before(),
                rare_total_after: p.rare_total_after(),
            };
            emit(json, &out, || p.to_string())?;
            Ok(true)
        }
        Command::Audit { dataset, plan } => {
            let plan = RebalancePlan::load(plan)?;
            let report = rebalance::audit(dataset, &plan)?;
            emit(json, &report, || report.to_string())?;
            Ok(report.mismatches().is_empty())
        }
        Command::MapLabels { map, input, out } => {
            let lm = load_map(map)?;
            let n = dataset::map_dataset(input, out, &lm)?;
            emit(json, &serde_json::json!({ "scans": n, "out": out }), || {
                format!("mapped {n} scans into {}", out.display())
            })?;
            Ok(true)
        }
        Command::Augment {
            op,
            input,
            out,
            keep,
            sigma,
            clip,
            seed,
        } => {
            let op = match op {
                OpArg::Dropout => AugmentOp::Dropout { keep: *keep },
                OpArg::Jitter => AugmentOp::Jitter {
                    sigma: *sigma,
                    clip: *clip,
                },
            };
            let n = augment::augment_dataset(input, out, op, *seed)?;
            emit(json, &serde_json::json!({ "scans": n, "out": out }), || {
                format!("augmented {n} scans into {}", out.display())
            })?;
            Ok(true)
        }
        Command::Stats { dataset, map } => {
            let lm = load_map(map)?;
            let ds = Dataset::open(dataset)?;
            let st = dataset::stats(&ds, &lm)?;
            emit(json, &st, || {
                let mut s = format!("{:<14} {:>12} {:>10}", "class", "points", "instances");
                for (k, c) in UNIFIED_CLASSES.iter().enumerate() {
                    s.push_str(&format!("\n{c:<14} {:>12} {:>10}", st.points[k], st.instances[k]));
                }
                s.push_str(&format!("\n{} scans, {} ignored points", st.scans, st.ignored_points));
                s
            })?;
            Ok(true)
        }
        Command::Eval {
            gt,
            pred,
            map,
            pred_map,
            count_zero_union,
        } => {
            let gt_map = load_map(map)?;
            let pred_map = match pred_map {
                Some(m) => load_map(m)?,
                None => gt_map.clone(),
            };
            let cm = metrics::evaluate(&Dataset::open(gt)?, &Dataset::open(pred)?, &gt_map, &pred_map)?;
            let policy = if *count_zero_union {
                ZeroUnion::CountAsZero
            } else {
                ZeroUnion::Exclude
            };
            let report = cm.iou(policy);
            #[derive(Serialize)]
            struct Out<'a> {
                classes: &'a [&'a str],
                #[serde(flatten)]
                report: &'a metrics::IouReport,
                miou_percent: Option<f64>,
                points: u64,
            }
            let out = Out {
                classes: &UNIFIED_CLASSES,
                report: &report,
                miou_percent: report.miou_percent(),
                points: cm.total(),
            };
            emit(json, &out, || report.to_string())?;
            Ok(true)
        }
        Command::CscCheck { full, seed } => csc_check(json, *full, *seed),
    }
}

fn csc_check(json: bool, full: bool, seed: u64) -> Result<bool> {
    const GRAD_TOL: f64 = 1e-4;
    const CLOSED_TOL: f64 = 1e-12;
    let grad = csc::gradient_check(if full { 1000 } else { 100 }, seed)?;
    let closed = csc::closed_form_checks(seed)?;
    let toy_seeds: Vec<u64> = if full { (seed..seed + 10).collect() } else { vec![seed] };
    let toys = toy_seeds
        .iter()
        .map(|&s| csc::toy_alignment_experiment(&ToyConfig::default(), s))
        .collect::<Result<Vec<_>, _>>()?;
    let toy_ok = |t: &csc::ToyReport| {
        t.with_csc.mean_cosine > t.cross_entropy.mean_cosine
            && t.with_csc.cross_domain_accuracy >= t.cross_entropy.cross_domain_accuracy
    };
    let grad_ok = grad.max_rel_error < GRAD_TOL;
    let closed_ok =
        closed.uniform_error <= CLOSED_TOL && closed.single_class_loss == 0.0 && closed.additivity_error <= CLOSED_TOL;
    // the reference seed must pass; extra seeds in --full are informational
    let ok = grad_ok && closed_ok && toy_ok(&toys[0]);

    #[derive(Serialize)]
    struct Out<'a> {
        gradient: &'a csc::GradCheck,
        closed_forms: &'a csc::ClosedForms,
        toy: &'a [csc::ToyReport],
        passed: bool,
    }
    let out = Out {
        gradient: &grad,
        closed_forms: &closed,
        toy: &toys,
        passed: ok,
    };
    let mark = |b: bool| if b { "ok  " } else { "FAIL" };
    emit(json, &out, || {
        let mut s = format!(
            "{} gradient: {} instances, max relative error {:.3e} (< {GRAD_TOL:e})\n",
            mark(grad_ok),
            grad.instances,
            grad.max_rel_error
        );
        s.push_str(&format!(
            "{} closed forms: |loss - ln C| = {:.1e}, single-class loss = {}, additivity error = {:.1e}\n",
            mark(closed_ok),
            closed.uniform_error,
            closed.single_class_loss,
            closed.additivity_error
        ));
        for t in &toys {
            s.push_str(&format!(
                "{} toy seed {}: prototype cosine {:.4} (ce) vs {:.4} (ce+csc), cross-domain accuracy {:.4} vs {:.4}\n",
                mark(toy_ok(t)),
                t.seed,
                t.cross_entropy.mean_cosine,
                t.with_csc.mean_cosine,
                t.cross_entropy.cross_domain_accuracy,
                t.with_csc.cross_domain_accuracy
            ));
        }
        s.push_str(if ok { "all checks passed" } else { "checks FAILED" });
        s
    })?;
    Ok(ok)
}

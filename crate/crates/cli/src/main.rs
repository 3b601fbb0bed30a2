use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdgd_cli::config::RunConfig;
use mdgd_cli::eval::{evaluate, EvalReport};
use mdgd_cli::pipeline::{run_pipeline, thresholds, write_outputs, Input, Models};
use mdgd_cli::report::aggregate;
use mdgd_core::gradsuite::run_suite;
use mdgd_core::matching::{train_overlap, DescriptorSet};
use mdgd_core::posegraph::{load_poses, save_poses};
use mdgd_core::sync::train::SyncTrainer;
use mdgd_core::synth::{gen_benchmark_suite, gen_scene, gen_stats_dataset_with, SceneSpec, SyntheticScene};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "mdgd", version, about = "Multiview point-cloud registration with learned motion synchronization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand; each mirrors a config key.
#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set sync.iterations=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// indoor (te < 0.2 m) or outdoor (te < 0.5 m).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// full or sparse.
    #[arg(long, global = true)]
    graph: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    dump_intermediates: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write benchmark scenes and optionally a matching-statistics dataset.
    Synth {
        #[arg(long, default_value = "standard")]
        suite: String,
        #[arg(long)]
        index: Option<usize>,
        /// Also write this many statistics samples to `stats.json`.
        #[arg(long)]
        stats_samples: Option<usize>,
    },
    /// Train the overlap network on synthetic matching statistics.
    TrainOverlap,
    /// Train the sync network on synthetic scenes.
    TrainSync {
        /// Continue from the training-state checkpoint in the output dir.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        /// Stop after this many steps (the run can be resumed).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run the full pipeline on a synthetic suite, a scene spec or descriptor files.
    Register {
        #[arg(long, conflicts_with_all = ["spec", "frames"])]
        suite: Option<String>,
        #[arg(long, requires = "suite")]
        index: Option<usize>,
        #[arg(long, conflicts_with = "frames")]
        spec: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        frames: Vec<PathBuf>,
        /// Ground-truth poses for descriptor input.
        #[arg(long, requires = "frames")]
        gt: Option<PathBuf>,
    },
    /// Evaluate predicted poses against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Aggregate report files into a text table and CSV.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Entries probed per tensor of the full motion loss.
        #[arg(long, default_value_t = 1)]
        per_leaf: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    let mut flags = Vec::new();
    if let Some(s) = c.seed {
        flags.push(format!("seed={s}"));
    }
    for (k, v) in [("profile", &c.profile), ("graph", &c.graph), ("out", &c.out)] {
        if let Some(v) = v {
            flags.push(format!("{k}={}", serde_json::to_string(v)?));
        }
    }
    if c.dump_intermediates {
        flags.push("dump_intermediates=true".into());
    }
    cfg.apply_overrides(&flags)?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("spec.json"), &scene.spec)?;
    scene.graph.save(&dir.join("graph.json"))?;
    save_poses(&dir.join("gt_poses.json"), &scene.gt)?;
    write_json(&dir.join("outliers.json"), &scene.outlier)?;
    Ok(())
}

fn suite_specs(suite: &str, index: Option<usize>) -> Result<Vec<(String, SceneSpec)>> {
    let specs = gen_benchmark_suite(suite)?;
    let named: Vec<(String, SceneSpec)> =
        specs.into_iter().enumerate().map(|(i, s)| (format!("{suite}_{i:03}"), s)).collect();
    match index {
        None => Ok(named),
        Some(i) if i < named.len() => Ok(vec![named[i].clone()]),
        Some(i) => bail!("suite {suite} has {} scenes, index {i} out of range", named.len()),
    }
}

fn cmd_synth(cfg: &RunConfig, suite: &str, index: Option<usize>, stats: Option<usize>) -> Result<()> {
    let out = Path::new(&cfg.out);
    let specs = suite_specs(suite, index)?;
    specs.par_iter().try_for_each(|(name, spec)| -> Result<()> {
        let scene = gen_scene(spec)?;
        write_scene(&out.join(name), &scene)
    })?;
    println!("wrote {} scenes to {}", specs.len(), out.display());
    if let Some(n) = stats {
        let data = gen_stats_dataset_with(n, cfg.overlap_train.seed, &cfg.ecdf_thresholds);
        write_json(&out.join("stats.json"), &data)?;
        println!("wrote {n} statistics samples");
    }
    Ok(())
}

fn loss_csv(path: &Path, rows: impl IntoIterator<Item = (usize, f64, f64)>) -> Result<()> {
    let mut s = String::from("step,loss,lr\n");
    for (step, loss, lr) in rows {
        s.push_str(&format!("{step},{loss},{lr}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_train_overlap(cfg: &RunConfig) -> Result<()> {
    let out = Path::new(&cfg.out);
    fs::create_dir_all(out)?;
    let t0 = Instant::now();
    let data = gen_stats_dataset_with(cfg.overlap_samples, cfg.overlap_train.seed, &cfg.ecdf_thresholds);
    let (net, log) = train_overlap(&data, &cfg.overlap_train)?;
    net.save(Path::new(&cfg.overlap_checkpoint))?;
    loss_csv(
        &out.join("overlap_loss.csv"),
        log.iter().enumerate().map(|(i, &(l, lr))| (i, l, lr)),
    )?;
    println!(
        "trained overlap net: {} steps, final loss {:.5}, {:.1}s -> {}",
        log.len(),
        log.last().map_or(f64::NAN, |l| l.0),
        t0.elapsed().as_secs_f64(),
        cfg.overlap_checkpoint
    );
    Ok(())
}

/// Keeps the CSV rows of steps before `step` so a resumed run appends.
fn truncate_csv(path: &Path, step: usize) -> Result<String> {
    let mut kept = String::from("step,loss,lr\n");
    if let Ok(s) = fs::read_to_string(path) {
        for line in s.lines().skip(1) {
            let ok = line.split(',').next().and_then(|f| f.parse::<usize>().ok()).is_some_and(|s| s < step);
            if ok {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    Ok(kept)
}

fn cmd_train_sync(cfg: &RunConfig, resume: bool, every: usize, max_steps: Option<usize>) -> Result<()> {
    let out = Path::new(&cfg.out);
    fs::create_dir_all(out)?;
    let state = out.join("sync_train_state.mdgd");
    let csv = out.join("sync_loss.csv");
    let tc = cfg.sync_train_config();
    let mut trainer = if resume {
        SyncTrainer::resume(tc, &state).with_context(|| format!("resuming from {}", state.display()))?
    } else {
        SyncTrainer::new(tc)?
    };
    let mut rows = truncate_csv(&csv, trainer.step())?;
    let total = tc.total_steps();
    let budget = max_steps.unwrap_or(usize::MAX);
    let t0 = Instant::now();
    let mut done = 0;
    while !trainer.done() && done < budget {
        let chunk = every.max(1).min(budget - done);
        let logs = trainer.run(chunk, |_| {})?;
        done += logs.len();
        for l in &logs {
            rows.push_str(&format!("{},{},{}\n", l.step, l.loss, l.lr));
        }
        trainer.save(&state)?;
        fs::write(&csv, &rows)?;
        if let Some(l) = logs.last() {
            println!(
                "step {}/{} loss {:.4} (rot {:.4}, trans {:.4}) lr {:.2e} {:.0}s",
                l.step + 1,
                total,
                l.loss,
                l.rot,
                l.trans,
                l.lr,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    trainer.net.save(Path::new(&cfg.sync_checkpoint))?;
    println!("saved {} at step {}", cfg.sync_checkpoint, trainer.step());
    Ok(())
}

fn register_scene(models: &Models, cfg: &RunConfig, name: &str, spec: &SceneSpec) -> Result<EvalReport> {
    let scene = gen_scene(spec).context("stage synth")?;
    let out = run_pipeline(Input::Synthetic(&scene), models, cfg)?;
    let dir = Path::new(&cfg.out).join(name);
    let r = write_outputs(&out, Some(&scene.gt), cfg, &dir)?;
    Ok(r.expect("ground truth given"))
}

fn cmd_register(
    cfg: &RunConfig,
    suite: Option<&str>,
    index: Option<usize>,
    spec: Option<&Path>,
    frames: &[PathBuf],
    gt: Option<&Path>,
) -> Result<()> {
    let models = Models::load(cfg)?;
    if !frames.is_empty() {
        let sets = frames
            .iter()
            .map(|p| DescriptorSet::load(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let gt = gt.map(load_poses).transpose()?;
        let out = run_pipeline(Input::Descriptors(&sets), &models, cfg)?;
        let r = write_outputs(&out, gt.as_deref(), cfg, Path::new(&cfg.out))?;
        println!("registered {} frames ({} pairs dropped)", sets.len(), out.dropped.len());
        if let Some(r) = r {
            println!("RR {:.4}  mean re {:.3} deg  mean te {:.4} m", r.rr, r.mean_re_deg, r.mean_te);
        }
        return Ok(());
    }
    let specs = match (suite, spec) {
        (Some(s), _) => suite_specs(s, index)?,
        (None, Some(p)) => {
            let s: SceneSpec = serde_json::from_str(&fs::read_to_string(p)?)?;
            vec![(p.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned()), s)]
        }
        (None, None) => bail!("register needs --suite, --spec or --frames"),
    };
    // rayon keeps output order, so reports do not depend on scheduling
    let reports: Vec<(String, EvalReport)> = specs
        .par_iter()
        .map(|(name, spec)| register_scene(&models, cfg, name, spec).map(|r| (name.clone(), r)))
        .collect::<Result<_>>()?;
    let summary = aggregate(&reports)?;
    print!("{}", summary.to_text());
    fs::write(Path::new(&cfg.out).join("summary.csv"), summary.to_csv())?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<()> {
    let r = evaluate(&load_poses(pred)?, &load_poses(gt)?, thresholds(cfg)).context("stage evaluate")?;
    let mut s = serde_json::to_string_pretty(&r)?;
    s.push('\n');
    std::io::stdout().write_all(s.as_bytes())?;
    Ok(())
}

fn cmd_report(files: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let reports = files
        .iter()
        .map(|p| -> Result<(String, EvalReport)> {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .filter(|_| p.file_name().is_some_and(|f| f == "report.json"))
                .or(p.file_stem())
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = aggregate(&reports)?;
    print!("{}", s.to_text());
    if let Some(p) = csv {
        fs::write(p, s.to_csv())?;
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64, per_leaf: usize) -> Result<()> {
    let t0 = Instant::now();
    let cases = run_suite(0..seeds, Some(per_leaf))?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passes();
        failed += usize::from(!ok);
        println!(
            "{} {:<24} seed {:>2}  checked {:>5}  max rel err {:.2e}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.seed,
            c.report.checked,
            c.report.max_rel_err
        );
    }
    println!("{} cases, {} failed, {:.1}s", cases.len(), failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let res = load_config(&cli.common).and_then(|cfg| {
        if matches!(cli.cmd, Cmd::TrainOverlap | Cmd::TrainSync { .. } | Cmd::Register { .. }) {
            // record the resolved config next to the outputs
            fs::create_dir_all(&cfg.out)?;
            cfg.save(&Path::new(&cfg.out).join("config.json"))?;
        }
        run(&cli.cmd, &cfg)
    });
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: &Cmd, cfg: &RunConfig) -> Result<()> {
    let cfg = cfg.clone();
    match cmd {
        Cmd::Synth {
            suite,
            index,
            stats_samples,
        } => cmd_synth(&cfg, suite, *index, *stats_samples),
        Cmd::TrainOverlap => cmd_train_overlap(&cfg),
        Cmd::TrainSync {
            resume,
            checkpoint_every,
            max_steps,
        } => cmd_train_sync(&cfg, *resume, *checkpoint_every, *max_steps),
        Cmd::Register {
            suite,
            index,
            spec,
            frames,
            gt,
        } => cmd_register(&cfg, suite.as_deref(), *index, spec.as_deref(), frames, gt.as_deref()),
        Cmd::Evaluate { pred, gt } => cmd_evaluate(&cfg, pred, gt),
        Cmd::Report { reports, csv } => cmd_report(reports, csv.as_deref()),
        Cmd::Gradcheck { seeds, per_leaf } => cmd_gradcheck(*seeds, *per_leaf),
    }
}

//! Command-line surface: five subcommands covering data generation,
//! training, evaluation, gate reporting, and gradient checking. Every
//! command resolves its seed through the same ladder (flag, then config
//! file, then CPL_SEED, then 0) and writes byte-identical primary outputs
//! for identical flags and inputs. Exit codes: 0 success, 2 configuration
//! or argument error, 3 numeric failure, 4 I/O or file-format failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, EvalOptions, GateLogEntry};
use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::pixmap;
use crate::rawio;
use crate::seeds;
use crate::synth::{self, DegradationSpec, SampleTriple, Task};
use crate::trainer::{self, MetricsLine, Trainer};

#[derive(Parser)]
#[command(
    name = "cpl",
    version,
    about = "All-in-one image restoration with sparse prompt routing and contrastive prompt learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize degraded/clean image pairs with a JSON-lines manifest
    GenData(GenDataArgs),
    /// Train the prompted restoration model, writing checkpoints and metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out samples, optionally under forced
    /// wrong-prompt overrides
    Eval(EvalArgs),
    /// Summarize a gate log into entropy tables and selection maps
    GateReport(GateReportArgs),
    /// Validate analytic gradients against central differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration file (JSON; documented defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for sample tensors and manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Pairs to synthesize, assigned to tasks round-robin (default:
    /// the config's gen.count)
    #[arg(long)]
    count: Option<usize>,
    /// Root seed (overrides the config file and CPL_SEED)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (JSON; documented defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; it carries its configuration and seed
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total optimizer steps, overriding the configured value
    #[arg(long)]
    steps: Option<u64>,
    /// Root seed (overrides the config file and CPL_SEED)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate a generated dataset directory instead of synthesizing
    /// held-out samples
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also restore under every forced wrong-expert override, emitting a
    /// forced-PSNR table and residual maps
    #[arg(long)]
    mismatch: bool,
    /// Output directory for the report, gate log, and pixmaps
    #[arg(long)]
    out: PathBuf,
    /// Held-out samples per task (default: the config's eval setting)
    #[arg(long)]
    samples_per_task: Option<usize>,
    /// Run configuration file supplying eval defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reseed the synthesized held-out stream (default: checkpoint seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GateReportArgs {
    /// Gate log to summarize (JSON lines, one decision per line)
    #[arg(long)]
    log: PathBuf,
    /// Output directory for entropy.csv and selection maps
    #[arg(long)]
    out: PathBuf,
    /// Rows per selection map (default: the smallest per-task count)
    #[arg(long)]
    samples_per_task: Option<usize>,
    /// Accepted for interface uniformity; this command is a deterministic
    /// file transform
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Scope {
    /// Rules whose reduced check is degree ≤ 2: exact to roundoff
    Linear,
    /// Every differentiation rule at the general tolerance
    Op,
    /// The whole training loss, one parameter coordinate at a time
    End2end,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Which gradients to check
    #[arg(long, value_enum)]
    scope: Scope,
    /// end2end: independently seeded model/data trials
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// end2end: parameter coordinates probed per trial
    #[arg(long, default_value_t = 6)]
    coords_per_trial: usize,
    /// linear/op: random points checked per rule
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Root seed (overrides CPL_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one rule's analytic gradient first — a negative control
    /// proving the checker fails loudly
    #[arg(long, hide = true)]
    corrupt: bool,
}

/// One line of manifest.jsonl: where a sample pair lives and how the
/// degraded half was produced.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    index: usize,
    task: Task,
    spec: DegradationSpec,
    degraded: String,
    clean: String,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // --help and --version also land here; clap picks the stream and
        // reports exit 0 for them, 2 for genuine usage errors
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::GateReport(a) => cmd_gate_report(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Config(format!("serializing {what}: {e}")))
}

fn to_json_pretty<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Config(format!("serializing {what}: {e}")))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = config::load_run_config(a.config.as_deref())?;
    let seed = config::resolve_seed(&mut cfg, a.seed)?;
    let count = a.count.unwrap_or(cfg.gen.count);
    create_dir(&a.out)?;
    let mut manifest = String::new();
    for i in 0..count {
        let task = cfg.train.tasks[i % cfg.train.tasks.len()];
        let sample = synth::make_batch(
            &[task],
            1,
            cfg.train.crop,
            seeds::derive1(seed, "gen", i as u64),
        )?
        .pop()
        .expect("make_batch returns batch_size samples");
        let degraded = format!("sample_{i:05}_degraded.tens");
        let clean = format!("sample_{i:05}_clean.tens");
        rawio::write_tensor(&a.out.join(&degraded), &sample.degraded)?;
        rawio::write_tensor(&a.out.join(&clean), &sample.clean)?;
        let entry = ManifestEntry { index: i, task, spec: sample.spec, degraded, clean };
        manifest.push_str(&to_json(&entry, "manifest entry")?);
        manifest.push('\n');
    }
    write_bytes(&a.out.join("manifest.jsonl"), manifest.as_bytes())?;
    config::write_effective_config(&cfg, &a.out)?;
    println!("wrote {count} sample pairs and manifest.jsonl to {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut t, cfg) = match &a.resume {
        Some(ckpt) => {
            if a.config.is_some() || a.seed.is_some() {
                return Err(Error::InvalidArgument(
                    "--resume carries its own configuration and seed; drop --config/--seed"
                        .into(),
                ));
            }
            let mut t = checkpoint::load(ckpt)?;
            if let Some(steps) = a.steps {
                t.cfg.steps = steps;
                t.cfg.validate()?;
            }
            let cfg =
                RunConfig { out_dir: a.out.clone(), train: t.cfg.clone(), ..RunConfig::default() };
            (t, cfg)
        }
        None => {
            let mut cfg = config::load_run_config(a.config.as_deref())?;
            config::resolve_seed(&mut cfg, a.seed)?;
            if let Some(steps) = a.steps {
                cfg.train.steps = steps;
            }
            if a.out.is_some() {
                cfg.out_dir = a.out.clone();
            }
            cfg.validate()?;
            (Trainer::init(cfg.train.clone())?, cfg)
        }
    };
    let out = cfg.out_dir.clone().ok_or_else(|| {
        Error::Config("no output directory: pass --out or set out_dir in the config".into())
    })?;
    create_dir(&out)?;
    config::write_effective_config(&cfg, &out)?;

    // A fresh run truncates metrics.jsonl; a resumed run keeps the lines up
    // to the checkpoint's step and appends from there, so an interrupted
    // run's log ends up byte-identical to an uninterrupted one.
    let metrics_path = out.join("metrics.jsonl");
    let mut kept = String::new();
    if a.resume.is_some() && metrics_path.exists() {
        for (ln, line) in read_to_string(&metrics_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: MetricsLine = serde_json::from_str(line).map_err(|e| Error::FileFormat {
                path: metrics_path.display().to_string(),
                detail: format!("line {}: {e}", ln + 1),
            })?;
            if parsed.step <= t.step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    metrics_file
        .write_all(kept.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;

    let start = t.step;
    t.train_loop(
        |line| {
            let mut text = to_json(line, "metrics line")?;
            text.push('\n');
            metrics_file
                .write_all(text.as_bytes())
                .and_then(|()| metrics_file.flush())
                .map_err(|e| Error::io(format!("appending {}", metrics_path.display()), e))?;
            println!(
                "step {:>6}  total {:.6}  pixel {:.6}  entropy {:.3} bits",
                line.step, line.total, line.l_pixel, line.mean_entropy_bits
            );
            Ok(())
        },
        |tr| checkpoint::save(tr, &out.join(format!("ckpt_step{:06}.ckpt", tr.step))),
    )?;
    println!(
        "trained {} steps (now at {}); outputs in {}",
        t.step - start,
        t.step,
        out.display()
    );
    Ok(())
}

/// Read a generated dataset back as per-task sample groups, sorted by task
/// name. Manifest lines are strict: unknown fields, task/parameter
/// disagreements, or unreadable tensors all fail loudly.
fn load_dataset(dir: &Path) -> Result<Vec<(Task, Vec<SampleTriple>)>> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = read_to_string(&manifest_path)?;
    let mut groups: BTreeMap<&'static str, (Task, Vec<SampleTriple>)> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::FileFormat {
            path: manifest_path.display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?;
        if entry.spec.task() != entry.task {
            return Err(Error::FileFormat {
                path: manifest_path.display().to_string(),
                detail: format!(
                    "line {}: task {} does not match the degradation parameters",
                    ln + 1,
                    entry.task.name()
                ),
            });
        }
        let degraded = rawio::read_tensor(&dir.join(&entry.degraded))?;
        let clean = rawio::read_tensor(&dir.join(&entry.clean))?;
        groups
            .entry(entry.task.name())
            .or_insert_with(|| (entry.task, Vec::new()))
            .1
            .push(SampleTriple { degraded, clean, task: entry.task, spec: entry.spec });
    }
    if groups.is_empty() {
        return Err(Error::FileFormat {
            path: manifest_path.display().to_string(),
            detail: "empty manifest".into(),
        });
    }
    Ok(groups.into_values().collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut t = checkpoint::load(&a.checkpoint)?;
    if let Some(s) = a.seed {
        t.cfg.seed = Some(s);
    }
    let file_cfg = config::load_run_config(a.config.as_deref())?;
    let opts = EvalOptions {
        samples_per_task: a.samples_per_task.unwrap_or(file_cfg.eval.samples_per_task),
        mismatch: a.mismatch || file_cfg.eval.mismatch,
    };
    let (report, gate_log, residuals) = match &a.data {
        None => analysis::evaluate(&t, &opts)?,
        Some(dir) => analysis::evaluate_on(&t, &load_dataset(dir)?, &opts)?,
    };

    create_dir(&a.out)?;
    write_bytes(
        &a.out.join("eval_report.json"),
        to_json_pretty(&report, "eval report")?.as_bytes(),
    )?;
    let mut log_text = String::new();
    for entry in &gate_log {
        log_text.push_str(&to_json(entry, "gate log entry")?);
        log_text.push('\n');
    }
    write_bytes(&a.out.join("gate_log.jsonl"), log_text.as_bytes())?;

    let maps = analysis::selection_map(&gate_log, opts.samples_per_task, t.bank.n)?;
    for (ti, task) in maps.tasks.iter().enumerate() {
        pixmap::write_pgm(
            &a.out.join(format!("selection_{task}.pgm")),
            maps.n_experts,
            maps.samples_per_task,
            &maps.grids[ti],
        )?;
    }
    for rs in &residuals {
        let (h, w) = (rs.matched.shape()[1], rs.matched.shape()[2]);
        pixmap::write_ppm(
            &a.out.join(format!("matched_{}.ppm", rs.task.name())),
            w,
            h,
            &pixmap::image_to_rgb(&rs.matched)?,
        )?;
        for (j, img) in &rs.residuals {
            pixmap::write_ppm(
                &a.out.join(format!("residual_{}_expert{j}.ppm", rs.task.name())),
                w,
                h,
                &pixmap::image_to_rgb(img)?,
            )?;
        }
    }

    for te in &report.tasks {
        println!(
            "{}: matched {:.2} dB (ssim {:.3}), degraded {:.2} dB, entropy {:.3} bits, \
             expert {} at {:.0}%",
            te.task,
            te.psnr_matched_mean,
            te.ssim_matched_mean,
            te.psnr_degraded_mean,
            te.entropy_bits_mean,
            te.dominant_expert,
            te.dominant_frequency * 100.0
        );
    }
    println!("report written to {}", a.out.join("eval_report.json").display());
    Ok(())
}

fn cmd_gate_report(a: GateReportArgs) -> Result<()> {
    let _ = a.seed; // deterministic transform; the flag exists for uniformity
    let text = read_to_string(&a.log)?;
    let mut log = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: GateLogEntry = serde_json::from_str(line).map_err(|e| Error::FileFormat {
            path: a.log.display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?;
        log.push(entry);
    }
    if log.is_empty() {
        return Err(Error::InvalidArgument(format!("gate log {} has no entries", a.log.display())));
    }

    let stats = analysis::entropy_report(&log)?;
    let mut csv = String::from("task,count,mean_bits,std_bits\n");
    for (task, s) in &stats {
        csv.push_str(&format!("{task},{},{},{}\n", s.count, s.mean_bits, s.std_bits));
    }
    create_dir(&a.out)?;
    write_bytes(&a.out.join("entropy.csv"), csv.as_bytes())?;

    let n_experts = log[0].dense_probs.len();
    let spt = a
        .samples_per_task
        .unwrap_or_else(|| stats.values().map(|s| s.count).min().expect("stats is non-empty"));
    let maps = analysis::selection_map(&log, spt, n_experts)?;
    for (ti, task) in maps.tasks.iter().enumerate() {
        pixmap::write_pgm(
            &a.out.join(format!("selection_{task}.pgm")),
            maps.n_experts,
            maps.samples_per_task,
            &maps.grids[ti],
        )?;
    }
    for (task, s) in &stats {
        println!("{task}: mean {:.4} bits (sigma {:.4}) over {} decisions", s.mean_bits, s.std_bits, s.count);
    }
    Ok(())
}

fn resolve_plain_seed(cli_seed: Option<u64>) -> Result<u64> {
    match cli_seed {
        Some(s) => Ok(s),
        None => Ok(config::env_seed()?.unwrap_or(0)),
    }
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let seed = resolve_plain_seed(a.seed)?;
    let rows: Vec<(String, GradCheckReport)> = if a.corrupt {
        vec![("corrupted-fixture".into(), gradcheck::corrupted_rule_report(a.points, seed)?)]
    } else {
        match a.scope {
            Scope::Linear => gradcheck::linear_op_sweeps(a.points, seed)?,
            Scope::Op => gradcheck::standard_op_sweeps(a.points, seed)?,
            Scope::End2end => vec![(
                "end2end".into(),
                trainer::end_to_end_gradcheck(a.trials, a.coords_per_trial, seed)?,
            )],
        }
    };
    let mut worst: (&str, f64) = ("", 0.0);
    for (name, rep) in &rows {
        println!(
            "{name:<16} worst {:.3e}  ({} checked, {} kink-skipped)",
            rep.max_rel_err, rep.checked, rep.skipped_kinks
        );
        if rep.max_rel_err >= worst.1 {
            worst = (name, rep.max_rel_err);
        }
    }
    if worst.1 <= gradcheck::TOLERANCE {
        println!("PASS: worst relative error {:.3e} within {:.0e}", worst.1, gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Error::GradCheckFailed { op: worst.0.to_string(), worst: worst.1 })
    }
}

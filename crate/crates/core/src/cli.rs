//! The `moeforge` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 format or validation error,
//! 3 simulated deadlock, 4 I/O failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::collective::{build_step_program, explain, simulate};
use crate::converter::{merge, shard, ShardSet};
use crate::error::{Error, Result};
use crate::layout::{plan_layout, LayoutPlan, ModelConfig, ParallelConfig};
use crate::metrics::{
    auc, batch_reward, binary_metrics, confusion, ndcg_at_k, recall_at_k, round2, Label,
    RankedList, RewardBatch, Shaping,
};
use crate::multitask::{read_traces, schedule, TaskWeightRole, WeightingConfig};
use crate::synthetic::synthetic_checkpoint;
use crate::tensor_store::{read_checkpoint, write_atomic, write_checkpoint, Dtype};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DEADLOCK: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const THREADS_ENV: &str = "MOEFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "moeforge",
    version,
    about = "Layout, sharding, simulation and metric tooling for hybrid dense/MoE training"
)]
pub struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub dense_layers: usize,
    #[arg(long)]
    pub experts: usize,
    #[arg(long)]
    pub no_shared_expert: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        if self.dense_layers > self.layers {
            return Err(Error::InvalidInput(format!(
                "--dense-layers {} exceeds --layers {}",
                self.dense_layers, self.layers
            )));
        }
        Ok(ModelConfig {
            num_layers: self.layers,
            num_dense_layers: self.dense_layers,
            num_routed_experts: self.experts,
            has_shared_expert: !self.no_shared_expert,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a pipeline/expert layout and write it as JSON.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pp: usize,
        #[arg(long)]
        width: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic release checkpoint.
    Synth {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "fp8_e4m3")]
        dtype: Dtype,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Cast every tensor of a checkpoint to another dtype.
    Cast {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        dtype: Dtype,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Split a release checkpoint into per-rank BF16 shards.
    Shard {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Merge per-rank shards back into one release checkpoint.
    Merge {
        /// Shard directory or its manifest.json.
        #[arg(long)]
        shards: PathBuf,
        #[arg(long, default_value = "bf16")]
        dtype: Dtype,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Simulate one optimizer step's collectives for a plan.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        /// Give dense-only stages a stub MoE optimizer.
        #[arg(long)]
        stub: bool,
    },
    /// Instance and task weights from NLL traces.
    Schedule {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        wmin: f64,
        #[arg(long, default_value_t = 10.0)]
        wmax: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value = "k-1")]
        prev: String,
        #[arg(long, default_value = "k")]
        curr: String,
        /// JSON object mapping task to validation metric in [0, 1].
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RoleArg::Multiplier)]
        role: RoleArg,
        /// Estimate progress from pooled mini-batches of this size.
        #[arg(long)]
        minibatch: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Binary classification metrics from a CSV of (gold, pred) or (score, gold).
    Metrics {
        #[arg(short, long)]
        input: PathBuf,
        /// Rows are (score, gold) instead of (gold, pred).
        #[arg(long)]
        scored: bool,
        /// Scores at or above this predict the positive class.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "non-defect")]
        positive: Label,
    },
    /// Recall@K and NDCG@K for a JSON ranked list.
    RankMetrics {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long, default_values_t = vec![10])]
        k: Vec<usize>,
    },
    /// Batch reward from a metric gain.
    Reward {
        #[arg(long, allow_hyphen_values = true)]
        m_with: f64,
        #[arg(long, allow_hyphen_values = true)]
        m_base: f64,
        #[arg(long, default_value = "identity")]
        shaping: Shaping,
        /// JSON batch `{"task": ..., "samples": [[input, output], ...]}`.
        #[arg(long)]
        batch: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RoleArg {
    Multiplier,
    Sampling,
}

impl From<RoleArg> for TaskWeightRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Multiplier => TaskWeightRole::LossMultiplier,
            RoleArg::Sampling => TaskWeightRole::Sampling,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return;
    };
    match raw.trim().parse::<usize>() {
        // 0 keeps rayon's default
        Ok(0) => {}
        Ok(n) => {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        Err(_) => eprintln!("warning: ignoring {THREADS_ENV}={raw}"),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_plan(path: &Path) -> Result<LayoutPlan> {
    LayoutPlan::from_json(&read_to_string(path)?)
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

/// Runs a parsed command, writing reports to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Plan {
            model,
            pp,
            width,
            output,
        } => {
            let plan = plan_layout(
                model.config()?,
                ParallelConfig {
                    pp: *pp,
                    width: *width,
                },
            )?;
            let text = plan.to_json()? + "\n";
            match output {
                Some(path) => {
                    write_atomic(path, text.as_bytes())?;
                    if cli.json {
                        say(out, text.trim_end())?;
                    } else {
                        say(out, plan_table(&plan))?;
                    }
                }
                None if cli.json => say(out, text.trim_end())?,
                None => say(out, plan_table(&plan))?,
            }
        }
        Command::Synth {
            model,
            dtype,
            seed,
            output,
        } => {
            let c = synthetic_checkpoint(&model.config()?, *dtype, *seed);
            write_checkpoint(&c, output)?;
            if cli.json {
                print_json(
                    out,
                    &serde_json::json!({"tensors": c.len(), "dtype": dtype}),
                )?;
            } else {
                say(
                    out,
                    format!(
                        "wrote {} tensors ({dtype}) to {}",
                        c.len(),
                        output.display()
                    ),
                )?;
            }
        }
        Command::Cast {
            input,
            dtype,
            output,
        } => {
            let c = read_checkpoint(input)?.cast(*dtype)?;
            write_checkpoint(&c, output)?;
            if cli.json {
                print_json(
                    out,
                    &serde_json::json!({"tensors": c.len(), "dtype": dtype}),
                )?;
            } else {
                say(out, format!("cast {} tensors to {dtype}", c.len()))?;
            }
        }
        Command::Shard {
            input,
            plan,
            out_dir,
        } => {
            let plan = read_plan(plan)?;
            let c = read_checkpoint(input)?;
            let set = shard(&c, &plan)?;
            set.write_to_dir(out_dir)?;
            if cli.json {
                print_json(out, &set.manifest())?;
            } else {
                say(
                    out,
                    format!(
                        "wrote {} shards for {} tensors to {}",
                        set.shards.len(),
                        c.len(),
                        out_dir.display()
                    ),
                )?;
            }
        }
        Command::Merge {
            shards,
            dtype,
            output,
        } => {
            let set = ShardSet::read(shards)?;
            let c = merge(&set, *dtype)?;
            write_checkpoint(&c, output)?;
            if cli.json {
                print_json(
                    out,
                    &serde_json::json!({"tensors": c.len(), "dtype": dtype}),
                )?;
            } else {
                say(
                    out,
                    format!(
                        "merged {} shards into {} tensors ({dtype})",
                        set.shards.len(),
                        c.len()
                    ),
                )?;
            }
        }
        Command::Simulate { plan, stub } => {
            let plan = read_plan(plan)?;
            let step = build_step_program(&plan, *stub);
            let outcome = simulate(&step.groups, &step.programs)?;
            if cli.json {
                print_json(out, &outcome)?;
            } else {
                say(out, explain(&outcome))?;
            }
            if !outcome.is_completed() {
                return Ok(EXIT_DEADLOCK);
            }
        }
        Command::Schedule {
            trace,
            beta,
            wmin,
            wmax,
            alpha,
            prev,
            curr,
            metrics,
            role,
            minibatch,
            output,
        } => {
            let cfg = WeightingConfig {
                beta: *beta,
                w_min: *wmin,
                w_max: *wmax,
                alpha: *alpha,
            };
            cfg.validate()?;
            let metrics: Option<BTreeMap<String, f64>> = match metrics {
                Some(p) => Some(serde_json::from_str(&read_to_string(p)?)?),
                None => None,
            };
            let file = fs::File::open(trace).map_err(|e| Error::io(trace, e))?;
            let samples = read_traces(BufReader::new(file))?;
            let report = schedule(
                &samples,
                prev,
                curr,
                metrics.as_ref(),
                &cfg,
                (*role).into(),
                *minibatch,
            )?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match output {
                Some(path) => {
                    write_atomic(path, text.as_bytes())?;
                    say(
                        out,
                        format!(
                            "wrote weights for {} samples to {}",
                            report.samples.len(),
                            path.display()
                        ),
                    )?;
                }
                None => say(out, text.trim_end())?,
            }
        }
        Command::Metrics {
            input,
            scored,
            threshold,
            positive,
        } => {
            let report = classification_report(input, *scored, *threshold, *positive)?;
            if cli.json {
                print_json(out, &report)?;
            } else {
                say(out, metrics_table(&report))?;
            }
        }
        Command::RankMetrics { input, k } => {
            let text = read_to_string(input)?;
            let list: RankedList = serde_json::from_str(&text)?;
            let mut rows = Vec::new();
            for &k in k {
                rows.push(serde_json::json!({
                    "k": k,
                    "recall": recall_at_k(&list, k)?,
                    "ndcg": ndcg_at_k(&list, k)?,
                }));
            }
            if cli.json {
                print_json(out, &rows)?;
            } else {
                say(out, format!("{:>6}  {:>8}  {:>8}", "k", "recall", "ndcg"))?;
                for r in rows {
                    say(
                        out,
                        format!(
                            "{:>6}  {:>8.4}  {:>8.4}",
                            r["k"],
                            r["recall"].as_f64().unwrap_or(f64::NAN),
                            r["ndcg"].as_f64().unwrap_or(f64::NAN)
                        ),
                    )?;
                }
            }
        }
        Command::Reward {
            m_with,
            m_base,
            shaping,
            batch,
        } => {
            let batch = match batch {
                Some(path) => {
                    #[derive(serde::Deserialize)]
                    struct BatchFile {
                        task: String,
                        samples: Vec<(String, String)>,
                    }
                    let f: BatchFile = serde_json::from_str(&read_to_string(path)?)?;
                    RewardBatch::new(f.task, f.samples)
                }
                None => RewardBatch::new("batch", std::iter::empty()),
            };
            let rewarded = batch_reward(*m_with, *m_base, *shaping, batch);
            if cli.json {
                print_json(out, &rewarded)?;
            } else {
                say(
                    out,
                    format!(
                        "reward {} for {} samples",
                        rewarded.reward.unwrap_or_default(),
                        rewarded.samples.len()
                    ),
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn plan_table(plan: &LayoutPlan) -> String {
    let mut lines = vec![format!(
        "{} stages x {} ranks = {} ranks; {} layers ({} dense), {} routed experts",
        plan.parallel.pp,
        plan.parallel.width,
        plan.total_ranks(),
        plan.model.num_layers,
        plan.model.num_dense_layers,
        plan.model.num_routed_experts
    )];
    lines.push(format!("{:>5}  {:>9}  {}", "stage", "layers", "role"));
    for (i, span) in plan.stage_layers.iter().enumerate() {
        let mut role = vec![if plan.is_moe_stage(i) { "moe" } else { "dense" }];
        if i == plan.embedding_stage {
            role.push("embedding");
        }
        if i == plan.head_stage {
            role.push("norm+head");
        }
        lines.push(format!(
            "{:>5}  {:>9}  {}",
            i,
            format!("{}..{}", span.start, span.end),
            role.join(",")
        ));
    }
    lines.push(format!("{:>5}  {:>9}", "local", "experts"));
    for (i, r) in plan.expert_ranges.iter().enumerate() {
        lines.push(format!(
            "{:>5}  {:>9}",
            i,
            format!("{}..{}", r.start, r.end)
        ));
    }
    lines.join("\n")
}

#[derive(Debug, Serialize)]
pub struct ClassificationReport {
    pub counts: crate::metrics::ConfusionCounts,
    pub metrics: crate::metrics::BinaryMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

fn classification_report(
    path: &Path,
    scored: bool,
    threshold: f64,
    positive: Label,
) -> Result<ClassificationReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let negative = match positive {
        Label::Defect => Label::NonDefect,
        Label::NonDefect => Label::Defect,
    };
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut scores = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.len() != 2 {
            return Err(Error::Format(format!(
                "row {}: expected 2 columns, got {}",
                i + 2,
                row.len()
            )));
        }
        if scored {
            let score: f64 = row[0]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad score `{}`", i + 2, &row[0])))?;
            let g: Label = row[1].parse()?;
            gold.push(g);
            pred.push(if score >= threshold {
                positive
            } else {
                negative
            });
            scores.push((score, g == positive));
        } else {
            gold.push(row[0].parse()?);
            pred.push(row[1].parse()?);
        }
    }
    let counts = confusion(&gold, &pred, positive)?;
    let mut metrics = binary_metrics(&counts)?;
    if positive == Label::Defect {
        // rates always describe the defect class
        let total = counts.total() as f64;
        metrics.defect_rate = 100.0 * (counts.tp + counts.fn_) as f64 / total;
        metrics.model_defect_rate = 100.0 * (counts.tp + counts.fp) as f64 / total;
    }
    Ok(ClassificationReport {
        counts,
        metrics: metrics.rounded(),
        auc: if scored { Some(auc(&scores)?) } else { None },
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

fn metrics_table(r: &ClassificationReport) -> String {
    let m = &r.metrics;
    let mut lines = vec![
        format!(
            "tp={} fp={} tn={} fn={}",
            r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_
        ),
        format!("{:<18} {:>7.2}", "ACC", m.acc),
        format!("{:<18} {:>7.2}", "BACC", m.bacc),
        format!("{:<18} {:>7.2}", "PosAcc", m.pos_acc),
        format!("{:<18} {:>7.2}", "PosPrec", m.pos_prec),
        format!("{:<18} {:>7.2}", "PosF1", m.pos_f1),
        format!("{:<18} {:>7.2}", "NegAcc", m.neg_acc),
        format!("{:<18} {:>7.2}", "NegPrec", m.neg_prec),
        format!("{:<18} {:>7.2}", "NegF1", m.neg_f1),
        format!("{:<18} {:>7.2}", "DR", m.defect_rate),
        format!("{:<18} {:>7.2}", "Model DR", m.model_defect_rate),
    ];
    if let Some(a) = r.auc {
        lines.push(format!("{:<18} {:>7.2}", "AUC", round2(a * 100.0)));
    }
    lines.join("\n")
}

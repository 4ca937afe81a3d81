//! Command-line front end: `calibrate`, `analyze`, `simulate` and `report`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::analysis::{batch_telemetry, emit_report, mispenalty_rate, read_report, write_mispenalty_table};
use crate::annotated::{parse_annotated_file, write_annotated_file};
use crate::calibration::{baseline_group, calibrate_group, CalibrationConfig};
use crate::error::{Error, Result};
use crate::simulator::{run_experiment, write_outputs, Pipeline, SimConfig};
use crate::trace::{parse_trace_file, RolloutGroup};

pub const THREADS_ENV: &str = "CALIBADV_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "calibadv",
    version,
    about = "Advantage calibration for multi-turn search-agent rollouts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute calibrated advantages for every group of a trace file.
    Calibrate {
        /// Trace file, one group per line.
        input: PathBuf,
        /// Output file: the trace records plus per-step `advantage` and `mask_tokens`.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Mis-penalization table and aggregate telemetry for traces and their assignments.
    Analyze {
        /// Trace file.
        traces: PathBuf,
        /// Assignment file written by `calibrate` (or `simulate`).
        assignments: PathBuf,
        /// Write the mis-penalization table here as CSV.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write the aggregate telemetry row here in the report format.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Train the tabular policy on a synthetic corpus and write telemetry.
    Simulate {
        /// TOML configuration; every key is optional.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory, created when missing.
        #[arg(short, long)]
        out: PathBuf,
        /// Rollouts per group.
        #[arg(long)]
        group_size: Option<usize>,
        /// Groups per policy update.
        #[arg(long)]
        questions_per_batch: Option<usize>,
        /// Questions in the synthetic corpus.
        #[arg(long)]
        n_questions: Option<usize>,
        /// Policy-gradient step size (0 disables learning).
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Number of policy updates.
        #[arg(long)]
        updates: Option<usize>,
        /// Links per question chain.
        #[arg(long)]
        hops: Option<usize>,
        /// Turns allowed beyond hops + 1.
        #[arg(long)]
        extra_turns: Option<usize>,
        /// Distractor documents per question.
        #[arg(long)]
        distractors: Option<usize>,
        /// Softmax temperature.
        #[arg(long)]
        temperature: Option<f64>,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Validate and summarize a telemetry report.
    Report {
        /// Report CSV written by `analyze` or `simulate`.
        input: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
}

/// Flags shared by every subcommand. Unset values keep the configuration
/// default (or the config file value for `simulate`).
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// Rebalance coefficient (> 0) [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Minimum final reward for a rollout to contribute silver documents [default: 0.5]
    #[arg(long)]
    pub correctness_threshold: Option<f64>,
    /// Normalization epsilon [default: 1e-6]
    #[arg(long)]
    pub eps: Option<f64>,
    /// Perplexity above which an output counts as degraded [default: 50]
    #[arg(long)]
    pub ppl_threshold: Option<f64>,
    /// Think-tag tokens supplied by the harness [default: 2]
    #[arg(long)]
    pub think_prefix_tokens: Option<usize>,
    /// Disable soft penalization of intermediate steps.
    #[arg(long)]
    pub no_soft_penalty: bool,
    /// Disable final-step rebalancing.
    #[arg(long)]
    pub no_rebalance: bool,
    /// Disable think-token decoupling.
    #[arg(long)]
    pub no_decouple: bool,
    /// Advantage pipeline: baseline or calibadv [default: calibadv]
    #[arg(long)]
    pub pipeline: Option<Pipeline>,
    /// Random seed (used by `simulate`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonFlags {
    pub fn apply(&self, config: &mut CalibrationConfig) {
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.correctness_threshold {
            config.correctness_threshold = v;
        }
        if let Some(v) = self.eps {
            config.eps = v;
        }
        if let Some(v) = self.ppl_threshold {
            config.ppl_threshold = v;
        }
        if let Some(v) = self.think_prefix_tokens {
            config.think_prefix_tokens = v;
        }
        if self.no_soft_penalty {
            config.enable_soft_penalty = false;
        }
        if self.no_rebalance {
            config.enable_rebalance = false;
        }
        if self.no_decouple {
            config.enable_decouple_think = false;
        }
    }

    pub fn calibration(&self) -> Result<CalibrationConfig> {
        let mut config = CalibrationConfig::default();
        self.apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

/// Exit code for an error: 2 for I/O, 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a pool may already exist when called repeatedly in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return 1;
            }
            let _ = write!(out, "{text}");
            return 0;
        }
    };
    match configure_threads().and_then(|()| execute(cli.command, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn print(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Calibrate {
            input,
            out: path,
            flags,
        } => calibrate(&input, &path, &flags, out),
        Command::Analyze {
            traces,
            assignments,
            table,
            report,
            flags,
        } => analyze(&traces, &assignments, table.as_deref(), report.as_deref(), &flags, out),
        Command::Simulate {
            config,
            out: dir,
            group_size,
            questions_per_batch,
            n_questions,
            learning_rate,
            updates,
            hops,
            extra_turns,
            distractors,
            temperature,
            flags,
        } => {
            let mut sim = match config {
                Some(p) => SimConfig::load(p)?,
                None => SimConfig::default(),
            };
            macro_rules! set {
                ($($field:ident),*) => {$(
                    if let Some(v) = $field {
                        sim.$field = v;
                    }
                )*};
            }
            set!(
                group_size,
                questions_per_batch,
                n_questions,
                learning_rate,
                updates,
                hops,
                extra_turns,
                distractors,
                temperature
            );
            flags.apply(&mut sim.calibration);
            if let Some(p) = flags.pipeline {
                sim.pipeline = p;
            }
            if let Some(s) = flags.seed {
                sim.seed = s;
            }
            simulate(&sim, &dir, out)
        }
        Command::Report { input, flags } => {
            flags.calibration()?;
            report(&input, out)
        }
    }
}

fn calibrate(input: &Path, path: &Path, flags: &CommonFlags, out: &mut dyn Write) -> Result<()> {
    let config = flags.calibration()?;
    let groups = parse_trace_file(input)?;
    let pipeline = flags.pipeline.unwrap_or_default();
    let results: Vec<_> = groups
        .par_iter()
        .map(|g| match pipeline {
            Pipeline::Baseline => baseline_group(g, &config),
            Pipeline::Calibadv => calibrate_group(g, &config),
        })
        .collect::<Result<_>>()?;
    let records: Vec<_> = groups
        .iter()
        .cloned()
        .zip(results.iter().map(|c| c.assignment.clone()))
        .collect();
    write_annotated_file(&records, path)?;
    print(out, format_args!("question_id\tG\treward_mean\tsilver_docs\n"))?;
    for (g, c) in groups.iter().zip(&results) {
        let mean = c.rewards.iter().map(|r| r.r_final).sum::<f64>() / c.rewards.len() as f64;
        print(
            out,
            format_args!(
                "{}\t{}\t{:.6}\t{}\n",
                g.question_id,
                g.rollouts.len(),
                mean,
                c.silver.docs.len()
            ),
        )?;
    }
    Ok(())
}

fn check_same_groups(traces: &[RolloutGroup], annotated: &[RolloutGroup]) -> Result<()> {
    if traces.len() != annotated.len() {
        return Err(Error::Shape(format!(
            "{} trace groups but {} assignment records",
            traces.len(),
            annotated.len()
        )));
    }
    for (i, (t, a)) in traces.iter().zip(annotated).enumerate() {
        let same_rollouts = t.rollouts.len() == a.rollouts.len()
            && t.rollouts
                .iter()
                .zip(&a.rollouts)
                .all(|(x, y)| x.rollout_id == y.rollout_id && x.steps.len() == y.steps.len());
        if t.question_id != a.question_id || !same_rollouts {
            return Err(Error::Shape(format!(
                "record {} (`{}`) does not match assignment record for `{}`",
                i + 1,
                t.question_id,
                a.question_id
            )));
        }
    }
    Ok(())
}

fn analyze(
    traces: &Path,
    assignments: &Path,
    table: Option<&Path>,
    report: Option<&Path>,
    flags: &CommonFlags,
    out: &mut dyn Write,
) -> Result<()> {
    let config = flags.calibration()?;
    let groups = parse_trace_file(traces)?;
    let annotated = parse_annotated_file(assignments)?;
    let annotated_groups: Vec<RolloutGroup> = annotated.iter().map(|(g, _)| g.clone()).collect();
    check_same_groups(&groups, &annotated_groups)?;
    let assignments: Vec<_> = annotated.into_iter().map(|(_, a)| a).collect();
    let rows = mispenalty_rate(&groups, &assignments, &config)?;
    print(out, format_args!("step_index\tproportion\tcount\n"))?;
    for r in &rows {
        print(
            out,
            format_args!("{}\t{:.6}\t{}\n", r.step_index, r.proportion, r.count),
        )?;
    }
    if let Some(p) = table {
        write_mispenalty_table(&rows, p)?;
    }
    let has_logprobs = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .flat_map(|r| &r.steps)
        .all(|s| s.token_logprobs.is_some());
    if !has_logprobs {
        if report.is_some() {
            return Err(Error::InvalidArgument(
                "telemetry report needs token_logprobs on every step".into(),
            ));
        }
        return print(out, format_args!("telemetry: skipped (token_logprobs absent)\n"));
    }
    let record = batch_telemetry(0, &groups, &assignments, &config)?;
    let ratio = record
        .neg_pos_ratio
        .map_or_else(|| "undefined".to_string(), |r| format!("{r:.6}"));
    print(
        out,
        format_args!(
            "telemetry: mean_token_nll={:.6} perplexity={:.6} neg_pos_ratio={} high_ppl_ratio={:.6} success_rate={:.6}\n",
            record.mean_token_nll,
            record.perplexity,
            ratio,
            record.high_ppl_ratio,
            record.success_rate.unwrap_or(0.0)
        ),
    )?;
    if let Some(p) = report {
        emit_report(std::slice::from_ref(&record), p)?;
    }
    Ok(())
}

fn simulate(config: &SimConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let outcome = run_experiment(config)?;
    write_outputs(&outcome, dir)?;
    let ratio = outcome
        .cumulative_neg_pos_ratio()
        .map_or_else(|| "undefined".to_string(), |r| format!("{r:.6}"));
    print(
        out,
        format_args!(
            "pipeline={} seed={} updates={} expected_reward={:.6} garbage_mass={:.6} cumulative_neg_pos_ratio={}\nwrote {}\n",
            config.pipeline,
            config.seed,
            config.updates,
            outcome.final_expected_reward(),
            outcome.final_garbage_mass(),
            ratio,
            dir.display()
        ),
    )
}

fn report(input: &Path, out: &mut dyn Write) -> Result<()> {
    let records = read_report(input)?;
    print(out, format_args!("rows\t{}\n", records.len()))?;
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        return Ok(());
    };
    print(
        out,
        format_args!("training_steps\t{}..{}\n", first.training_step, last.training_step),
    )?;
    type Column = (&'static str, fn(&crate::analysis::TelemetryRecord) -> Option<f64>);
    let columns: [Column; 6] = [
        ("mean_token_nll", |r| Some(r.mean_token_nll)),
        ("perplexity", |r| Some(r.perplexity)),
        ("neg_pos_ratio", |r| r.neg_pos_ratio),
        ("high_ppl_ratio", |r| Some(r.high_ppl_ratio)),
        ("policy_entropy", |r| r.policy_entropy),
        ("success_rate", |r| r.success_rate),
    ];
    print(out, format_args!("column\tdefined\tmean\tfirst\tlast\n"))?;
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    for (name, get) in columns {
        let values: Vec<f64> = records.iter().filter_map(get).collect();
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        print(
            out,
            format_args!(
                "{name}\t{}\t{}\t{}\t{}\n",
                values.len(),
                show(mean),
                show(get(first)),
                show(get(last))
            ),
        )?;
    }
    Ok(())
}

//! Command-line surface.
//!
//! Subcommands mirror the pipeline: build-dataset (sample + judge + stats),
//! label, export-sft, gate, answer, eval, sweep, stats, consistency,
//! held-in. Exit codes: 0 success, 1 usage, 2 partial failure (per-row
//! error file written), 3 fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::answer::{run_benchmark, timing_csv, timing_summary, AnswerOpts};
use crate::config::Config;
use crate::domain::{load_queries, BoundaryLabel, Mode, QueryRecord};
use crate::error::{Error, Result};
use crate::eval::{
    consistency_csv, epsilon_sweep, evaluate, judge_consistency, parse_grid, per_item_metrics,
    report_csv, report_table, sweep_csv, held_in_accuracy,
};
use crate::gate::{decide_corpus, GateOpts};
use crate::jsonl;
use crate::judge::{judge_corpus, JudgedQuery};
use crate::labels::{build_labels, import_human_labels};
use crate::metrics::search_ratio;
use crate::retrieval::Searcher;
use crate::run::{params_hash, RunContext};
use crate::runstore::FileDigest;
use crate::sampling::collect_samples;
use crate::sft::{build_manifest, build_sft_records, SftVariant};
use crate::stats::{dataset_stats, stats_csv, stats_table};
use crate::template::template_hashes;

#[derive(Parser, Debug)]
#[command(name = "kbgate", version, about = "Knowledge-boundary gating pipeline")]
pub struct Cli {
    /// TOML config overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding caches, checkpoints, manifest, and outputs.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,
    /// Worker threads for parallel fan-out.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Continue an interrupted stage from its checkpoints.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Force the deterministic mock backend for every profile.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Fault injection: stop after scheduling N new units (testing only).
    #[arg(long, global = true, hide = true)]
    pub unit_limit: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample the target model R times per query, judge every sample, and
    /// emit judged means plus per-source statistics.
    BuildDataset {
        #[arg(long)]
        queries: PathBuf,
        /// Draws per query.
        #[arg(short = 'R', long)]
        samples: Option<u32>,
        #[arg(long)]
        sample_profile: Option<String>,
        #[arg(long)]
        judge_profile: Option<String>,
    },
    /// Per-source statistics of an existing judged file.
    Stats {
        #[arg(long)]
        judged: PathBuf,
    },
    /// Turn judged means into hard/soft boundary labels, or import human
    /// annotations.
    Label {
        #[arg(long)]
        judged: Option<PathBuf>,
        /// CSV of query_id,label human annotations (hard labels only).
        #[arg(long)]
        human_labels: Option<PathBuf>,
        /// Query file; required when importing human labels.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Export boundary-training records plus a manifest for the external
    /// trainer.
    ExportSft {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// hard | soft
        #[arg(long)]
        variant: String,
    },
    /// Run the gate over a corpus and emit decisions.
    Gate {
        #[arg(long)]
        queries: PathBuf,
        /// hkb | skb | prompt | none | all
        #[arg(long)]
        variant: String,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        boundary_profile: Option<String>,
        #[arg(long)]
        answer_profile: Option<String>,
    },
    /// Produce answers under one or more run modes, with timing.
    Answer {
        #[arg(long)]
        queries: PathBuf,
        /// Comma-separated: none,all,prompt,hkb,skb
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        boundary_profile: Option<String>,
        #[arg(long)]
        answer_profile: Option<String>,
    },
    /// Score previously produced answers and emit the report tables.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        judge_profile: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Sweep the soft-gate threshold over a grid.
    Sweep {
        #[arg(long)]
        queries: PathBuf,
        /// start:stop:step or a comma-separated list.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        judge_profile: Option<String>,
        #[arg(long)]
        boundary_profile: Option<String>,
        #[arg(long)]
        answer_profile: Option<String>,
    },
    /// Score one answer set under two judges and report the gap.
    Consistency {
        #[arg(long)]
        queries: PathBuf,
        /// Answer files (one per mode).
        #[arg(long, required = true)]
        answers: Vec<PathBuf>,
        #[arg(long)]
        judge_a: String,
        #[arg(long)]
        judge_b: String,
    },
    /// Accuracy of boundary predictions against reference labels.
    HeldIn {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// hard | soft
        #[arg(long)]
        variant: String,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Debug, Serialize)]
struct RowError<'a> {
    query_id: &'a str,
    stage: &'a str,
    error: &'a str,
}

/// Outcome of a command: whether any per-row failures were recorded.
struct Outcome {
    partial: usize,
}

impl Outcome {
    fn clean() -> Self {
        Self { partial: 0 }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output on stdout.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(outcome) if outcome.partial == 0 => 0,
        Ok(outcome) => {
            eprintln!("{} row(s) failed; see the error file in the run dir", outcome.partial);
            2
        }
        Err(Error::Validation(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("fatal: {e}");
            3
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(p) = cli.parallelism {
        config.defaults.parallelism = p.max(1);
    }
    config.validate()?;
    Ok(config)
}

fn context(cli: &Cli) -> Result<RunContext> {
    let config = load_config(cli)?;
    let mut ctx = RunContext::new(config, &cli.run_dir, cli.mock)?;
    ctx.resume = cli.resume;
    ctx.unit_limit = cli.unit_limit;
    Ok(ctx)
}

/// Gate a stage on the manifest: completed identical runs are no-ops,
/// interrupted ones demand --resume.
fn begin_stage(
    ctx: &RunContext,
    stage: &str,
    params: &str,
    inputs: &[FileDigest],
    profiles: Vec<String>,
) -> Result<bool> {
    use crate::runstore::StageStatus;
    match ctx.store.stage_status(stage, params, inputs)? {
        StageStatus::Complete => {
            println!("stage {stage}: already complete for these inputs — no-op");
            Ok(false)
        }
        StageStatus::Interrupted if !ctx.resume => Err(Error::RunStore(format!(
            "stage {stage} was interrupted; pass --resume to continue it or use a fresh run dir"
        ))),
        _ => {
            ctx.store.stage_started(
                stage,
                params,
                template_hashes(&ctx.config.template_set()?),
                profiles,
                inputs.to_vec(),
            )?;
            Ok(true)
        }
    }
}

fn input_digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: jsonl::sha256_file(path)?,
    })
}

fn write_row_errors(
    ctx: &RunContext,
    name: &str,
    stage: &str,
    failures: &BTreeMap<String, String>,
) -> Result<Option<FileDigest>> {
    if failures.is_empty() {
        return Ok(None);
    }
    let rows: Vec<RowError> = failures
        .iter()
        .map(|(qid, err)| RowError {
            query_id: qid,
            stage,
            error: err,
        })
        .collect();
    Ok(Some(ctx.store.write_output_jsonl(name, &rows)?))
}

fn searcher_for(ctx: &RunContext) -> Result<Searcher> {
    let provider_name = ctx.config.defaults.retrieval_provider.clone();
    let provider_config = ctx.config.provider(&provider_name)?;
    Searcher::new(
        provider_config.build(&provider_name),
        provider_config.top_k(),
        Some(ctx.store.search_cache_dir()),
        ctx.config.search_cache_max_age_secs,
        ctx.config.retry.max_retries,
    )
}

fn gate_opts<'a>(
    ctx: &'a RunContext,
    templates: &'a crate::template::TemplateSet,
    boundary_profile: &'a str,
    answer_profile: &'a str,
) -> Result<GateOpts<'a>> {
    Ok(GateOpts {
        boundary_profile,
        prompt_profile: answer_profile,
        templates,
        boundary_dialect: ctx.config.dialect_for(boundary_profile)?,
        prompt_dialect: ctx.config.dialect_for(answer_profile)?,
        scale: ctx.config.scale,
    })
}

fn parse_modes(modes: &[String], default: &[Mode]) -> Result<Vec<Mode>> {
    if modes.is_empty() {
        return Ok(default.to_vec());
    }
    let mut out = Vec::new();
    for m in modes {
        let mode = Mode::parse(m)?;
        if !out.contains(&mode) {
            out.push(mode);
        }
    }
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::BuildDataset {
            queries,
            samples,
            sample_profile,
            judge_profile,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let r = samples.unwrap_or(ctx.config.defaults.samples);
            let sample_profile = sample_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.sample_profile.clone());
            let judge_profile = judge_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.judge_profile.clone());
            cmd_build_dataset(&ctx, queries, &query_list, r, &sample_profile, &judge_profile)
        }
        Command::Stats { judged } => {
            let ctx = context(&cli)?;
            let judged_rows: Vec<JudgedQuery> = jsonl::read_file(judged)?;
            let rows = dataset_stats(&judged_rows)?;
            ctx.store.write_output_bytes("stats.csv", stats_csv(&rows).as_bytes())?;
            ctx.store.write_output_bytes("stats.txt", stats_table(&rows).as_bytes())?;
            print!("{}", stats_table(&rows));
            Ok(Outcome::clean())
        }
        Command::Label {
            judged,
            human_labels,
            queries,
            epsilon,
        } => {
            let ctx = context(&cli)?;
            let labels = match (judged, human_labels) {
                (Some(judged_path), None) => {
                    let judged_rows: Vec<JudgedQuery> = jsonl::read_file(judged_path)?;
                    let eps = epsilon.unwrap_or(ctx.config.defaults.label_epsilon);
                    build_labels(&judged_rows, eps, ctx.config.scale)?
                }
                (None, Some(human_path)) => {
                    let queries_path = queries.as_ref().ok_or_else(|| {
                        Error::Validation("--human-labels needs --queries for id validation".into())
                    })?;
                    let known: BTreeSet<String> = load_queries(queries_path)?
                        .into_iter()
                        .map(|q| q.id)
                        .collect();
                    import_human_labels(human_path, &known)?
                }
                _ => {
                    return Err(Error::Validation(
                        "pass exactly one of --judged or --human-labels".into(),
                    ))
                }
            };
            let name = if human_labels.is_some() {
                "labels-human.jsonl"
            } else {
                "labels.jsonl"
            };
            let digest = ctx.store.write_output_jsonl(name, &labels)?;
            let params = params_hash(&("label", epsilon, human_labels.is_some()));
            ctx.store
                .stage_completed("label", &params, vec![], vec![digest], None)?;
            println!("wrote {} label(s) to {name}", labels.len());
            Ok(Outcome::clean())
        }
        Command::ExportSft {
            labels,
            queries,
            variant,
        } => {
            let ctx = context(&cli)?;
            let variant = SftVariant::parse(variant)?;
            let label_rows: Vec<BoundaryLabel> = jsonl::read_file(labels)?;
            let query_list = load_queries(queries)?;
            let template_variant = match variant {
                SftVariant::Hard => crate::template::TemplateVariant::Hard,
                SftVariant::Soft => crate::template::TemplateVariant::Soft,
            };
            let template = ctx.config.template(template_variant)?;
            let dialect = ctx
                .config
                .dialect_for(&ctx.config.defaults.boundary_profile)?;
            let records = build_sft_records(
                &label_rows,
                &query_list,
                variant,
                &template,
                dialect,
                ctx.config.scale,
            )?;
            let epsilon = label_rows.iter().find_map(|l| l.epsilon_used);
            let manifest = build_manifest(&records, variant, epsilon, ctx.config.scale, &template);
            let suffix = match variant {
                SftVariant::Hard => "hard",
                SftVariant::Soft => "soft",
            };
            let records_digest =
                ctx.store.write_output_jsonl(&format!("sft-{suffix}.jsonl"), &records)?;
            let manifest_digest = ctx.store.write_output_bytes(
                &format!("sft-{suffix}.manifest.json"),
                &serde_json::to_vec_pretty(&manifest)?,
            )?;
            let params = params_hash(&("export-sft", suffix, epsilon));
            ctx.store.stage_completed(
                "export-sft",
                &params,
                vec![input_digest(labels)?, input_digest(queries)?],
                vec![records_digest, manifest_digest],
                None,
            )?;
            println!("wrote {} record(s) to sft-{suffix}.jsonl", records.len());
            Ok(Outcome::clean())
        }
        Command::Gate {
            queries,
            variant,
            epsilon,
            boundary_profile,
            answer_profile,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let mode = Mode::parse(variant)?;
            let eps = match mode {
                Mode::Skb => Some(epsilon.unwrap_or(ctx.config.defaults.skb_epsilon)),
                _ => None,
            };
            let boundary = boundary_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.boundary_profile.clone());
            let answerer = answer_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.answer_profile.clone());
            let inputs = vec![input_digest(queries)?];
            let params = params_hash(&("gate", mode, eps, &boundary, &answerer));
            let stage = format!("gate-{mode}");
            if !begin_stage(&ctx, &stage, &params, &inputs, vec![boundary.clone(), answerer.clone()])? {
                return Ok(Outcome::clean());
            }
            let (decisions, failures) =
                decide_corpus(&ctx, &query_list, mode, eps, &boundary, &answerer)?;
            let name = format!("decisions-{mode}.jsonl");
            let mut outputs = vec![ctx.store.write_output_jsonl(&name, &decisions)?];
            if let Some(errs) =
                write_row_errors(&ctx, &format!("errors-gate-{mode}.jsonl"), &stage, &failures)?
            {
                outputs.push(errs);
            }
            let note = if decisions.is_empty() {
                None
            } else {
                Some(format!("search_ratio={:.2}", search_ratio(&decisions)?))
            };
            ctx.store.stage_completed(&stage, &params, inputs, outputs, note)?;
            if !decisions.is_empty() {
                println!(
                    "{} decision(s), search ratio {:.2}%{}",
                    decisions.len(),
                    search_ratio(&decisions)?,
                    eps.map(|e| format!(" (epsilon {e})")).unwrap_or_default()
                );
            }
            Ok(Outcome {
                partial: failures.len(),
            })
        }
        Command::Answer {
            queries,
            modes,
            epsilon,
            boundary_profile,
            answer_profile,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let mode_list = parse_modes(modes, &[Mode::None, Mode::All])?;
            let boundary = boundary_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.boundary_profile.clone());
            let answerer = answer_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.answer_profile.clone());
            let inputs = vec![input_digest(queries)?];
            let params = params_hash(&("answer", &mode_list, epsilon, &boundary, &answerer));
            if !begin_stage(&ctx, "answer", &params, &inputs, vec![boundary.clone(), answerer.clone()])? {
                return Ok(Outcome::clean());
            }
            let templates = ctx.config.template_set()?;
            let searcher = searcher_for(&ctx)?;
            let opts = AnswerOpts {
                answer_profile: &answerer,
                gate: gate_opts(&ctx, &templates, &boundary, &answerer)?,
                searcher: &searcher,
                retrieval_policy: ctx.config.defaults.retrieval_policy,
                context_budget: ctx.config.defaults.context_budget,
            };
            let (records, failures) =
                run_benchmark(&ctx, &query_list, &mode_list, *epsilon, &opts)?;
            let mut outputs = Vec::new();
            let mut partial = 0;
            for (mode, rows) in &records {
                outputs.push(
                    ctx.store
                        .write_output_jsonl(&format!("answers-{mode}.jsonl"), rows)?,
                );
            }
            for (mode, fails) in &failures {
                partial += fails.len();
                if let Some(errs) = write_row_errors(
                    &ctx,
                    &format!("errors-answer-{mode}.jsonl"),
                    &format!("answer-{mode}"),
                    fails,
                )? {
                    outputs.push(errs);
                }
            }
            let summary = timing_summary(&records);
            outputs.push(
                ctx.store
                    .write_output_bytes("timing.csv", timing_csv(&summary).as_bytes())?,
            );
            ctx.store.stage_completed("answer", &params, inputs, outputs, None)?;
            for row in &summary {
                println!(
                    "{:<8} n={:<5} prebuild total {:.1} ms (mean {:.2} ms)",
                    row.mode.label(),
                    row.n,
                    row.total_prebuild_ms,
                    row.mean_prebuild_ms
                );
            }
            Ok(Outcome { partial })
        }
        Command::Eval {
            queries,
            modes,
            judge_profile,
            epsilon: _,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let mode_list = parse_modes(modes, &[Mode::None, Mode::All])?;
            let judge = judge_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.judge_profile.clone());
            let mut records = BTreeMap::new();
            let mut failures: BTreeMap<Mode, BTreeMap<String, String>> = BTreeMap::new();
            for mode in mode_list {
                let path = ctx.store.output_path(&format!("answers-{mode}.jsonl"));
                if !path.exists() {
                    return Err(Error::Validation(format!(
                        "no answers for mode {mode}; run `answer --modes {mode}` first"
                    )));
                }
                records.insert(mode, jsonl::read_file::<crate::answer::AnswerRecord>(&path)?);
                let errs = ctx.store.output_path(&format!("errors-answer-{mode}.jsonl"));
                if errs.exists() {
                    #[derive(serde::Deserialize)]
                    struct Row {
                        query_id: String,
                        error: String,
                    }
                    let rows: Vec<Row> = jsonl::read_file(&errs)?;
                    failures.insert(
                        mode,
                        rows.into_iter().map(|r| (r.query_id, r.error)).collect(),
                    );
                }
            }
            let report = evaluate(&ctx, &query_list, &records, &failures, &judge)?;
            ctx.store
                .write_output_bytes("report.csv", report_csv(&report).as_bytes())?;
            ctx.store
                .write_output_bytes("report.txt", report_table(&report).as_bytes())?;
            ctx.store
                .write_output_bytes("report.json", &serde_json::to_vec_pretty(&report)?)?;
            print!("{}", report_table(&report));
            Ok(Outcome::clean())
        }
        Command::Sweep {
            queries,
            grid,
            judge_profile,
            boundary_profile,
            answer_profile,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let grid_values = parse_grid(grid)?;
            let judge = judge_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.judge_profile.clone());
            let boundary = boundary_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.boundary_profile.clone());
            let answerer = answer_profile
                .clone()
                .unwrap_or_else(|| ctx.config.defaults.answer_profile.clone());
            let templates = ctx.config.template_set()?;
            let searcher = searcher_for(&ctx)?;
            let opts = AnswerOpts {
                answer_profile: &answerer,
                gate: gate_opts(&ctx, &templates, &boundary, &answerer)?,
                searcher: &searcher,
                retrieval_policy: ctx.config.defaults.retrieval_policy,
                context_budget: ctx.config.defaults.context_budget,
            };
            let (records, failures) =
                run_benchmark(&ctx, &query_list, &[Mode::None, Mode::All], None, &opts)?;
            let partial: usize = failures.values().map(BTreeMap::len).sum();
            let none_items = per_item_metrics(&ctx, &query_list, &records[&Mode::None], &judge)?;
            let all_items = per_item_metrics(&ctx, &query_list, &records[&Mode::All], &judge)?;
            let rows = epsilon_sweep(
                &ctx,
                &query_list,
                &grid_values,
                &none_items,
                &all_items,
                &opts.gate,
            )?;
            let csv = sweep_csv(&rows);
            ctx.store.write_output_bytes("sweep.csv", csv.as_bytes())?;
            println!("epsilon   ratio%     llm    token");
            for r in &rows {
                println!(
                    "{:>7.2} {:>8.2} {:>7.2} {:>8.2}",
                    r.epsilon, r.ratio, r.llm, r.token_acc
                );
            }
            Ok(Outcome { partial })
        }
        Command::Consistency {
            queries,
            answers,
            judge_a,
            judge_b,
        } => {
            let ctx = context(&cli)?;
            let query_list = load_queries(queries)?;
            let mut records: BTreeMap<Mode, Vec<crate::answer::AnswerRecord>> = BTreeMap::new();
            for path in answers {
                let rows: Vec<crate::answer::AnswerRecord> = jsonl::read_file(path)?;
                for row in rows {
                    records.entry(row.mode).or_default().push(row);
                }
            }
            let report = judge_consistency(&ctx, &query_list, &records, judge_a, judge_b)?;
            ctx.store
                .write_output_bytes("consistency.csv", consistency_csv(&report).as_bytes())?;
            for row in &report.rows {
                println!(
                    "{:<8} {}={:.2} {}={:.2} gap={:.2}",
                    row.mode.label(),
                    judge_a,
                    row.mean_a,
                    judge_b,
                    row.mean_b,
                    row.gap
                );
            }
            println!("max gap: {:.2}", report.max_gap);
            Ok(Outcome::clean())
        }
        Command::HeldIn {
            predictions,
            labels,
            variant,
            tolerance,
        } => {
            let ctx = context(&cli)?;
            let variant = SftVariant::parse(variant)?;
            let preds: Vec<BoundaryLabel> = jsonl::read_file(predictions)?;
            let label_rows: Vec<BoundaryLabel> = jsonl::read_file(labels)?;
            let tol = tolerance.unwrap_or(ctx.config.defaults.held_in_tolerance);
            let accuracy = held_in_accuracy(&preds, &label_rows, variant, tol)?;
            println!("held-in accuracy: {accuracy:.2}");
            Ok(Outcome::clean())
        }
    }
}

fn cmd_build_dataset(
    ctx: &RunContext,
    queries_path: &Path,
    queries: &[QueryRecord],
    samples: u32,
    sample_profile: &str,
    judge_profile: &str,
) -> Result<Outcome> {
    let inputs = vec![input_digest(queries_path)?];
    let params = params_hash(&("build-dataset", samples, sample_profile, judge_profile));
    if !begin_stage(
        ctx,
        "build-dataset",
        &params,
        &inputs,
        vec![sample_profile.to_string(), judge_profile.to_string()],
    )? {
        return Ok(Outcome::clean());
    }

    let (sample_sets, sample_failures) = collect_samples(ctx, queries, samples, sample_profile)?;
    let samples_digest = ctx.store.write_output_jsonl("samples.jsonl", &sample_sets)?;

    let (judged, dropped) = judge_corpus(ctx, queries, &sample_sets, judge_profile)?;
    let judged_digest = ctx.store.write_output_jsonl("judged.jsonl", &judged)?;

    let mut failures = sample_failures;
    failures.extend(dropped);

    let mut outputs = vec![samples_digest, judged_digest];
    if !judged.is_empty() {
        let rows = dataset_stats(&judged)?;
        outputs.push(ctx.store.write_output_bytes("stats.csv", stats_csv(&rows).as_bytes())?);
        outputs.push(ctx.store.write_output_bytes("stats.txt", stats_table(&rows).as_bytes())?);
        print!("{}", stats_table(&rows));
    }
    if let Some(errs) =
        write_row_errors(ctx, "errors-build-dataset.jsonl", "build-dataset", &failures)?
    {
        outputs.push(errs);
    }
    ctx.store.stage_completed(
        "build-dataset",
        &params,
        inputs,
        outputs,
        Some(format!("judged={} dropped={}", judged.len(), failures.len())),
    )?;
    println!(
        "judged {} of {} queries ({} draws each)",
        judged.len(),
        queries.len(),
        samples
    );
    Ok(Outcome {
        partial: failures.len(),
    })
}

/// Library-level entry used by the binary and by end-to-end tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(args)
}

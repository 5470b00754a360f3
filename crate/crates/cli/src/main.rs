use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use tomgraph::config::{conditions_for, BackendKind, ContextSetting, TripleSetting};
use tomgraph::evalharness::{EvalCondition, ReportLayout};
use tomgraph::pipeline::{Pipeline, PipelineError, StageReport};
use tomgraph::tkg::MergeMode;

#[derive(Parser)]
#[command(name = "tomgraph", version, about = "Mental-state triple extraction, temporal graphs and ToM evaluation")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, short, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Artifact root, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of template overrides.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    /// Use the replay backend with this script.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse source books into the normalized corpus.
    Ingest,
    /// Extract mental-state triples plot by plot.
    Extract {
        #[arg(long)]
        model: Option<String>,
        /// Reject triples with any validation violation.
        #[arg(long)]
        strict: bool,
    },
    /// Build one temporal graph per book from extracted batches.
    BuildKg {
        #[arg(long, value_enum)]
        merge_mode: Option<MergeArg>,
    },
    /// Generate four-dimension questions per plot and character.
    Genqa {
        #[arg(long)]
        model: Option<String>,
    },
    /// LLM review with regeneration of rejected questions.
    Verify {
        #[arg(long)]
        max_attempts: Option<u32>,
    },
    /// Write LLM-verified questions to a review CSV.
    ReviewExport {
        /// Destination; defaults to qa/review.csv under the artifact root.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Apply a filled-in review CSV.
    ReviewImport { file: PathBuf },
    /// Query models under the evaluation conditions and score them.
    Eval(EvalArgs),
    /// Render the latest score table.
    Report {
        #[arg(long, value_enum, default_value = "plain")]
        format: FormatArg,
        /// Write to this file instead of stdout.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Emit fine-tuning files with a book-level held-out split.
    EmitFt {
        #[arg(long, default_value = "both")]
        triples: TripleSetting,
        #[arg(long, value_delimiter = ',')]
        ood_books: Vec<String>,
        #[arg(long)]
        waive_verification: bool,
    },
    /// Corpus, question and prompt-length statistics.
    Stats {
        /// Restrict the corpus table to these books (ids or titles).
        #[arg(long, value_delimiter = ',')]
        books: Vec<String>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Explicit condition labels, e.g. `current,current+triples`.
    #[arg(long, value_delimiter = ',')]
    conditions: Vec<String>,
    #[arg(long)]
    context: Option<ContextSetting>,
    #[arg(long)]
    triples: Option<TripleSetting>,
    /// Keep only this many preceding summaries in the extended context.
    #[arg(long)]
    window: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    TrustLlmDiff,
    DeterministicMerge,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Plain,
    Markdown,
    Csv,
}

enum Failure {
    User(String),
    Backend(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_backend_failure() {
            Failure::Backend(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Backend(m)) => {
            eprintln!("backend failure: {m}");
            ExitCode::from(2)
        }
    }
}

fn finish(report: StageReport) -> Result<(), Failure> {
    println!("{}", report.summary);
    if !report.user_errors.is_empty() {
        return Err(Failure::User(report.user_errors.join("\n")));
    }
    if report.backend_failures > 0 {
        return Err(Failure::Backend(format!("{} request(s) failed; see the stage artifacts", report.backend_failures)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut pipeline = Pipeline::from_config_file(&cli.config)?;
    let cfg = &mut pipeline.config;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(script) = cli.replay {
        cfg.backend.kind = BackendKind::Replay;
        cfg.backend.replay_script = Some(script);
    }
    if let Some(dir) = cli.cache_dir {
        cfg.backend.cache_dir = Some(dir);
    }
    if let Some(dir) = cli.templates {
        cfg.templates.dir = Some(dir);
        pipeline.templates = tomgraph::templates::TemplateSet::load(cfg.templates.dir.as_deref())
            .map_err(|e| Failure::User(e.to_string()))?;
    }

    match cli.command {
        Command::Ingest => finish(pipeline.ingest()?),
        Command::Extract { model, strict } => {
            if let Some(m) = model {
                pipeline.config.extract.model = m;
            }
            pipeline.config.extract.strict |= strict;
            let gate = pipeline.gateway()?;
            finish(pipeline.extract(&gate)?)
        }
        Command::BuildKg { merge_mode } => {
            if let Some(m) = merge_mode {
                pipeline.config.kg.mode = match m {
                    MergeArg::TrustLlmDiff => MergeMode::TrustLlmDiff,
                    MergeArg::DeterministicMerge => MergeMode::DeterministicMerge,
                };
            }
            finish(pipeline.build_kg()?)
        }
        Command::Genqa { model } => {
            if let Some(m) = model {
                pipeline.config.qa.model = m;
            }
            let gate = pipeline.gateway()?;
            finish(pipeline.genqa(&gate)?)
        }
        Command::Verify { max_attempts } => {
            if let Some(n) = max_attempts {
                pipeline.config.qa.max_attempts = n;
            }
            pipeline.config.validate().map_err(|e| Failure::User(e.to_string()))?;
            let gate = pipeline.gateway()?;
            finish(pipeline.verify(&gate)?)
        }
        Command::ReviewExport { file, rate } => {
            if let Some(r) = rate {
                pipeline.config.qa.review_sample_rate = r;
            }
            pipeline.config.validate().map_err(|e| Failure::User(e.to_string()))?;
            finish(pipeline.review_export(file.as_deref())?)
        }
        Command::ReviewImport { file } => finish(pipeline.review_import(&file)?),
        Command::Eval(args) => {
            let ev = &mut pipeline.config.eval;
            if !args.models.is_empty() {
                ev.models = args.models;
            }
            if let Some(w) = args.window {
                ev.window = Some(w);
            }
            let conditions = if !args.conditions.is_empty() {
                let mut cs = Vec::new();
                for label in &args.conditions {
                    cs.push(label.parse::<EvalCondition>().map_err(Failure::User)?);
                }
                cs
            } else {
                conditions_for(args.context.unwrap_or(ev.context), args.triples.unwrap_or(ev.triples))
            };
            if conditions.is_empty() {
                return Err(Failure::User("no evaluation conditions selected".into()));
            }
            pipeline.config.validate().map_err(|e| Failure::User(e.to_string()))?;
            let gate = pipeline.gateway()?;
            finish(pipeline.eval(&gate, &conditions)?)
        }
        Command::Report { format, file } => {
            let layout = match format {
                FormatArg::Plain => ReportLayout::Plain,
                FormatArg::Markdown => ReportLayout::Markdown,
                FormatArg::Csv => ReportLayout::Csv,
            };
            let text = pipeline.report(layout)?;
            match file {
                Some(path) => std::fs::write(&path, text).map_err(|e| Failure::User(format!("{}: {e}", path.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::EmitFt { triples, ood_books, waive_verification } => {
            if !ood_books.is_empty() {
                pipeline.config.ft.ood_books = ood_books.into_iter().collect();
            }
            finish(pipeline.emit_ft(triples, waive_verification)?)
        }
        Command::Stats { books } => {
            let subset: BTreeSet<String> = books.into_iter().collect();
            print!("{}", pipeline.stats(&subset)?);
            Ok(())
        }
    }
}

use adscribe_core::annotate::OverlayMode;
use adscribe_core::backend::{BackendConfig, MockConfig};
use adscribe_core::faceid::RecognitionMode;
use adscribe_core::pipeline::{self, ClipStatus, RunConfig, OUTPUTS_FILE};
use adscribe_core::promptgen::{GenerationMode, LengthPolicy};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Generate audio descriptions for movie clips.
#[derive(Debug, Parser)]
#[command(name = "adscribe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline and write outputs.jsonl and manifest.json.
    Generate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score an outputs file against the configured ground truth.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to outputs.jsonl in the output directory.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Character recognition only; writes identities.jsonl.
    Identify {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the annotated prompt frames without calling any backend.
    AnnotateDump {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<GenerationMode>,
    /// none, fixed:N or gt_length.
    #[arg(long)]
    length_policy: Option<LengthPolicy>,
    #[arg(long)]
    context_len: Option<usize>,
    /// Second pass with the first pass's ADs in the context.
    #[arg(long)]
    context_ad: bool,
    #[arg(long)]
    recognition: Option<RecognitionMode>,
    #[arg(long)]
    overlay: Option<OverlayMode>,
    #[arg(long)]
    num_frames: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also write annotated prompt frames here.
    #[arg(long)]
    dump_annotated: Option<PathBuf>,
    /// Use the offline echo backend regardless of the config.
    #[arg(long)]
    mock: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.length_policy {
            cfg.length_policy = v;
        }
        if let Some(v) = self.context_len {
            cfg.context_len = v;
        }
        if self.context_ad {
            cfg.context_ad = true;
        }
        if let Some(v) = self.recognition {
            cfg.recognition = v;
        }
        if let Some(v) = self.overlay {
            cfg.overlay.mode = v;
        }
        if let Some(v) = self.num_frames {
            cfg.num_frames = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.concurrency {
            cfg.concurrency = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.paths.output_dir = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            cfg.paths.cache_dir = Some(v.clone());
        }
        if let Some(v) = &self.dump_annotated {
            cfg.paths.dump_annotated = Some(v.clone());
        }
        if self.mock {
            cfg.backend = BackendConfig::Mock(MockConfig::default());
        }
        Ok(cfg)
    }
}

fn partial(failed: usize) -> ExitCode {
    if failed > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

async fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { run } => {
            let cfg = run.load()?;
            let summary = pipeline::run_pipeline(&cfg).await?;
            let m = &summary.manifest;
            println!(
                "{} clips: {} generated, {} cached, {} failed; {} backend calls; outputs in {}",
                m.clips.len(),
                m.count(ClipStatus::Done),
                m.count(ClipStatus::Cached),
                m.count(ClipStatus::Failed),
                m.backend_calls,
                cfg.paths.output_dir.join(OUTPUTS_FILE).display()
            );
            for c in m.clips.iter().filter(|c| c.status == ClipStatus::Failed) {
                eprintln!("failed {}: {}", c.clip_id, c.error.as_deref().unwrap_or("unknown error"));
            }
            Ok(partial(m.count(ClipStatus::Failed)))
        }
        Command::Eval { run, outputs } => {
            let cfg = run.load()?;
            let path = outputs.unwrap_or_else(|| cfg.paths.output_dir.join(OUTPUTS_FILE));
            let report = pipeline::run_eval(&cfg, &path)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "num_clips": report.num_clips,
                "rouge_l": report.rouge_l,
                "cider_d": report.cider_d,
                "char_recall": report.char_recall,
                "char_precision": report.char_precision,
            }))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Identify { run } => {
            let cfg = run.load()?;
            let report = pipeline::run_identify(&cfg)?;
            for c in &report.clips {
                println!("{}\t{}", c.clip_id, c.names.iter().cloned().collect::<Vec<_>>().join(", "));
            }
            if let (Some(r), Some(p)) = (report.recall, report.precision) {
                println!("recall {r:.3} precision {p:.3}");
            }
            Ok(partial(report.failed.len()))
        }
        Command::AnnotateDump { run, out } => {
            let cfg = run.load()?;
            let failed = pipeline::annotate_dump(&cfg, &out)?;
            for id in &failed {
                eprintln!("failed {id}");
            }
            Ok(partial(failed.len()))
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

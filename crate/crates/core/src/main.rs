use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use preftts::config::RunConfig;
use preftts::error::{Error, Result};
use preftts::lm::{DecodingMode, LmVariant};
use preftts::workflow::{self, parse_variant, RunDir};

#[derive(Parser, Debug)]
#[command(name = "preftts", version, about = "Preference-token codec and hierarchical speech LM on a synthetic world")]
struct Cli {
    /// TOML config merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed for every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to `runs/<unix-time>-<config-hash>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress per-step loss lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Codec,
    Lm,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        /// Total utterances; defaults to `data.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the codec or the language model.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Ablation variant to train instead of the configured model.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Label the corpus with the trained codec's preference tokens.
    Label,
    /// Generate speech tokens for one instruction and content text.
    Synthesize {
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        text: String,
        /// Use the checkpoint trained in this decoding mode.
        #[arg(long)]
        mode: Option<String>,
        /// Explicit language-model checkpoint.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Evaluate a language model, the oracle-replay generator, or saved records.
    Eval {
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Score the oracle-replay generator instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Rescore an existing generations file.
        #[arg(long, conflicts_with = "oracle")]
        records: Option<PathBuf>,
    },
    /// Train and evaluate the ablation variants.
    Ablate {
        /// Comma-separated variants; defaults to all seven.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Measure per-token latency against the single-step path.
    Bench {
        #[arg(long)]
        lm: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { stage: StageArg::Codec, .. } => "train-codec",
            Command::Train { stage: StageArg::Lm, .. } => "train-lm",
            Command::Label => "label",
            Command::Synthesize { .. } => "synthesize",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Bench { .. } => "bench",
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn lm_path(run: &RunDir, explicit: Option<PathBuf>, mode: Option<DecodingMode>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p),
        None => workflow::lm_for_mode(run, mode),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let root = match &cli.out {
        Some(p) => p.clone(),
        None => {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            Path::new("runs").join(format!("{now}-{}", cfg.hash()?))
        }
    };
    let run = RunDir::new(root);
    let snapshot = run.snapshot(&cfg, cli.command.name())?;
    eprintln!("run directory {} (config {})", run.root.display(), snapshot.display());
    let (force, quiet) = (cli.force, cli.quiet);
    match cli.command {
        Command::GenData { n } => {
            let s = workflow::gen_data(&cfg, &run, n)?;
            println!(
                "train {} dev {} test {}; corrupted {} of {} tokens ({:.4})",
                s.sizes[0],
                s.sizes[1],
                s.sizes[2],
                s.corrupted_tokens,
                s.total_tokens,
                s.corrupted_tokens as f64 / s.total_tokens.max(1) as f64
            );
        }
        Command::Train { stage: StageArg::Codec, variant } => {
            if variant.is_some() {
                return Err(Error::Config("--variant applies to --stage lm only".into()));
            }
            let fp = workflow::train_codec_stage(&cfg, &run, force, quiet)?;
            println!("codec checkpoint {} fingerprint {fp}", run.codec().display());
        }
        Command::Train { stage: StageArg::Lm, variant } => {
            let variant = variant.as_deref().map(parse_variant).transpose()?;
            let path = workflow::train_lm_stage(&cfg, &run, variant, force, quiet)?;
            println!("lm checkpoint {}", path.display());
        }
        Command::Label => {
            let m = workflow::label_stage(&run)?;
            println!(
                "labeled {} / {} / {} utterances with codec {}; prompt codebook utilization {:.3}",
                m.sizes[0],
                m.sizes[1],
                m.sizes[2],
                preftts::checkpoint::short(&m.codec_fingerprint),
                m.prompt_utilization
            );
        }
        Command::Synthesize { instruction, text, mode, lm } => {
            let mode = mode.as_deref().map(str::parse::<DecodingMode>).transpose()?;
            let path = lm_path(&run, lm, mode)?;
            let report = workflow::synthesize(&cfg, &run, &path, &instruction, &text)?;
            if report.instructed_style.is_none() {
                eprintln!("warning: instruction matches no prompt template; style is not evaluated");
            }
            print_json(&report)?;
            match (report.oracle_style, report.style_match) {
                (Some(s), Some(m)) => eprintln!("oracle style {s}: {}", if m { "match" } else { "mismatch" }),
                (Some(s), None) => eprintln!("oracle style {s}"),
                (None, _) => eprintln!("empty speech stream"),
            }
        }
        Command::Eval { lm, oracle, records } => {
            if oracle {
                print_json(&workflow::eval_oracle(&run, &run.root)?)?;
            } else if let Some(r) = records {
                print_json(&workflow::rescore(&run, &r)?)?;
            } else {
                let path = lm_path(&run, lm, None)?;
                let report = workflow::eval_stage(&cfg, &run, &path, &run.root)?;
                print!("{}", workflow::format_report(&report));
            }
        }
        Command::Ablate { variants } => {
            let variants: Vec<LmVariant> = if variants.is_empty() {
                LmVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
            };
            let rows = workflow::ablate_stage(&cfg, &run, &variants, force, quiet)?;
            print!("{}", preftts::harness::format_ablation_table(&rows));
        }
        Command::Bench { lm } => {
            let path = lm_path(&run, lm, None)?;
            let r = workflow::bench_stage(&cfg, &run, &path)?;
            println!(
                "{} {:.3} ms/token, single-step {:.3} ms/token, ratio {:.3}",
                r.mode.as_str(),
                r.mode_median_ms,
                r.single_step_median_ms,
                r.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

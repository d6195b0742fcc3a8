use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use duospeech::config::RunConfig;
use duospeech::pipeline::{self, TranslateOptions};

/// Exit status when an invariant suite fails.
const VERIFY_FAILED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "duospeech", version, about = "Toy speech-to-speech translation with joint text/speech decoding")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,

    /// Relative --out paths are resolved under this directory.
    #[arg(long, env = "DUOSPEECH_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (manifests, features, tables).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the FSQ speech tokenizer.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up the frontend and train the text-only base model.
    PretrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a base checkpoint to joint text/speech output.
    TrainS2st {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the streaming flow decoder.
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate every utterance of a manifest.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also synthesize mel frames and WAV files.
        #[arg(long)]
        wav: bool,
    },
    /// Score predictions against a reference manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suites; exits with status 2 if any fails.
    Verify,
    /// Every stage from data generation to evaluation.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wav: bool,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    fn out(&self, path: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }
}

fn execute(cli: &Cli) -> Result<u8> {
    let cfg = cli.run_config()?;
    if cli.print_config {
        print!("{}", cfg.to_json()?);
        return Ok(0);
    }
    let Some(command) = &cli.command else {
        bail!("no command given (see --help)");
    };
    let start = Instant::now();
    match command {
        Command::GenData { out } => {
            let out = cli.out(out);
            let corpus = pipeline::gen_data(&cfg, &out)?;
            eprintln!("corpus {} written to {}", corpus.config_hash, out.display());
        }
        Command::TrainTokenizer { data, out } => {
            let r = pipeline::train_tokenizer(&cfg, data, &cli.out(out))?;
            eprintln!("tokenizer frame accuracy: train {:.4}, dev {:.4}", r.train_accuracy, r.dev_accuracy);
        }
        Command::PretrainBase { data, out } => {
            let logs = pipeline::pretrain_base(&cfg, data, &cli.out(out))?;
            if let Some(l) = logs.last() {
                eprintln!("base model: {} steps, final text loss {:.4}", l.step, l.text_loss);
            }
        }
        Command::TrainS2st { base, data, out } => {
            let logs = pipeline::train_s2st(&cfg, base, data, &cli.out(out))?;
            if let Some(l) = logs.last() {
                eprintln!(
                    "s2st model: {} steps, final text {:.4} audio {:.4}",
                    l.step, l.text_loss, l.audio_loss
                );
            }
        }
        Command::TrainFlow { data, out } => {
            let losses = pipeline::train_flow(&cfg, data, &cli.out(out))?;
            eprintln!("flow decoder: final epoch loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Translate {
            model,
            flow,
            input,
            out,
            wav,
        } => {
            let opts = TranslateOptions {
                flow: flow.as_deref(),
                wav: *wav,
            };
            let preds = pipeline::translate(&cfg, model, input, &cli.out(out), &opts)?;
            let truncated = preds.iter().filter(|p| p.truncated).count();
            eprintln!("translated {} utterances ({truncated} truncated)", preds.len());
        }
        Command::Eval { pred, reference, out } => {
            let r = pipeline::eval(pred, reference, &cli.out(out))?;
            println!(
                "bleu {:.2}  asr_bleu {:.2}  align_wer {:.4}  n {}  truncated {}",
                r.bleu, r.asr_bleu, r.align_wer, r.n_utterances, r.truncated
            );
        }
        Command::Verify => {
            let mut failed = 0;
            for r in duospeech::verify::run_all(cfg.seed) {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                eprintln!("{failed} suite(s) failed");
                return Ok(VERIFY_FAILED);
            }
        }
        Command::Run { out, wav } => {
            let out = cli.out(out);
            let r = pipeline::full_run(&cfg, &out, *wav, |stage| {
                eprintln!("[{:>7.1}s] {stage} done", start.elapsed().as_secs_f64());
            })?;
            println!(
                "bleu {:.2}  asr_bleu {:.2}  align_wer {:.4}  n {}  truncated {}",
                r.bleu, r.asr_bleu, r.align_wer, r.n_utterances, r.truncated
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(u8::from(usage));
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

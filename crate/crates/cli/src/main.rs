//! `slp`: data generation, vocabulary building, training, decoding,
//! evaluation and self-checks for the unified speech-language model.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use slp_core::config::RunConfig;
use slp_core::exec::Execution;
use slp_core::pipeline::{self, GenerateRequest, TrainRequest};
use slp_core::verify;
use slp_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "slp", version, about = "Unified speech-language model for end-to-end SLU")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, env = "SLP_SEED", global = true)]
    seed: Option<u64>,
    /// Suppress progress and config output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Run on one thread even when built with parallelism.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifests plus embedding files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grammar: Option<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_dev: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a subword vocabulary on a manifest.
    BuildVocab {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model under one regime.
    Train {
        /// pretrain | finetune | onestep-slu | onestep-asr-slu
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (required for finetune).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss log file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Decode a manifest into a hypothesis manifest.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fine-tuned checkpoint for two-pass output.
        #[arg(long)]
        finetuned: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// N-best list file.
        #[arg(long)]
        nbest: Option<PathBuf>,
        /// greedy | beam
        #[arg(long)]
        mode: Option<String>,
        /// transcript | slu | asr-slu | two-pass
        #[arg(long)]
        output: Option<String>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property checks.
    Verify {
        /// gradcheck | mask | beam | codec; all when omitted.
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
}

enum Failure {
    Error(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", EXIT_USAGE),
        Error::Io { .. } => ("io", EXIT_DATA),
        Error::Format { .. } => ("format", EXIT_DATA),
        Error::Data(_) | Error::Length { .. } => ("data", EXIT_DATA),
        _ => ("invalid", EXIT_DATA),
    }
}

fn resolve_config(g: &Global, cmd: &Command) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &g.config {
        cfg.merge_file(p)?;
    }
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.set("seed", s.to_string())?;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<(), Error> {
        match v {
            Some(v) => cfg.set(k, v),
            None => Ok(()),
        }
    };
    let s = |v: &Option<usize>| v.map(|x| x.to_string());
    match cmd {
        Command::GenData { grammar, n_train, n_dev, n_test, .. } => {
            set("corpus.grammar", grammar.clone())?;
            set("corpus.n_train", s(n_train))?;
            set("corpus.n_dev", s(n_dev))?;
            set("corpus.n_test", s(n_test))?;
        }
        Command::BuildVocab { size, .. } => set("vocab.size", s(size))?,
        Command::Train { regime, epochs, lr, batch_size, .. } => {
            set("train.regime", regime.clone())?;
            set("train.epochs", s(epochs))?;
            set("train.lr", lr.map(|x| x.to_string()))?;
            set("train.batch_size", s(batch_size))?;
        }
        Command::Generate { mode, output, beam_size, max_len, .. } => {
            set("decode.mode", mode.clone())?;
            set("decode.output", output.clone())?;
            set("decode.beam_size", s(beam_size))?;
            set("decode.max_len", s(max_len))?;
        }
        Command::Evaluate { .. } | Command::Verify { .. } => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let cfg = resolve_config(g, &cli.command)?;
    let exec = if g.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let note = |msg: &str| {
        if !g.quiet {
            eprintln!("{msg}");
        }
    };
    for (k, v) in cfg.pairs() {
        note(&format!("config {k} = {v}"));
    }
    match &cli.command {
        Command::GenData { out, .. } => {
            let s = pipeline::cmd_gen_data(&cfg, out, exec)?;
            let sizes: Vec<usize> = s.manifests.iter().map(|m| m.len()).collect();
            if g.json {
                println!(
                    "{}",
                    json!({"train": sizes[0], "dev": sizes[1], "test": sizes[2],
                           "test_train_overlap": s.test_train_overlap, "frames": s.frames_total})
                );
            } else {
                note(&format!(
                    "wrote {} / {} / {} utterances to {}; {} test transcripts also in train",
                    sizes[0],
                    sizes[1],
                    sizes[2],
                    out.display(),
                    s.test_train_overlap
                ));
            }
        }
        Command::BuildVocab { train, out, .. } => {
            let v = pipeline::cmd_build_vocab(&cfg, train, out)?;
            if g.json {
                println!("{}", json!({"vocab_size": v.len()}));
            } else {
                note(&format!("vocabulary of {} tokens written to {}", v.len(), out.display()));
            }
        }
        Command::Train { train, vocab, out, init, log, .. } => {
            let req = TrainRequest {
                train_manifest: train,
                vocab,
                init: init.as_deref(),
                out,
                log: log.as_deref(),
            };
            let mut progress = |l: &str| {
                if l.starts_with('#') {
                    note(l.trim_start_matches("# "));
                }
            };
            let o = pipeline::cmd_train(&cfg, &req, exec, &mut progress)?;
            if g.json {
                let losses: Vec<f64> = o.epochs.iter().map(|e| e.loss).collect();
                println!("{}", json!({"epoch_loss": losses, "parameters": o.model.num_parameters()}));
            } else {
                note(&format!("checkpoint written to {}", out.display()));
            }
        }
        Command::Generate { checkpoint, finetuned, vocab, manifest, out, nbest, .. } => {
            let req = GenerateRequest {
                checkpoint,
                second: finetuned.as_deref(),
                vocab,
                manifest,
                out,
                nbest: nbest.as_deref(),
            };
            let m = pipeline::cmd_generate(&cfg, &req, exec)?;
            if g.json {
                println!("{}", json!({"utterances": m.len()}));
            } else {
                note(&format!("{} hypotheses written to {}", m.len(), out.display()));
            }
        }
        Command::Evaluate { refs, hyps, out } => {
            let r = pipeline::cmd_evaluate(refs, hyps)?;
            let text = pipeline::report_text(&cfg, &r);
            if let Some(p) = out {
                std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            }
            if g.json {
                println!("{}", pipeline::report_json(&cfg, &r));
            } else {
                print!("{}", r.to_tsv());
            }
        }
        Command::Verify { suites } => {
            let names: Vec<String> = if suites.is_empty() {
                verify::SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                suites.clone()
            };
            let seed = cfg.seed()?;
            let mut failed = Vec::new();
            for n in &names {
                let r = verify::run_suite(n, seed)
                    .ok_or_else(|| Error::Config(format!("unknown suite {n:?}")))??;
                if g.json {
                    println!("{}", json!({"suite": r.name, "passed": r.passed, "detail": r.detail}));
                } else {
                    println!("{}\t{}\t{}", r.name, if r.passed { "pass" } else { "FAIL" }, r.detail);
                }
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Verify(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            let (cat, code) = category(&e);
            eprintln!("error[{cat}]: {e}");
            ExitCode::from(code)
        }
        Err(Failure::Verify(names)) => {
            eprintln!("error[verify]: failed suites: {names}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

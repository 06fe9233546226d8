//! `q3dk` command-line tool.

mod chat;
mod data;
mod train;

use std::io::{self, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use q3dk::chat_template::{resolve_mode, ChatMessage, Mode};
use q3dk::generation::{stream, EventKind, GenerationParams, ModelSession, TokenEvent};
use q3dk::model::{file, preset, preset_names, Model};
use q3dk::tokenizer::{train_bpe, Vocab, DEFAULT_SPECIALS};

pub const BUDGET_MARKER: &str = "[budget reached: injected stop-thinking instruction]";

#[derive(Parser)]
#[command(name = "q3dk", version, about = "Desk-scale Qwen3 engine")]
struct Cli {
    /// Weight file.
    #[arg(long, global = true, env = "Q3DK_MODEL")]
    model: Option<PathBuf>,
    /// Tokenizer file.
    #[arg(long, global = true, env = "Q3DK_TOKENIZER")]
    tokenizer: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace. Falls back to Q3DK_LOG.
    #[arg(long, global = true)]
    log_level: Option<log::LevelFilter>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer.
    Tokenizer {
        /// Training text files.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized model.
    Init {
        /// One of the preset names; see `q3dk init --list`.
        #[arg(long, required_unless_present = "list")]
        preset: Option<String>,
        #[arg(long, required_unless_present = "list")]
        out: Option<PathBuf>,
        #[arg(long)]
        list: bool,
    },
    /// Supervised fine-tuning on transcripts.
    Train {
        /// JSONL, one conversation per line ending in an assistant turn.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Off-policy then on-policy distillation from a teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// JSONL, one conversation per line ending in a user turn.
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// GRPO with exact-match rewards.
    Grpo {
        /// JSONL of `{"prompt": ..., "answer": ...}`.
        #[arg(long)]
        tasks: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Continue one conversation.
    Generate {
        /// A single user message.
        #[arg(long, conflicts_with = "messages", required_unless_present = "messages")]
        prompt: Option<String>,
        /// JSONL of role-tagged records ending in a user turn.
        #[arg(long)]
        messages: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Interactive chat. Type /think or /no_think inside a message to switch
    /// modes; /reset clears the history, /exit leaves.
    Chat {
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Print the config and tensor table of a weight file.
    Inspect,
}

#[derive(Args)]
pub struct RunArgs {
    /// Run config as key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Where to write the trained weights.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV, appended to.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct SamplingArgs {
    #[arg(long)]
    thinking_budget: Option<usize>,
    /// `false` forces non-thinking mode whatever the flags say.
    #[arg(long)]
    enable_thinking: Option<bool>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    presence_penalty: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Print one `{phase}\t{id}\t{text}` line per token.
    #[arg(long)]
    events: bool,
}

impl SamplingArgs {
    /// The mode's preset with the overrides applied.
    pub fn params(&self, mode: Mode, seed: u64) -> GenerationParams {
        let mut p = GenerationParams::for_mode(mode);
        p.seed = seed;
        p.thinking_budget = self.thinking_budget;
        p.temperature = self.temperature.unwrap_or(p.temperature);
        p.top_p = self.top_p.unwrap_or(p.top_p);
        p.top_k = self.top_k.or(p.top_k);
        p.presence_penalty = self.presence_penalty.unwrap_or(p.presence_penalty);
        p.max_new_tokens = self.max_new_tokens.unwrap_or(p.max_new_tokens);
        p
    }
}

/// A mistake in how the tool was invoked; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Usage(format!("--{flag} is required for this command")).into())
}

pub fn load_model(path: &Path) -> Result<Model> {
    file::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

/// Prints generation events. Thinking is dimmed on a terminal; with
/// `events` every token becomes one line.
pub struct Printer {
    events: bool,
    dim: bool,
    fired: bool,
    in_thinking: bool,
}

impl Printer {
    pub fn new(events: bool) -> Self {
        Self { events, dim: !events && io::stdout().is_terminal(), fired: false, in_thinking: false }
    }

    pub fn event(&mut self, out: &mut impl Write, ev: &TokenEvent) -> io::Result<()> {
        if ev.kind == EventKind::Injected && !self.fired {
            self.fired = true;
            self.set_dim(out, false)?;
            if self.events {
                writeln!(out, "{BUDGET_MARKER}")?;
            } else {
                write!(out, "\n{BUDGET_MARKER}\n")?;
            }
        }
        if self.events {
            writeln!(out, "{ev}")?;
        } else if ev.kind != EventKind::Injected {
            self.set_dim(out, ev.kind == EventKind::Thinking)?;
            write!(out, "{}", ev.text)?;
        }
        out.flush()
    }

    /// Ends the turn with a newline, which in event mode leaves a blank line
    /// between turns.
    pub fn finish(&mut self, out: &mut impl Write) -> io::Result<()> {
        self.set_dim(out, false)?;
        writeln!(out)?;
        out.flush()
    }

    fn set_dim(&mut self, out: &mut impl Write, on: bool) -> io::Result<()> {
        if self.dim && on != self.in_thinking {
            write!(out, "{}", if on { "\x1b[2m" } else { "\x1b[0m" })?;
        }
        self.in_thinking = on;
        Ok(())
    }
}

fn cmd_tokenizer(corpus: &[PathBuf], vocab_size: usize, out: &Path) -> Result<()> {
    let mut text = Vec::new();
    for p in corpus {
        text.extend(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let vocab = train_bpe(&text, vocab_size, &DEFAULT_SPECIALS)?;
    vocab.save(out)?;
    log::info!("{} merges over {} corpus bytes", vocab.merges().len(), text.len());
    println!("{}", vocab.len());
    Ok(())
}

fn cmd_init(cli: &Cli, name: &str, out: &Path) -> Result<()> {
    let vocab = load_vocab(require(&cli.tokenizer, "tokenizer")?)?;
    let cfg = preset(name).map_err(|e| Usage(e.to_string()))?.with_vocab(vocab.len());
    let model = Model::init(cfg, cli.seed.unwrap_or(0))?;
    file::save(out, &model)?;
    println!("{}", model.weights().param_count());
    Ok(())
}

fn cmd_generate(cli: &Cli, prompt: &Option<String>, messages: &Option<PathBuf>, sampling: &SamplingArgs) -> Result<()> {
    let model = load_model(require(&cli.model, "model")?)?;
    let vocab = load_vocab(require(&cli.tokenizer, "tokenizer")?)?;
    let messages = match (prompt, messages) {
        (Some(p), _) => vec![ChatMessage::user(p.clone())],
        (None, Some(path)) => data::read_messages(path)?,
        (None, None) => bail!(Usage("--prompt or --messages is required".into())),
    };
    let mode = resolve_mode(&messages, sampling.enable_thinking).mode;
    let ids = q3dk::generation::prompt_ids(&vocab, &messages, mode)?;
    let params = sampling.params(mode, cli.seed.unwrap_or(0));
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut printer = Printer::new(sampling.events);
    let g = stream(&mut ModelSession::new(&model), &vocab, &ids, mode, &params, &mut |ev| {
        printer.event(&mut out, ev).map_err(q3dk::Error::from)
    })?;
    printer.finish(&mut out)?;
    log::info!("{:?} after {} thinking and {} response tokens", g.stop, g.thinking.len(), g.response.len());
    Ok(())
}

fn cmd_inspect(cli: &Cli) -> Result<()> {
    let path = require(&cli.model, "model")?;
    let summary = file::inspect(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "# format version {}", summary.version)?;
    write!(out, "{}", summary.config.to_text())?;
    writeln!(out)?;
    let mut total = 0u64;
    for e in &summary.entries {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{}\t[{}]\t{:?}", e.name, shape.join(", "), e.dtype)?;
        total += e.shape.iter().product::<usize>() as u64;
    }
    writeln!(out, "# {} tensors, {total} parameters", summary.entries.len())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Tokenizer { corpus, vocab_size, out } => cmd_tokenizer(corpus, *vocab_size, out),
        Command::Init { list: true, .. } => {
            preset_names().iter().for_each(|n| println!("{n}"));
            Ok(())
        }
        Command::Init { preset, out, .. } => cmd_init(cli, preset.as_deref().unwrap_or_default(), out.as_deref().unwrap()),
        Command::Train { data, run } => train::cmd_train(cli, data, run),
        Command::Distill { teacher, prompts, run } => train::cmd_distill(cli, teacher, prompts, run),
        Command::Grpo { tasks, run } => train::cmd_grpo(cli, tasks, run),
        Command::Generate { prompt, messages, sampling } => cmd_generate(cli, prompt, messages, sampling),
        Command::Chat { sampling } => chat::cmd_chat(cli, sampling),
        Command::Inspect => cmd_inspect(cli),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<Usage>() || matches!(e.downcast_ref::<q3dk::Error>(), Some(q3dk::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut logger = env_logger::Builder::from_env(env_logger::Env::new().filter_or("Q3DK_LOG", "warn"));
    if let Some(level) = cli.log_level {
        logger.filter_level(level);
    }
    logger.target(env_logger::Target::Stderr).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

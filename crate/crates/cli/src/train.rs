//! Training subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use q3dk::chat_template::{parse_assistant, render, render_prompt, resolve_mode, ChatMessage, Mode, Role};
use q3dk::generation::{prompt_ids, GenerationParams};
use q3dk::model::{file, Model};
use q3dk::tokenizer::{Vocab, THINK_OPEN};
use q3dk::training::{
    grpo_step, offpolicy_distill_dataset, onpolicy_distill_step, sample_group, sft_step, DistillPrompt, GrpoConfig,
    MetricsRow, MetricsWriter, OptimState, RunConfig, SftExample,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{data, load_model, load_vocab, require, Cli, RunArgs, Usage};

fn run_config(cli: &Cli, args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| Usage(format!("run config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.optim.lr = args.lr.unwrap_or(cfg.optim.lr);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.optim.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

struct Session {
    model: Model,
    vocab: Vocab,
    cfg: RunConfig,
    metrics: Option<MetricsWriter>,
}

impl Session {
    fn open(cli: &Cli, args: &RunArgs) -> Result<Self> {
        let cfg = run_config(cli, args)?;
        let model = load_model(require(&cli.model, "model")?)?;
        let vocab = load_vocab(require(&cli.tokenizer, "tokenizer")?)?;
        if model.config().vocab_size != vocab.len() {
            bail!(Usage(format!("model expects {} ids, tokenizer has {}", model.config().vocab_size, vocab.len())));
        }
        let metrics = args.metrics.as_deref().map(MetricsWriter::open).transpose()?;
        Ok(Self { model, vocab, cfg, metrics })
    }

    fn record(&mut self, row: MetricsRow) -> Result<()> {
        log::info!("{row:?}");
        if let Some(m) = &mut self.metrics {
            m.write(&row)?;
        }
        Ok(())
    }

    fn save(&self, out: &Path) -> Result<()> {
        file::save(out, &self.model).with_context(|| format!("writing {}", out.display()))
    }

    /// Cycles through `examples` for `steps` SFT updates, numbering metrics
    /// rows from `first_step`.
    fn sft(&mut self, examples: &[SftExample], steps: usize, first_step: usize) -> Result<()> {
        let mut opt = OptimState::new(self.cfg.optim.clone())?;
        let b = self.cfg.batch_size;
        for s in 0..steps {
            let batch: Vec<SftExample> = (0..b).map(|i| examples[(s * b + i) % examples.len()].clone()).collect();
            let r = sft_step(&mut self.model, &batch, &mut opt)?;
            self.record(MetricsRow { step: first_step + s, loss: Some(r.loss), balance_loss: r.balance_loss, ..Default::default() })?;
        }
        Ok(())
    }
}

/// The last assistant turn is scored; everything before it is context.
fn sft_example(vocab: &Vocab, conv: &[ChatMessage], max_context: usize) -> Result<Option<SftExample>> {
    let Some((_, context)) = conv.split_last().filter(|(m, _)| m.role == Role::Assistant) else {
        bail!("conversation does not end with an assistant turn");
    };
    let ids = vocab.encode_str(&render(conv)?, true);
    if ids.len() > max_context + 1 {
        return Ok(None);
    }
    let prompt_len = vocab.encode_str(&render_prompt(context)?, true).len();
    Ok(Some(SftExample::from_sequence(&ids, prompt_len)?))
}

pub fn cmd_train(cli: &Cli, data_path: &Path, args: &RunArgs) -> Result<()> {
    let mut s = Session::open(cli, args)?;
    let convs = data::read_conversations(data_path)?;
    let mut examples = Vec::new();
    for (i, c) in convs.iter().enumerate() {
        match sft_example(&s.vocab, c, s.model.config().max_context).with_context(|| format!("conversation {}", i + 1))? {
            Some(e) => examples.push(e),
            None => log::warn!("conversation {} exceeds the context window; skipped", i + 1),
        }
    }
    if examples.is_empty() {
        bail!("no conversation fits the context window");
    }
    s.sft(&examples, s.cfg.steps, 1)?;
    s.save(&args.out)
}

pub fn cmd_distill(cli: &Cli, teacher_path: &Path, prompts_path: &Path, args: &RunArgs) -> Result<()> {
    let mut s = Session::open(cli, args)?;
    let teacher = load_model(teacher_path)?;
    let prompts: Vec<DistillPrompt> = data::read_conversations(prompts_path)?
        .into_iter()
        .map(|messages| {
            let mode = resolve_mode(&messages, None).mode;
            DistillPrompt { messages, mode }
        })
        .collect();
    let params = GenerationParams { max_new_tokens: s.cfg.max_new_tokens, seed: s.cfg.seed, ..GenerationParams::thinking() };

    let set = offpolicy_distill_dataset(&teacher, &s.vocab, &prompts, &params)?;
    log::info!("off-policy: {} teacher transcripts, {} dropped", set.examples.len(), set.dropped);
    let offpolicy_steps = if set.examples.is_empty() { 0 } else { s.cfg.offpolicy_steps };
    s.sft(&set.examples, offpolicy_steps, 1)?;

    let mut opt = OptimState::new(s.cfg.optim.clone())?;
    let b = s.cfg.batch_size;
    let rollout = GenerationParams { temperature: 1.0, top_p: 1.0, top_k: None, ..params };
    for step in 0..s.cfg.steps {
        let batch: Vec<DistillPrompt> = (0..b).map(|i| prompts[(step * b + i) % prompts.len()].clone()).collect();
        let gp = GenerationParams { seed: s.cfg.seed.wrapping_add((step * b) as u64), ..rollout.clone() };
        let r = onpolicy_distill_step(&mut s.model, &teacher, &s.vocab, &batch, &gp, s.cfg.kl_direction, &mut opt)?;
        s.record(MetricsRow { step: offpolicy_steps + step + 1, kl: Some(r.kl), ..Default::default() })?;
    }
    s.save(&args.out)
}

/// 1 when the response, with any think block removed, equals the answer.
fn exact_match(vocab: &Vocab, mode: Mode, response: &[u32], answer: &str) -> f64 {
    let mut raw = if mode == Mode::Thinking { format!("{THINK_OPEN}\n") } else { String::new() };
    raw.push_str(&vocab.decode_lossy(response).unwrap_or_default());
    let text = if mode == Mode::Thinking { parse_assistant(&raw).response } else { raw };
    let text = text.strip_suffix(q3dk::tokenizer::IM_END).unwrap_or(&text);
    (text.trim() == answer.trim()) as u8 as f64
}

pub fn cmd_grpo(cli: &Cli, tasks_path: &Path, args: &RunArgs) -> Result<()> {
    let mut s = Session::open(cli, args)?;
    let tasks = data::read_tasks(tasks_path)?;
    let im_end = s.vocab.chat_ids()?.im_end;
    let prompts = tasks
        .iter()
        .map(|t| {
            let messages = [ChatMessage::user(t.prompt.clone())];
            let mode = resolve_mode(&messages, None).mode;
            Ok((prompt_ids(&s.vocab, &messages, mode)?, mode))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = s.model.clone();
    let cfg = GrpoConfig { clip_eps: s.cfg.clip_eps, kl_coef: s.cfg.kl_coef };
    let mut opt = OptimState::new(s.cfg.optim.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.cfg.seed);
    let b = s.cfg.batch_size;
    for step in 0..s.cfg.steps {
        let mut groups = Vec::with_capacity(b);
        let mut reward_sum = 0.0;
        for i in 0..b {
            let k = (step * b + i) % tasks.len();
            let (prompt, mode) = &prompts[k];
            let room = s.model.config().max_context.saturating_sub(prompt.len());
            let len = s.cfg.max_new_tokens.min(room);
            if len == 0 {
                bail!("task {} leaves no room to answer in the context window", k + 1);
            }
            let vocab = &s.vocab;
            let answer = &tasks[k].answer;
            let g = sample_group(&s.model, prompt, s.cfg.group_size, len, Some(im_end), &mut rng, &mut |r: &[u32]| {
                exact_match(vocab, *mode, r, answer)
            })?;
            reward_sum += g.rewards.iter().sum::<f64>();
            groups.push(g);
        }
        let r = grpo_step(&mut s.model, &reference, &groups, &cfg, &mut opt)?;
        log::info!("step {}: mean reward {:.3}, {} groups skipped", step + 1, reward_sum / (b * s.cfg.group_size) as f64, r.skipped_groups);
        let trained = (r.tokens > 0).then_some(());
        s.record(MetricsRow {
            step: step + 1,
            loss: trained.map(|_| r.loss),
            kl: trained.map(|_| r.kl),
            entropy: trained.map(|_| r.entropy),
            ..Default::default()
        })?;
    }
    s.save(&args.out)
}

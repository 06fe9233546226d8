//! Interactive chat loop.

use std::io::{self, BufRead, IsTerminal};

use anyhow::Result;
use q3dk::chat_template::{parse_assistant, resolve_mode, ChatMessage, Mode};
use q3dk::generation::{prompt_ids, stream, Generation, ModelSession};
use q3dk::tokenizer::{Vocab, IM_END, IM_START, THINK_CLOSE, THINK_OPEN};

use crate::{load_model, load_vocab, require, Cli, Printer, SamplingArgs};

fn scrub(text: &str) -> String {
    [IM_START, IM_END, THINK_OPEN, THINK_CLOSE].iter().fold(text.to_string(), |t, r| t.replace(r, ""))
}

/// The generated turn as a history message. Control strings the model
/// produced are dropped so the history stays renderable.
fn assistant_turn(vocab: &Vocab, mode: Mode, g: &Generation) -> Result<ChatMessage> {
    let mut raw = String::new();
    if mode == Mode::Thinking {
        raw.push_str(THINK_OPEN);
        raw.push('\n');
        raw.push_str(&vocab.decode_lossy(&g.thinking)?);
        raw.push_str(&vocab.decode_lossy(&g.injected)?);
    }
    raw.push_str(&vocab.decode_lossy(&g.response)?);
    let p = if mode == Mode::Thinking {
        parse_assistant(&raw)
    } else {
        parse_assistant(&format!("{THINK_OPEN}\n\n{THINK_CLOSE}\n\n{raw}"))
    };
    Ok(ChatMessage::assistant(Some(scrub(&p.thinking)), scrub(&p.response)))
}

/// Drops the oldest exchanges until the prompt fits, keeping a leading
/// system message. `None` when even the newest message alone is too long.
fn fit(vocab: &Vocab, history: &mut Vec<ChatMessage>, mode: Mode, limit: usize) -> Result<Option<Vec<u32>>> {
    loop {
        let ids = prompt_ids(vocab, history, mode)?;
        if ids.len() < limit {
            return Ok(Some(ids));
        }
        let start = usize::from(history.first().is_some_and(|m| m.role == q3dk::chat_template::Role::System));
        if history.len() - start < 3 {
            return Ok(None);
        }
        history.drain(start..start + 2);
    }
}

pub fn cmd_chat(cli: &Cli, sampling: &SamplingArgs) -> Result<()> {
    let model = load_model(require(&cli.model, "model")?)?;
    let vocab = load_vocab(require(&cli.tokenizer, "tokenizer")?)?;
    let seed = cli.seed.unwrap_or(0);
    let interactive = io::stdin().is_terminal();
    let mut history: Vec<ChatMessage> = Vec::new();
    let mut turn = 0u64;
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            eprint!("> ");
        }
        let Some(line) = lines.next().transpose()? else { break };
        let line = line.trim();
        match line {
            "" => continue,
            "/exit" => break,
            "/reset" => {
                history.clear();
                continue;
            }
            _ => {}
        }
        history.push(ChatMessage::user(line));
        let mode = resolve_mode(&history, sampling.enable_thinking).mode;
        let Some(ids) = fit(&vocab, &mut history, mode, model.config().max_context)? else {
            eprintln!("message does not fit the {}-token context", model.config().max_context);
            history.pop();
            continue;
        };
        let params = sampling.params(mode, seed.wrapping_add(turn));
        turn += 1;
        let stdout = io::stdout();
        let mut out = stdout.lock();
        let mut printer = Printer::new(sampling.events);
        let g = stream(&mut ModelSession::new(&model), &vocab, &ids, mode, &params, &mut |ev| {
            printer.event(&mut out, ev).map_err(q3dk::Error::from)
        })?;
        printer.finish(&mut out)?;
        log::info!("{mode:?} turn ended with {:?}", g.stop);
        history.push(assistant_turn(&vocab, mode, &g)?);
    }
    Ok(())
}

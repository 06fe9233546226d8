use super::optim::OptimState;
use super::sft::{named_grads, SftExample};
use crate::chat_template::{last_flag, render, render_prompt, validate, ChatMessage, Mode, Role, NO_THINK_FLAG, THINK_FLAG};
use crate::error::{Error, Result};
use crate::generation::{generate, prompt_ids, GenerationParams, ModelSession, StopReason};
use crate::model::Model;
use crate::numerics::{kernels, kl_rows, Tape, Tensor};
use crate::tokenizer::Vocab;

/// Which way the distillation divergence points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(teacher ∥ student)`, mass covering.
    #[default]
    TeacherToStudent,
    /// `KL(student ∥ teacher)`, mode seeking.
    StudentToTeacher,
}

/// A conversation to continue and the mode to continue it in.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillPrompt {
    pub messages: Vec<ChatMessage>,
    pub mode: Mode,
}

impl DistillPrompt {
    /// The messages with the mode flag appended to the final user turn when it
    /// does not already end on that flag.
    pub fn flagged_messages(&self) -> Vec<ChatMessage> {
        let mut messages = self.messages.clone();
        if let Some(last) = messages.last_mut().filter(|m| m.role == Role::User) {
            if last_flag(&last.content) != Some(self.mode) {
                let flag = if self.mode == Mode::Thinking { THINK_FLAG } else { NO_THINK_FLAG };
                last.content = format!("{} {flag}", last.content);
            }
        }
        messages
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillReport {
    /// Mean per-position KL before the update.
    pub kl: f64,
    pub positions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillEval {
    pub mean_kl: f64,
    /// Fraction of scored positions where student and teacher argmax agree.
    pub argmax_agreement: f64,
    pub positions: usize,
}

fn check_pair(student: &Model, teacher: &Model, vocab: &Vocab) -> Result<()> {
    let (s, t) = (student.config().vocab_size, teacher.config().vocab_size);
    if s != t || s != vocab.len() {
        return Err(Error::Config(format!(
            "student vocabulary {s}, teacher vocabulary {t}, tokenizer {}",
            vocab.len()
        )));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Student samples one continuation per prompt; the loss is the mean, over
/// every position of the assistant turn (the mode's think-block opening
/// included), of the KL between teacher and student next-token distributions.
/// One update; returns the KL before it.
pub fn onpolicy_distill_step(
    student: &mut Model,
    teacher: &Model,
    vocab: &Vocab,
    prompts: &[DistillPrompt],
    params: &GenerationParams,
    direction: KlDirection,
    opt: &mut OptimState,
) -> Result<DistillReport> {
    check_pair(student, teacher, vocab)?;
    let im_end = vocab.chat_ids()?.im_end;
    let mut sequences = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let messages = p.flagged_messages();
        let prompt = prompt_ids(vocab, &messages, p.mode)?;
        let turn_start = vocab.encode_str(&render_prompt(&messages)?, true).len();
        let room = student.config().max_context.saturating_sub(prompt.len() + 1);
        let gp = GenerationParams {
            seed: params.seed.wrapping_add(i as u64),
            max_new_tokens: params.max_new_tokens.min(room),
            ..params.clone()
        };
        let g = generate(&mut ModelSession::new(student), vocab, &prompt, p.mode, &gp)?;
        let mut ids = prompt.clone();
        ids.extend(g.all_ids());
        if g.stop == StopReason::EndOfTurn {
            ids.push(im_end);
        }
        sequences.push(SftExample::from_sequence(&ids, turn_start)?);
    }
    let positions: usize = sequences.iter().map(SftExample::scored).sum();
    if positions == 0 {
        return Err(Error::Contract("the student generated nothing to distill on".into()));
    }

    let tape = Tape::new();
    let bound = student.bind(&tape, true);
    let mut total = None;
    let mut kl_value = 0.0;
    for ex in &sequences {
        let rows: Vec<usize> = (0..ex.mask.len()).filter(|&i| ex.mask[i]).collect();
        let teacher_logits = teacher.forward(&ex.inputs, &mut teacher.new_cache())?;
        let teacher_rows = gather(&teacher_logits, &rows);
        let out = student.forward_on(&tape, &bound, &ex.inputs, &mut student.new_cache())?;
        let student_rows = tape.gather_rows(out.logits, &rows)?;
        let kl = match direction {
            KlDirection::TeacherToStudent => tape.kl_teacher_student(student_rows, &kernels::softmax(&teacher_rows)?)?,
            KlDirection::StudentToTeacher => tape.kl_student_teacher(student_rows, &kernels::log_softmax(&teacher_rows)?)?,
        };
        let weighted = tape.scale(kl, rows.len() as f64 / positions as f64)?;
        kl_value += tape.value(weighted).item()?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let loss = total.expect("at least one sequence");
    let mut grads = tape.backward(loss)?;
    let grads = named_grads(&bound, &mut grads);
    opt.step_model(student.weights_mut(), &grads)?;
    Ok(DistillReport { kl: kl_value, positions })
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let v = t.last_dim();
    let mut data = Vec::with_capacity(rows.len() * v);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), v], data).expect("row-aligned gather")
}

/// Held-out `KL(teacher ∥ student)` and argmax agreement over the scored
/// positions of `examples`.
pub fn distill_eval(student: &Model, teacher: &Model, examples: &[SftExample]) -> Result<DistillEval> {
    let mut kl = 0.0;
    let mut agree = 0usize;
    let mut positions = 0usize;
    for ex in examples {
        ex.validate()?;
        let rows: Vec<usize> = (0..ex.mask.len()).filter(|&i| ex.mask[i]).collect();
        if rows.is_empty() {
            continue;
        }
        let s = gather(&student.forward(&ex.inputs, &mut student.new_cache())?, &rows);
        let t = gather(&teacher.forward(&ex.inputs, &mut teacher.new_cache())?, &rows);
        kl += kl_rows(&kernels::softmax(&t)?, &kernels::log_softmax(&s)?);
        agree += (0..rows.len()).filter(|&r| argmax(s.row(r)) == argmax(t.row(r))).count();
        positions += rows.len();
    }
    if positions == 0 {
        return Err(Error::Contract("no scored positions to evaluate".into()));
    }
    Ok(DistillEval {
        mean_kl: kl / positions as f64,
        argmax_agreement: agree as f64 / positions as f64,
        positions,
    })
}

/// Result of building the off-policy set.
#[derive(Clone, Debug, PartialEq)]
pub struct OffPolicySet {
    pub examples: Vec<SftExample>,
    /// The rendered transcripts behind `examples`.
    pub transcripts: Vec<Vec<ChatMessage>>,
    /// Teacher outputs that could not be turned into a valid transcript.
    pub dropped: usize,
}

/// The teacher answers every prompt in its mode; each answer becomes a
/// rendered transcript and a prompt-masked SFT example.
///
/// Thinking-mode answers whose thinking came out empty are dropped, as are
/// answers that spell a reserved control string.
pub fn offpolicy_distill_dataset(
    teacher: &Model,
    vocab: &Vocab,
    prompts: &[DistillPrompt],
    params: &GenerationParams,
) -> Result<OffPolicySet> {
    if teacher.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "teacher vocabulary {} vs tokenizer {}",
            teacher.config().vocab_size,
            vocab.len()
        )));
    }
    let think_close = vocab.chat_ids()?.think_close;
    let mut set = OffPolicySet { examples: Vec::new(), transcripts: Vec::new(), dropped: 0 };
    for (i, p) in prompts.iter().enumerate() {
        let messages = p.flagged_messages();
        let prompt = prompt_ids(vocab, &messages, p.mode)?;
        let room = teacher.config().max_context.saturating_sub(prompt.len() + 1);
        let gp = GenerationParams {
            seed: params.seed.wrapping_add(i as u64),
            max_new_tokens: params.max_new_tokens.min(room / 2),
            ..params.clone()
        };
        let g = generate(&mut ModelSession::new(teacher), vocab, &prompt, p.mode, &gp)?;
        let thinking_ids: Vec<u32> = g.thinking.iter().copied().filter(|&t| t != think_close).collect();
        let thinking = vocab.decode_lossy(&thinking_ids)?;
        let thinking = thinking.strip_suffix('\n').unwrap_or(&thinking).to_string();
        let response = vocab.decode_lossy(&g.response)?;
        let response = response.strip_prefix("\n\n").unwrap_or(&response).to_string();
        if p.mode == Mode::Thinking && thinking.is_empty() {
            set.dropped += 1;
            continue;
        }
        let mut transcript = messages.clone();
        transcript.push(ChatMessage::assistant(Some(thinking), response));
        if validate(&transcript).is_err() {
            set.dropped += 1;
            continue;
        }
        let text = render(&transcript)?;
        let prefix = vocab.encode_str(&render_prompt(&messages)?, true);
        let ids = vocab.encode_str(&text, true);
        if !ids.starts_with(&prefix) || ids.len() > teacher.config().max_context {
            set.dropped += 1;
            continue;
        }
        set.examples.push(SftExample::from_sequence(&ids, prefix.len())?);
        set.transcripts.push(transcript);
    }
    Ok(set)
}

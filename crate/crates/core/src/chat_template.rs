//! The chat template, thinking-mode flags and assistant-output parsing.
//!
//! A completed assistant turn always carries a think block:
//!
//! ```text
//! <|im_start|>assistant
//! <think>
//! {thinking}
//! </think>
//!
//! {response}<|im_end|>
//! ```
//!
//! Without thinking the block is kept but empty (`<think>\n\n</think>\n\n`).

use std::fmt;

use crate::error::{Error, Result};
use crate::tokenizer::{IM_END, IM_START, THINK_CLOSE, THINK_OPEN};

pub const THINK_FLAG: &str = "/think";
pub const NO_THINK_FLAG: &str = "/no_think";

/// What a non-thinking assistant turn opens with.
pub const EMPTY_THINK_BLOCK: &str = "<think>\n\n</think>\n\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(Error::Format(format!("unknown role {other:?}"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One message. For assistant turns `content` is the response and `thinking`
/// the reasoning; an empty reasoning is stored as `None`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    pub thinking: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into(), thinking: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), thinking: None }
    }

    pub fn assistant(thinking: Option<String>, response: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: response.into(),
            thinking: thinking.filter(|t| !t.is_empty()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Thinking,
    NonThinking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSource {
    Default,
    FlagInTurn,
    EnableThinkingOverride,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedMode {
    pub mode: Mode,
    pub source: ModeSource,
}

impl ResolvedMode {
    pub fn thinking(self) -> bool {
        self.mode == Mode::Thinking
    }
}

/// The last `/think` or `/no_think` appearing as a whitespace-separated word.
pub fn last_flag(text: &str) -> Option<Mode> {
    text.split_whitespace().rev().find_map(|w| match w {
        THINK_FLAG => Some(Mode::Thinking),
        NO_THINK_FLAG => Some(Mode::NonThinking),
        _ => None,
    })
}

/// Thinking by default; otherwise the last flag found in any user or system
/// message wins. `enable_thinking = Some(false)` forces non-thinking.
pub fn resolve_mode(messages: &[ChatMessage], enable_thinking: Option<bool>) -> ResolvedMode {
    if enable_thinking == Some(false) {
        return ResolvedMode { mode: Mode::NonThinking, source: ModeSource::EnableThinkingOverride };
    }
    messages
        .iter()
        .rev()
        .filter(|m| m.role != Role::Assistant)
        .find_map(|m| last_flag(&m.content))
        .map_or(ResolvedMode { mode: Mode::Thinking, source: ModeSource::Default }, |mode| ResolvedMode {
            mode,
            source: ModeSource::FlagInTurn,
        })
}

const RESERVED: [&str; 4] = [IM_START, IM_END, THINK_OPEN, THINK_CLOSE];

/// Checks ordering (optional system message, then strictly alternating user
/// and assistant turns starting with user) and that no text contains a
/// reserved control string.
pub fn validate(messages: &[ChatMessage]) -> Result<()> {
    let body = match messages.first() {
        Some(m) if m.role == Role::System => &messages[1..],
        _ => messages,
    };
    for (i, m) in body.iter().enumerate() {
        let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != want {
            return Err(Error::Format(format!("message {i} is {} where {} was expected", m.role, want)));
        }
    }
    for m in messages {
        if m.role != Role::Assistant && m.thinking.is_some() {
            return Err(Error::Format(format!("{} message carries thinking content", m.role)));
        }
        for text in std::iter::once(&m.content).chain(&m.thinking) {
            if let Some(r) = RESERVED.iter().find(|r| text.contains(*r)) {
                return Err(Error::Format(format!("{} message contains reserved string {r}", m.role)));
            }
        }
    }
    Ok(())
}

fn push_message(out: &mut String, m: &ChatMessage) {
    out.push_str(IM_START);
    out.push_str(m.role.as_str());
    out.push('\n');
    if m.role == Role::Assistant {
        out.push_str(&assistant_body(m.thinking.as_deref(), &m.content));
    } else {
        out.push_str(&m.content);
    }
    out.push_str(IM_END);
    out.push('\n');
}

/// The assistant text between `<|im_start|>assistant\n` and `<|im_end|>`.
pub fn assistant_body(thinking: Option<&str>, response: &str) -> String {
    match thinking {
        Some(t) if !t.is_empty() => format!("{THINK_OPEN}\n{t}\n{THINK_CLOSE}\n\n{response}"),
        _ => format!("{EMPTY_THINK_BLOCK}{response}"),
    }
}

/// Renders a transcript.
pub fn render(messages: &[ChatMessage]) -> Result<String> {
    validate(messages)?;
    let mut out = String::new();
    for m in messages {
        push_message(&mut out, m);
    }
    Ok(out)
}

/// Renders a transcript ending in a user turn, followed by the assistant
/// header the model continues from. The think block that follows is emitted
/// by the generator according to the resolved mode.
pub fn render_prompt(messages: &[ChatMessage]) -> Result<String> {
    if messages.last().map(|m| m.role) != Some(Role::User) {
        return Err(Error::Format("a generation prompt must end with a user message".into()));
    }
    let mut out = render(messages)?;
    out.push_str(IM_START);
    out.push_str("assistant\n");
    Ok(out)
}

/// Ways generated assistant text can depart from the template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Deviation {
    /// No `</think>` at all: everything is taken as the response.
    MissingThinkBlock,
    /// `</think>` present without a leading `<think>`.
    MissingThinkOpen,
    /// The closing tag is not followed by a blank line.
    MissingSeparator,
    /// A think tag appears again inside the response.
    ThinkTagInResponse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedAssistant {
    pub thinking: String,
    pub response: String,
    pub deviations: Vec<Deviation>,
}

impl ParsedAssistant {
    pub fn is_well_formed(&self) -> bool {
        self.deviations.is_empty()
    }
}

/// Splits generated assistant text (after `<|im_start|>assistant\n`, with or
/// without a trailing `<|im_end|>`) into thinking and response. Never fails;
/// departures from the template are reported in `deviations`.
pub fn parse_assistant(raw: &str) -> ParsedAssistant {
    let raw = raw.strip_suffix(IM_END).unwrap_or(raw);
    let mut deviations = Vec::new();
    let Some(close) = raw.find(THINK_CLOSE) else {
        deviations.push(Deviation::MissingThinkBlock);
        if raw.contains(THINK_OPEN) {
            deviations.push(Deviation::ThinkTagInResponse);
        }
        return ParsedAssistant { thinking: String::new(), response: raw.to_string(), deviations };
    };
    let head = &raw[..close];
    let head = match head.strip_prefix(THINK_OPEN) {
        Some(h) => h.strip_prefix('\n').unwrap_or(h),
        None => {
            deviations.push(Deviation::MissingThinkOpen);
            head
        }
    };
    let thinking = head.strip_suffix('\n').unwrap_or(head).to_string();
    let tail = &raw[close + THINK_CLOSE.len()..];
    let response = match tail.strip_prefix("\n\n") {
        Some(r) => r,
        None => {
            deviations.push(Deviation::MissingSeparator);
            tail
        }
    };
    if response.contains(THINK_OPEN) || response.contains(THINK_CLOSE) {
        deviations.push(Deviation::ThinkTagInResponse);
    }
    ParsedAssistant { thinking, response: response.to_string(), deviations }
}

/// Inverse of [`render`]. Assistant turns must be well formed.
pub fn parse_transcript(text: &str) -> Result<Vec<ChatMessage>> {
    let mut messages = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let body = rest
            .strip_prefix(IM_START)
            .ok_or_else(|| Error::Format(format!("expected {IM_START} at {:?}", truncate(rest))))?;
        let (role, body) = body
            .split_once('\n')
            .ok_or_else(|| Error::Format("message header lacks a newline".into()))?;
        let role = Role::parse(role)?;
        let end = body
            .find(IM_END)
            .ok_or_else(|| Error::Format(format!("unterminated {role} message")))?;
        let content = &body[..end];
        rest = body[end + IM_END.len()..]
            .strip_prefix('\n')
            .ok_or_else(|| Error::Format(format!("{IM_END} not followed by a newline")))?;
        messages.push(match role {
            Role::Assistant => {
                let p = parse_assistant(content);
                if !p.is_well_formed() {
                    return Err(Error::Format(format!("malformed assistant turn: {:?}", p.deviations)));
                }
                ChatMessage::assistant(Some(p.thinking), p.response)
            }
            _ => ChatMessage { role, content: content.to_string(), thinking: None },
        });
    }
    validate(&messages)?;
    Ok(messages)
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(24) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

//! JSONL inputs: conversations as arrays of role-tagged records, and GRPO
//! tasks.

use std::path::Path;

use anyhow::{bail, Context, Result};
use q3dk::chat_template::{ChatMessage, Role};
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    role: String,
    content: String,
    #[serde(default)]
    thinking: Option<String>,
}

impl Record {
    fn into_message(self) -> Result<ChatMessage> {
        let role = Role::parse(&self.role)?;
        Ok(match role {
            Role::Assistant => ChatMessage::assistant(self.thinking, self.content),
            _ if self.thinking.is_some() => bail!("{role} record carries thinking"),
            _ => ChatMessage { role, content: self.content, thinking: None },
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub prompt: String,
    pub answer: String,
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// One conversation per line, each a JSON array of records.
pub fn read_conversations(path: &Path) -> Result<Vec<Vec<ChatMessage>>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let records: Vec<Record> =
            serde_json::from_str(&line).with_context(|| format!("{}:{n}: not a JSON array of records", path.display()))?;
        let messages = records
            .into_iter()
            .map(Record::into_message)
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("{}:{n}", path.display()))?;
        out.push(messages);
    }
    if out.is_empty() {
        bail!("{} holds no conversations", path.display());
    }
    Ok(out)
}

/// One record per line, forming a single conversation.
pub fn read_messages(path: &Path) -> Result<Vec<ChatMessage>> {
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let r: Record = serde_json::from_str(&line).with_context(|| format!("{}:{n}: not a record", path.display()))?;
            r.into_message().with_context(|| format!("{}:{n}", path.display()))
        })
        .collect()
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let tasks = lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).with_context(|| format!("{}:{n}: not a task", path.display())))
        .collect::<Result<Vec<Task>>>()?;
    if tasks.is_empty() {
        bail!("{} holds no tasks", path.display());
    }
    Ok(tasks)
}

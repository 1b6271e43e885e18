//! Enrichment prompts and the JSON-lines response cache.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// The enrichment command; `[domain]` and `[title]` are substituted.
pub const PROMPT_TEMPLATE: &str = "Generate additional contextual information for an item which is type of [domain] with [title]. Provide detailed insights and keywords about the item's features. The output should include specific attributes, and potential users that could enhance the understanding of the item in a cross-domain recommendation context.";

/// Hex SHA-256 of [`PROMPT_TEMPLATE`].
pub fn template_hash() -> String {
    let digest = Sha256::digest(PROMPT_TEMPLATE.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_prompt(item_id: &str, domain_label: &str, title: &str) -> Result<String> {
    if title.trim().is_empty() {
        return Err(Error::Invalid(format!("item {item_id} has an empty title")));
    }
    Ok(PROMPT_TEMPLATE
        .replacen("[domain]", domain_label, 1)
        .replacen("[title]", title, 1))
}

/// `"title. response"`, or the title alone when the response is absent or blank.
pub fn assemble_augmented_text(title: &str, response: Option<&str>) -> String {
    match response.map(str::trim) {
        Some(r) if !r.is_empty() => format!("{title}. {r}"),
        _ => title.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub item_id: String,
    pub command: String,
    pub template_hash: String,
    pub response: Option<String>,
    pub provider: String,
    /// Unix seconds.
    pub created_at: u64,
    pub attempts: u32,
}

impl PromptRecord {
    pub fn pending(item_id: &str, command: String, provider: &str, created_at: u64) -> Self {
        PromptRecord {
            item_id: item_id.to_string(),
            command,
            template_hash: template_hash(),
            response: None,
            provider: provider.to_string(),
            created_at,
            attempts: 0,
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.item_id, &self.template_hash, &self.provider)
    }
}

pub fn parse_cache(text: &str) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.command.is_empty() {
            return Err(Error::Schema {
                line: i + 1,
                msg: "empty command".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a cache; a missing file is an empty cache.
pub fn read_cache(path: &Path) -> Result<Vec<PromptRecord>> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_cache(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_cache(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn append_cache(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Keeps the last record per `(item_id, template_hash, provider)`, in order
/// of each key's first appearance.
pub fn compact(records: &[PromptRecord]) -> Vec<PromptRecord> {
    let mut slot: HashMap<(&str, &str, &str), usize> = HashMap::new();
    let mut out: Vec<PromptRecord> = Vec::new();
    for r in records {
        match slot.get(&r.key()) {
            Some(&i) => out[i] = r.clone(),
            None => {
                slot.insert(r.key(), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

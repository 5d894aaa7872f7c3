//! Prompt assembly: head, labelled context block, labelled question.
//!
//! ```text
//! <head>\n\nContext:\n<context lines>\n\nQuestion:\n<question>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector_store::RetrievalResult;

/// Versioned default head text.
pub const DEFAULT_HEAD: &str = include_str!("../resources/prompt_head_v1.txt");
pub const CONTEXT_LABEL: &str = "Context:";
pub const QUESTION_LABEL: &str = "Question:";
pub const EMPTY_CONTEXT: &str = "(no relevant visual context)";
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("prompt head must be non-empty")]
    EmptyHead,
    #[error("reading prompt head {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    head_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            head_text: DEFAULT_HEAD.trim_end_matches(['\n', '\r']).to_string(),
        }
    }
}

impl PromptTemplate {
    /// Trailing newlines are stripped from the head.
    pub fn new(head_text: impl Into<String>) -> Result<Self, PromptError> {
        let head_text = head_text.into().trim_end_matches(['\n', '\r']).to_string();
        if head_text.trim().is_empty() {
            return Err(PromptError::EmptyHead);
        }
        Ok(Self { head_text })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(text)
    }

    pub fn head_text(&self) -> &str {
        &self.head_text
    }

    pub fn context_label(&self) -> &'static str {
        CONTEXT_LABEL
    }

    pub fn question_label(&self) -> &'static str {
        QUESTION_LABEL
    }

    /// Builds the prompt for a retrieval result, keeping its provenance.
    pub fn assemble(
        &self,
        result: &RetrievalResult,
        question: &str,
        k_used: usize,
    ) -> Result<AssembledPrompt, PromptError> {
        let text = assemble(self, &format_context(result), question)?;
        Ok(AssembledPrompt {
            text,
            retrieved_chunk_ids: result.chunk_ids(),
            similarity_scores: result.scores(),
            question: question.to_string(),
            k_used,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub retrieved_chunk_ids: Vec<String>,
    pub similarity_scores: Vec<f64>,
    pub question: String,
    pub k_used: usize,
}

/// One `[i] <canonical text>` line per hit, or the empty-context sentinel.
pub fn format_context(result: &RetrievalResult) -> String {
    if result.is_empty() {
        return EMPTY_CONTEXT.to_string();
    }
    result
        .hits
        .iter()
        .enumerate()
        .map(|(i, hit)| format!("[{}] {}", i + 1, hit.payload.canonical_text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble(
    template: &PromptTemplate,
    context: &str,
    question: &str,
) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    Ok(format!(
        "{}\n\n{CONTEXT_LABEL}\n{context}\n\n{QUESTION_LABEL}\n{question}",
        template.head_text
    ))
}

/// Context lines (without their `[i] ` prefix) recovered from a prompt built
/// by [`assemble`]. Empty when the prompt carries the empty-context sentinel.
pub fn context_lines(prompt: &str) -> Vec<&str> {
    let start = format!("\n\n{CONTEXT_LABEL}\n");
    let end = format!("\n\n{QUESTION_LABEL}\n");
    let Some(s) = prompt.find(&start) else {
        return vec![];
    };
    let body = &prompt[s + start.len()..];
    let body = match body.find(&end) {
        Some(e) => &body[..e],
        None => body,
    };
    body.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix('[')?;
            let (num, text) = rest.split_once("] ")?;
            num.parse::<usize>().ok().map(|_| text)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector_store::testing::dummy_chunk;
    use crate::vector_store::RetrievedChunk;

    fn result(labels: &[&str]) -> RetrievalResult {
        RetrievalResult {
            hits: labels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let payload = dummy_chunk(l);
                    RetrievedChunk {
                        chunk_id: payload.chunk_id.clone(),
                        score: 1.0 - i as f64 * 0.1,
                        payload,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn empty_context_sentinel() {
        assert_eq!(
            format_context(&RetrievalResult::default()),
            "(no relevant visual context)"
        );
    }

    #[test]
    fn one_line_per_hit_in_rank_order() {
        let r = result(&["car"]);
        assert_eq!(
            format_context(&r),
            format!("[1] {}", r.hits[0].payload.canonical_text)
        );
        let r = result(&["tree", "car", "road", "ship"]);
        let ctx = format_context(&r);
        let lines: Vec<_> = ctx.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("[1] category: tree"));
        assert!(lines[3].starts_with("[4] category: ship"));
    }

    #[test]
    fn layout_rule() {
        let t = PromptTemplate::new("H").unwrap();
        assert_eq!(
            assemble(&t, "[1] T", "Q?").unwrap(),
            "H\n\nContext:\n[1] T\n\nQuestion:\nQ?"
        );
        assert_eq!(
            assemble(&t, "[1] T", "Q?").unwrap(),
            assemble(&t, "[1] T", "Q?").unwrap()
        );
    }

    #[test]
    fn empty_question_rejected() {
        let t = PromptTemplate::default();
        assert!(matches!(
            assemble(&t, "x", "  "),
            Err(PromptError::EmptyQuestion)
        ));
        assert!(matches!(
            PromptTemplate::new("\n"),
            Err(PromptError::EmptyHead)
        ));
    }

    #[test]
    fn provenance_aligned_with_rank() {
        let r = result(&["car", "road"]);
        let p = PromptTemplate::default()
            .assemble(&r, "Where is the car?", DEFAULT_K)
            .unwrap();
        assert_eq!(p.retrieved_chunk_ids, ["img#car", "img#road"]);
        assert_eq!(p.similarity_scores, [1.0, 0.9]);
        assert_eq!(p.k_used, 4);
        let head_at = p.text.find(PromptTemplate::default().head_text()).unwrap();
        let ctx_at = p.text.find("Context:").unwrap();
        let q_at = p.text.find("Question:").unwrap();
        let question_at = p.text.rfind("Where is the car?").unwrap();
        assert!(head_at < ctx_at && ctx_at < q_at && q_at < question_at);
    }

    #[test]
    fn context_lines_recovered() {
        let r = result(&["car", "road"]);
        let p = PromptTemplate::default()
            .assemble(&r, "Q\nwith newline", 4)
            .unwrap();
        let lines = context_lines(&p.text);
        assert_eq!(
            lines,
            [
                r.hits[0].payload.canonical_text.as_str(),
                r.hits[1].payload.canonical_text.as_str()
            ]
        );
        let empty = PromptTemplate::default()
            .assemble(&RetrievalResult::default(), "Q", 4)
            .unwrap();
        assert!(context_lines(&empty.text).is_empty());
    }

    #[test]
    fn default_head_is_pinned() {
        let head = PromptTemplate::default();
        assert!(head
            .head_text()
            .starts_with("You are a visual question answering assistant."));
        assert!(!head.head_text().ends_with('\n'));
    }
}

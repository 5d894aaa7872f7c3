//! Answer generation and the end-to-end ask pipeline.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chunks::{build_chunks, parse_chunk_text};
use crate::http::{JsonClient, RetryPolicy, TransportError};
use crate::prompt::{
    context_lines, AssembledPrompt, PromptError, PromptTemplate, EMPTY_CONTEXT, QUESTION_LABEL,
};
use crate::scene_graph::SceneGraph;
use crate::util::sha256_hex;
use crate::vector_store::{
    index_chunks, EmbedError, Embedder, Index, IndexError, RetrievalResult, RetrievedChunk,
};

pub const DEFAULT_LLM_MODEL: &str = "Qwen2-72B-Instruct";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected generation response: {0}")]
    Response(String),
    #[error("scripted backend has no answer for question `{0}`")]
    Unscripted(String),
}

impl GenerationError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerationError::Transport(t) if t.is_retryable())
    }
}

/// Text-generation backend: maps a prompt to an answer.
pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate_text(&self, prompt: &str) -> Result<String, GenerationError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub answer_text: String,
    pub prompt: AssembledPrompt,
    pub backend: String,
    pub latency: Duration,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    /// The backend returned an empty answer.
    pub refused: bool,
}

impl AnswerRecord {
    /// Rebuilds the prompt text from the recorded chunk ids and scores.
    pub fn regenerate_prompt(
        &self,
        index: &Index,
        template: &PromptTemplate,
    ) -> Result<String, AskError> {
        let hits = self
            .prompt
            .retrieved_chunk_ids
            .iter()
            .zip(&self.prompt.similarity_scores)
            .map(|(id, &score)| {
                let entry = index
                    .get(id)
                    .ok_or_else(|| AskError::Provenance(id.clone()))?;
                Ok(RetrievedChunk {
                    chunk_id: id.clone(),
                    score,
                    payload: entry.payload.clone(),
                })
            })
            .collect::<Result<Vec<_>, AskError>>()?;
        let rebuilt = template
            .assemble(
                &RetrievalResult { hits },
                &self.prompt.question,
                self.prompt.k_used,
            )
            .map_err(AskError::Prompt)?;
        Ok(rebuilt.text)
    }
}

pub fn generate(
    backend: &dyn GenerationBackend,
    prompt: AssembledPrompt,
) -> Result<AnswerRecord, GenerationError> {
    let timestamp_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let started = Instant::now();
    let answer_text = backend.generate_text(&prompt.text)?;
    let latency = started.elapsed();
    Ok(AnswerRecord {
        refused: answer_text.trim().is_empty(),
        answer_text,
        prompt,
        backend: backend.name().to_string(),
        latency,
        timestamp_ms,
    })
}

/// Offline backends for tests and reproducible runs.
#[derive(Debug, Clone)]
pub enum StubBackend {
    /// Answers with the first context line (`[1] ...`) verbatim.
    EchoFirstContextLine,
    /// Looks the question up in a fixed table.
    Scripted(BTreeMap<String, String>),
    /// Composes sentences mechanically from the retrieved chunk fields.
    TemplateFill,
}

fn question_of(prompt: &str) -> &str {
    let marker = format!("\n\n{QUESTION_LABEL}\n");
    prompt
        .find(&marker)
        .map(|i| &prompt[i + marker.len()..])
        .unwrap_or(prompt)
}

/// One sentence per chunk ("There are 3 car at top-left, center.") followed
/// by one sentence per distinct relation phrase.
pub fn template_fill_answer(prompt: &str) -> String {
    let mut sentences = Vec::new();
    let mut relations: Vec<String> = Vec::new();
    for line in context_lines(prompt) {
        let Ok(fields) = parse_chunk_text(line) else {
            continue;
        };
        let verb = if fields.count == 1 { "is" } else { "are" };
        let cells: Vec<&str> = fields.locations.iter().map(|(c, _)| c.name()).collect();
        sentences.push(format!(
            "There {verb} {} {} at {}.",
            fields.count,
            fields.category,
            cells.join(", ")
        ));
        for r in fields.relations {
            if !relations.contains(&r) {
                relations.push(r);
            }
        }
    }
    if sentences.is_empty() {
        return "The context does not contain the answer.".to_string();
    }
    sentences.extend(relations.into_iter().map(|r| format!("{r}.")));
    sentences.join(" ")
}

impl GenerationBackend for StubBackend {
    fn name(&self) -> &str {
        match self {
            StubBackend::EchoFirstContextLine => "stub-echo",
            StubBackend::Scripted(_) => "stub-scripted",
            StubBackend::TemplateFill => "stub-template",
        }
    }

    fn generate_text(&self, prompt: &str) -> Result<String, GenerationError> {
        match self {
            StubBackend::EchoFirstContextLine => {
                let marker = "\nContext:\n";
                let first = prompt
                    .find(marker)
                    .and_then(|i| prompt[i + marker.len()..].lines().next())
                    .unwrap_or(EMPTY_CONTEXT);
                Ok(first.to_string())
            }
            StubBackend::Scripted(table) => {
                let q = question_of(prompt);
                table
                    .get(q)
                    .cloned()
                    .ok_or_else(|| GenerationError::Unscripted(q.to_string()))
            }
            StubBackend::TemplateFill => Ok(template_fill_answer(prompt)),
        }
    }
}

/// Reads a scripted table: one JSON object per line with `question` and `answer`.
pub fn read_script(input: impl BufRead) -> Result<BTreeMap<String, String>, String> {
    #[derive(Deserialize)]
    struct Row {
        question: String,
        answer: String,
    }
    let mut table = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        table.insert(row.question, row.answer);
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct RemoteChatConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl RemoteChatConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: DEFAULT_LLM_MODEL.to_string(),
            api_key: None,
            temperature: 0.0,
            max_tokens: 512,
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            retry: RetryPolicy::attempts(3),
        }
    }
}

/// Chat-completions client. The whole prompt goes out as a single user
/// message; the head already carries the instructions.
#[derive(Debug)]
pub struct RemoteChatBackend {
    config: RemoteChatConfig,
    client: JsonClient,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteChatConfig) -> Result<Self, GenerationError> {
        let client = JsonClient::new(
            config.timeout,
            config.api_key.clone(),
            config.retry,
            config.max_in_flight,
        )?;
        Ok(Self { config, client })
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }
}

impl GenerationBackend for RemoteChatBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn generate_text(&self, prompt: &str) -> Result<String, GenerationError> {
        let response = self
            .client
            .post_json(&self.config.url, &self.request_body(prompt))?;
        let choice = response
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GenerationError::Response("missing `choices[0]`".into()))?;
        match choice.get("message").and_then(|m| m.get("content")) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Ok(String::new()),
            Some(other) => Err(GenerationError::Response(format!(
                "content is not a string: {other}"
            ))),
        }
    }
}

/// Pipeline failure labelled with the stage that produced it.
#[derive(Debug, Error)]
pub enum AskError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index stage: {0}")]
    Index(#[source] IndexError),
    #[error("embed stage: {0}")]
    Embed(#[source] EmbedError),
    #[error("retrieve stage: {0}")]
    Retrieve(#[source] IndexError),
    #[error("prompt stage: {0}")]
    Prompt(#[source] PromptError),
    #[error("generate stage: {0}")]
    Generate(#[source] GenerationError),
    #[error("provenance: chunk `{0}` is not in the index")]
    Provenance(String),
}

/// Embeds the question, retrieves the top-k chunks, assembles the prompt
/// and generates an answer. The index is only read.
pub fn ask(
    index: &Index,
    question: &str,
    k: usize,
    template: &PromptTemplate,
    embedder: &dyn Embedder,
    backend: &dyn GenerationBackend,
) -> Result<AnswerRecord, AskError> {
    if k == 0 {
        return Err(AskError::InvalidK);
    }
    if question.trim().is_empty() {
        return Err(AskError::Prompt(PromptError::EmptyQuestion));
    }
    let query = embedder.embed(question).map_err(AskError::Embed)?;
    let retrieved = index.top_k(&query, k).map_err(AskError::Retrieve)?;
    let prompt = template
        .assemble(&retrieved, question, k)
        .map_err(AskError::Prompt)?;
    generate(backend, prompt).map_err(AskError::Generate)
}

/// Builds a per-image index from `graph`, then runs [`ask`].
pub fn ask_graph(
    graph: &SceneGraph,
    question: &str,
    k: usize,
    template: &PromptTemplate,
    embedder: &dyn Embedder,
    backend: &dyn GenerationBackend,
) -> Result<(Index, AnswerRecord), AskError> {
    let index = index_chunks(&build_chunks(graph), false, embedder).map_err(AskError::Index)?;
    let record = ask(&index, question, k, template, embedder, backend)?;
    Ok((index, record))
}

/// Audit line: everything needed to re-score or replay an answer. Timing is
/// left out so transcripts of deterministic runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub chunk_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub k: usize,
    pub backend: String,
    pub prompt_sha256: String,
    pub refused: bool,
}

impl TranscriptRecord {
    pub fn from_answer(image_id: &str, record: &AnswerRecord) -> Self {
        Self {
            image_id: image_id.to_string(),
            question: record.prompt.question.clone(),
            answer: record.answer_text.clone(),
            chunk_ids: record.prompt.retrieved_chunk_ids.clone(),
            scores: record.prompt.similarity_scores.clone(),
            k: record.prompt.k_used,
            backend: record.backend.clone(),
            prompt_sha256: sha256_hex(&record.prompt.text),
            refused: record.refused,
        }
    }
}

pub fn append_transcript(path: &Path, records: &[TranscriptRecord]) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(
            f,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        )?;
    }
    Ok(())
}

pub fn read_transcript(input: impl BufRead) -> Result<Vec<TranscriptRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| format!("transcript line {}: {e}", i + 1))?,
        );
    }
    Ok(out)
}

//! Per-category knowledge chunks and their canonical text.
//!
//! Canonical grammar, one line per chunk:
//!
//! ```text
//! category: <label> | count: <n> | locations: <cell> x<k>[, <cell> x<k>...] | relations: <phrase>[; <phrase>...]
//! ```
//!
//! Locations are listed row-major; `relations: none` marks an empty list.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_graph::{GridCell, SceneGraph};

#[derive(Debug, Error)]
pub enum ChunkError {
    #[error("chunk text does not follow the canonical grammar: {0}")]
    Grammar(String),
    #[error("chunk `{chunk_id}` violates an invariant: {reason}")]
    Invariant { chunk_id: String, reason: String },
    #[error("chunk dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub chunk_id: String,
    pub image_id: String,
    pub category_label: String,
    pub count: usize,
    pub location_histogram: BTreeMap<GridCell, usize>,
    pub relation_phrases: Vec<String>,
    pub canonical_text: String,
}

impl KnowledgeChunk {
    pub fn chunk_id_for(image_id: &str, category: &str) -> String {
        format!("{image_id}#{category}")
    }

    /// Checks count conservation, phrase ordering and text regeneration.
    pub fn validate(&self) -> Result<(), ChunkError> {
        let fail = |reason: String| ChunkError::Invariant {
            chunk_id: self.chunk_id.clone(),
            reason,
        };
        if self.chunk_id != Self::chunk_id_for(&self.image_id, &self.category_label) {
            return Err(fail("chunk_id is not image_id#category".into()));
        }
        if self.count == 0 {
            return Err(fail("count must be positive".into()));
        }
        if self.location_histogram.values().any(|&v| v == 0) {
            return Err(fail("histogram counts must be positive".into()));
        }
        let total: usize = self.location_histogram.values().sum();
        if total != self.count {
            return Err(fail(format!(
                "histogram sums to {total}, count is {}",
                self.count
            )));
        }
        if self.relation_phrases.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fail("relation phrases not sorted and deduplicated".into()));
        }
        if render_chunk_text(self) != self.canonical_text {
            return Err(fail("canonical_text does not regenerate".into()));
        }
        Ok(())
    }
}

/// Renders the canonical text from the structured fields. Ignores the
/// stored `canonical_text`.
pub fn render_chunk_text(chunk: &KnowledgeChunk) -> String {
    let locations: Vec<String> = chunk
        .location_histogram
        .iter()
        .map(|(cell, k)| format!("{} x{k}", cell.name()))
        .collect();
    let relations = if chunk.relation_phrases.is_empty() {
        "none".to_string()
    } else {
        chunk.relation_phrases.join("; ")
    };
    format!(
        "category: {} | count: {} | locations: {} | relations: {}",
        chunk.category_label,
        chunk.count,
        locations.join(", "),
        relations
    )
}

/// Builds one chunk per distinct category, sorted by label. Every relation
/// phrase is listed under both of its endpoint categories.
pub fn build_chunks(graph: &SceneGraph) -> Vec<KnowledgeChunk> {
    let mut histograms: BTreeMap<&str, BTreeMap<GridCell, usize>> = BTreeMap::new();
    for obj in graph.objects() {
        *histograms
            .entry(obj.category_label.as_str())
            .or_default()
            .entry(graph.cell_of(obj))
            .or_insert(0) += 1;
    }

    let mut phrases: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for rel in graph.relations() {
        let subject = graph.object(rel.subject_id).expect("validated endpoint");
        let object = graph.object(rel.object_id).expect("validated endpoint");
        let phrase = format!(
            "{} {} {}",
            subject.category_label, rel.predicate_label, object.category_label
        );
        phrases
            .entry(subject.category_label.as_str())
            .or_default()
            .insert(phrase.clone());
        phrases
            .entry(object.category_label.as_str())
            .or_default()
            .insert(phrase);
    }

    histograms
        .into_iter()
        .map(|(label, hist)| {
            let mut chunk = KnowledgeChunk {
                chunk_id: KnowledgeChunk::chunk_id_for(graph.image_id(), label),
                image_id: graph.image_id().to_string(),
                category_label: label.to_string(),
                count: hist.values().sum(),
                location_histogram: hist,
                relation_phrases: phrases
                    .remove(label)
                    .unwrap_or_default()
                    .into_iter()
                    .collect(),
                canonical_text: String::new(),
            };
            chunk.canonical_text = render_chunk_text(&chunk);
            chunk
        })
        .collect()
}

/// Structured fields recovered from a canonical chunk line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkFields {
    pub category: String,
    pub count: usize,
    pub locations: Vec<(GridCell, usize)>,
    pub relations: Vec<String>,
}

pub fn parse_chunk_text(text: &str) -> Result<ChunkFields, ChunkError> {
    let grammar = |m: &str| ChunkError::Grammar(format!("{m}: `{text}`"));
    let sections: Vec<&str> = text.split(" | ").collect();
    if sections.len() != 4 {
        return Err(grammar("expected four sections"));
    }
    let field = |section: &str, key: &str| -> Result<String, ChunkError> {
        section
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(": "))
            .map(str::to_string)
            .ok_or_else(|| grammar(&format!("missing `{key}:`")))
    };
    let category = field(sections[0], "category")?;
    let count = field(sections[1], "count")?
        .parse()
        .map_err(|_| grammar("bad count"))?;
    let locations = field(sections[2], "locations")?
        .split(", ")
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (cell, k) = entry
                .rsplit_once(" x")
                .ok_or_else(|| grammar("bad location entry"))?;
            let cell: GridCell = cell.parse().map_err(|_| grammar("unknown cell"))?;
            let k: usize = k.parse().map_err(|_| grammar("bad location count"))?;
            Ok((cell, k))
        })
        .collect::<Result<Vec<_>, ChunkError>>()?;
    let rel = field(sections[3], "relations")?;
    let relations = if rel == "none" {
        vec![]
    } else {
        rel.split("; ").map(str::to_string).collect()
    };
    Ok(ChunkFields {
        category,
        count,
        locations,
        relations,
    })
}

/// Writes one JSON record per line.
pub fn write_chunk_dump(chunks: &[KnowledgeChunk], out: &mut impl Write) -> std::io::Result<()> {
    for c in chunks {
        writeln!(
            out,
            "{}",
            serde_json::to_string(c).expect("chunk serializes")
        )?;
    }
    Ok(())
}

/// Reads a chunk dump, validating every record.
pub fn read_chunk_dump(input: impl BufRead) -> Result<Vec<KnowledgeChunk>, ChunkError> {
    let mut chunks = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: KnowledgeChunk = serde_json::from_str(&line).map_err(|e| ChunkError::Dump {
            line: i + 1,
            message: e.to_string(),
        })?;
        chunk.validate().map_err(|e| ChunkError::Dump {
            line: i + 1,
            message: e.to_string(),
        })?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

//! Question files, transcript scoring and the top-k ablation runner.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mentions::{LocationLexicon, MentionMatcher};
use super::metrics::{
    count_attributes, vqa_accuracy, AttributeCounts, AttributeScores, GroundTruthRecord,
};
use super::EvalError;
use crate::answer::{ask, GenerationBackend, TranscriptRecord};
use crate::chunks::build_chunks;
use crate::prompt::PromptTemplate;
use crate::scene_graph::SceneGraph;
use crate::vector_store::{index_chunks, Embedder};

pub const DEFAULT_K_VALUES: [usize; 5] = [1, 2, 4, 8, 16];

/// Used when no question file is given: one open question per image.
pub const DEFAULT_QUESTION: &str =
    "Describe the objects in the image with their counts, locations and relations.";

/// One question about one image. `focus_categories` restricts the ground
/// truth to those categories and their relations; `answers` holds human
/// reference answers for consensus accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub image_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub focus_categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
}

/// Reads a question file with one JSON object per line.
pub fn read_questions(input: impl BufRead) -> Result<Vec<QaItem>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Questions {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut item: QaItem = serde_json::from_str(&line).map_err(|e| EvalError::Questions {
            line: i + 1,
            message: e.to_string(),
        })?;
        item.focus_categories = item
            .focus_categories
            .iter()
            .map(|c| crate::scene_graph::normalize_label(c))
            .collect();
        out.push(item);
    }
    Ok(out)
}

pub fn default_questions(graphs: &[SceneGraph]) -> Vec<QaItem> {
    graphs
        .iter()
        .map(|g| QaItem {
            image_id: g.image_id().to_string(),
            question: DEFAULT_QUESTION.to_string(),
            focus_categories: vec![],
            answers: None,
        })
        .collect()
}

/// Category and predicate labels across a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub categories: BTreeSet<String>,
    pub predicates: BTreeSet<String>,
}

impl Vocabulary {
    pub fn from_graphs(graphs: &[SceneGraph]) -> Self {
        let mut v = Vocabulary::default();
        for g in graphs {
            v.categories.extend(g.categories());
            v.predicates.extend(g.predicates());
        }
        v
    }

    pub fn matcher(&self) -> MentionMatcher {
        MentionMatcher::new(
            &self.categories,
            &self.predicates,
            LocationLexicon::builtin(),
        )
    }
}

/// Shared, read-only pipeline components.
pub struct Pipeline<'a> {
    pub embedder: &'a dyn Embedder,
    pub backend: &'a dyn GenerationBackend,
    pub template: &'a PromptTemplate,
    /// Worker threads for per-image work.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub counts: AttributeCounts,
    pub scores: AttributeScores,
    /// Questions answered and scored.
    pub evaluated: usize,
    /// Questions whose pipeline failed at some stage.
    pub failures: usize,
}

fn group_questions<'q>(
    graphs: &[SceneGraph],
    questions: &'q [QaItem],
) -> Result<BTreeMap<String, Vec<&'q QaItem>>, EvalError> {
    let known: BTreeSet<&str> = graphs.iter().map(SceneGraph::image_id).collect();
    let mut by_image: BTreeMap<String, Vec<&QaItem>> = BTreeMap::new();
    for q in questions {
        if !known.contains(q.image_id.as_str()) {
            return Err(EvalError::UnknownImage(q.image_id.clone()));
        }
        by_image.entry(q.image_id.clone()).or_default().push(q);
    }
    Ok(by_image)
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))
}

/// Per-k accumulator of one image: counts, questions evaluated, failures.
type KCell = (AttributeCounts, usize, usize);

/// Runs the identical pipeline once per `k` and pools the confusion counts
/// of every question across images. Each image's index is built once and
/// shared by all `k`. Rows come out in ascending `k`; duplicate values are
/// collapsed. A failing image or question is counted and skipped.
pub fn run_ablation(
    graphs: &[SceneGraph],
    questions: &[QaItem],
    k_values: &[usize],
    pipeline: &Pipeline<'_>,
) -> Result<Vec<AblationRow>, EvalError> {
    let ks: Vec<usize> = k_values
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ks.is_empty() || ks[0] == 0 {
        return Err(EvalError::InvalidKValues(k_values.to_vec()));
    }
    let by_image = group_questions(graphs, questions)?;
    let matcher = Vocabulary::from_graphs(graphs).matcher();
    let graph_of: BTreeMap<&str, &SceneGraph> = graphs.iter().map(|g| (g.image_id(), g)).collect();
    let work: Vec<(&String, &Vec<&QaItem>)> = by_image.iter().collect();

    let per_image: Vec<(String, Vec<KCell>)> = worker_pool(pipeline.jobs)?.install(|| {
        work.par_iter()
            .map(|(image_id, items)| {
                let graph = graph_of[image_id.as_str()];
                let mut cells = vec![(AttributeCounts::default(), 0usize, 0usize); ks.len()];
                let index = match index_chunks(&build_chunks(graph), false, pipeline.embedder) {
                    Ok(index) => index,
                    Err(e) => {
                        warn!("image {image_id}: indexing failed: {e}");
                        for cell in &mut cells {
                            cell.2 += items.len();
                        }
                        return ((*image_id).clone(), cells);
                    }
                };
                let full_truth = GroundTruthRecord::from_graph(graph);
                for item in items.iter() {
                    let truth = full_truth.restrict(&item.focus_categories);
                    for (cell, &k) in cells.iter_mut().zip(&ks) {
                        match ask(
                            &index,
                            &item.question,
                            k,
                            pipeline.template,
                            pipeline.embedder,
                            pipeline.backend,
                        ) {
                            Ok(record) => {
                                let mentions = matcher.extract(&record.answer_text);
                                cell.0.add(&count_attributes(&mentions, &truth));
                                cell.1 += 1;
                            }
                            Err(e) => {
                                warn!("image {image_id}, k={k}: {e}");
                                cell.2 += 1;
                            }
                        }
                    }
                }
                debug!("image {image_id}: {} questions", items.len());
                ((*image_id).clone(), cells)
            })
            .collect()
    });

    let mut sorted = per_image;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rows: Vec<AblationRow> = ks
        .iter()
        .map(|&k| AblationRow {
            k,
            counts: AttributeCounts::default(),
            scores: AttributeCounts::default().scores(),
            evaluated: 0,
            failures: 0,
        })
        .collect();
    for (_, cells) in &sorted {
        for (row, (counts, evaluated, failures)) in rows.iter_mut().zip(cells) {
            row.counts.add(counts);
            row.evaluated += evaluated;
            row.failures += failures;
        }
    }
    for row in &mut rows {
        row.scores = row.counts.scores();
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub counts: AttributeCounts,
    pub scores: AttributeScores,
    pub evaluated: usize,
    /// Mean consensus accuracy over records whose question carries human answers.
    pub vqa_accuracy: Option<f64>,
    pub vqa_evaluated: usize,
}

/// Scores transcript answers against the annotation graphs. Focus categories
/// and human answers are taken from `questions` when a record's image and
/// question match an entry there.
pub fn score_transcript(
    graphs: &[SceneGraph],
    records: &[TranscriptRecord],
    questions: &[QaItem],
) -> Result<EvalSummary, EvalError> {
    let graph_of: BTreeMap<&str, &SceneGraph> = graphs.iter().map(|g| (g.image_id(), g)).collect();
    let qa: BTreeMap<(&str, &str), &QaItem> = questions
        .iter()
        .map(|q| ((q.image_id.as_str(), q.question.as_str()), q))
        .collect();
    let matcher = Vocabulary::from_graphs(graphs).matcher();

    let mut sorted: Vec<&TranscriptRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.image_id, &a.question).cmp(&(&b.image_id, &b.question)));

    let mut counts = AttributeCounts::default();
    let mut vqa_sum = 0.0;
    let mut vqa_evaluated = 0;
    for record in &sorted {
        let graph = graph_of
            .get(record.image_id.as_str())
            .ok_or_else(|| EvalError::UnknownImage(record.image_id.clone()))?;
        let item = qa.get(&(record.image_id.as_str(), record.question.as_str()));
        let focus: &[String] = item.map(|q| q.focus_categories.as_slice()).unwrap_or(&[]);
        let truth = GroundTruthRecord::from_graph(graph).restrict(focus);
        counts.add(&count_attributes(&matcher.extract(&record.answer), &truth));
        if let Some(answers) = item.and_then(|q| q.answers.as_ref()) {
            vqa_sum += vqa_accuracy(&record.answer, answers)?;
            vqa_evaluated += 1;
        }
    }
    Ok(EvalSummary {
        counts,
        scores: counts.scores(),
        evaluated: sorted.len(),
        vqa_accuracy: (vqa_evaluated > 0).then(|| vqa_sum / vqa_evaluated as f64),
        vqa_evaluated,
    })
}

//! Ground truth, attribute-level confusion counts and VQA accuracy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mentions::{ExtractedMentions, RelationKey};
use super::EvalError;
use crate::scene_graph::{category_counts, GridCell, SceneGraph};

/// Reference attributes of one image, derived from its annotation graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub counts: BTreeMap<String, usize>,
    pub locations: BTreeMap<String, BTreeMap<GridCell, usize>>,
    pub relations: BTreeSet<RelationKey>,
}

impl GroundTruthRecord {
    pub fn from_graph(graph: &SceneGraph) -> Self {
        let mut locations: BTreeMap<String, BTreeMap<GridCell, usize>> = BTreeMap::new();
        for obj in graph.objects() {
            *locations
                .entry(obj.category_label.clone())
                .or_default()
                .entry(graph.cell_of(obj))
                .or_insert(0) += 1;
        }
        let relations = graph
            .relations()
            .iter()
            .map(|r| {
                let s = graph.object(r.subject_id).expect("validated endpoint");
                let o = graph.object(r.object_id).expect("validated endpoint");
                RelationKey::new(&s.category_label, &r.predicate_label, &o.category_label)
            })
            .collect();
        Self {
            image_id: graph.image_id().to_string(),
            counts: category_counts(graph),
            locations,
            relations,
        }
    }

    /// Keeps only the focus categories and the relations touching them. An
    /// empty focus list leaves the record unchanged.
    pub fn restrict<S: AsRef<str>>(&self, focus: &[S]) -> Self {
        if focus.is_empty() {
            return self.clone();
        }
        let keep: BTreeSet<&str> = focus.iter().map(AsRef::as_ref).collect();
        Self {
            image_id: self.image_id.clone(),
            counts: self
                .counts
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            locations: self
                .locations
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            relations: self
                .relations
                .iter()
                .filter(|r| keep.contains(r.subject.as_str()) || keep.contains(r.object.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// The mentions a perfect answer would produce.
    pub fn as_mentions(&self) -> ExtractedMentions {
        ExtractedMentions {
            categories: self.counts.keys().cloned().collect(),
            quantities: self.counts.clone(),
            locations: self
                .locations
                .iter()
                .map(|(k, h)| (k.clone(), h.keys().copied().collect()))
                .collect(),
            relations: self.relations.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn new(true_positives: u64, false_positives: u64, false_negatives: u64) -> Self {
        Self {
            true_positives,
            false_positives,
            false_negatives,
        }
    }

    pub fn from_sets<T: Ord>(predicted: &BTreeSet<T>, truth: &BTreeSet<T>) -> Self {
        let tp = predicted.intersection(truth).count() as u64;
        Self::new(tp, predicted.len() as u64 - tp, truth.len() as u64 - tp)
    }

    pub fn add(&mut self, other: ConfusionCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    /// Precision and recall of empty sets: when nothing is predicted and
    /// nothing is expected the score is 1.0; an empty side otherwise gives 0.
    pub fn scores(&self) -> Prf {
        let tp = self.true_positives as f64;
        let predicted = self.true_positives + self.false_positives;
        let expected = self.true_positives + self.false_negatives;
        if predicted == 0 && expected == 0 {
            return Prf {
                recall: 1.0,
                precision: 1.0,
                f1: 1.0,
            };
        }
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if expected == 0 {
            0.0
        } else {
            tp / expected as f64
        };
        Prf {
            recall,
            precision,
            f1: f1(precision, recall),
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCounts {
    pub category: ConfusionCounts,
    pub quantity: ConfusionCounts,
    pub location: ConfusionCounts,
    pub relation: ConfusionCounts,
}

impl AttributeCounts {
    pub fn add(&mut self, other: &AttributeCounts) {
        self.category.add(other.category);
        self.quantity.add(other.quantity);
        self.location.add(other.location);
        self.relation.add(other.relation);
    }

    /// Micro-averaged scores over everything pooled into these counts.
    pub fn scores(&self) -> AttributeScores {
        AttributeScores {
            category: self.category.scores(),
            quantity: self.quantity.scores(),
            location: self.location.scores(),
            relation: self.relation.scores(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub category: Prf,
    pub quantity: Prf,
    pub location: Prf,
    pub relation: Prf,
}

impl AttributeScores {
    pub fn attributes(&self) -> [(&'static str, Prf); 4] {
        [
            ("category", self.category),
            ("quantity", self.quantity),
            ("location", self.location),
            ("relation", self.relation),
        ]
    }
}

/// Confusion counts of one answer against one ground-truth record. A claimed
/// quantity is a `(category, count)` pair and is correct only on exact match.
pub fn count_attributes(
    mentions: &ExtractedMentions,
    truth: &GroundTruthRecord,
) -> AttributeCounts {
    let truth_categories: BTreeSet<&String> = truth.counts.keys().collect();
    let predicted_categories: BTreeSet<&String> = mentions.categories.iter().collect();

    let truth_quantities: BTreeSet<(&String, usize)> =
        truth.counts.iter().map(|(k, &v)| (k, v)).collect();
    let predicted_quantities: BTreeSet<(&String, usize)> =
        mentions.quantities.iter().map(|(k, &v)| (k, v)).collect();

    let truth_locations: BTreeSet<(&String, GridCell)> = truth
        .locations
        .iter()
        .flat_map(|(k, h)| h.keys().map(move |&c| (k, c)))
        .collect();
    let predicted_locations: BTreeSet<(&String, GridCell)> = mentions
        .locations
        .iter()
        .flat_map(|(k, cells)| cells.iter().map(move |&c| (k, c)))
        .collect();

    AttributeCounts {
        category: ConfusionCounts::from_sets(&predicted_categories, &truth_categories),
        quantity: ConfusionCounts::from_sets(&predicted_quantities, &truth_quantities),
        location: ConfusionCounts::from_sets(&predicted_locations, &truth_locations),
        relation: ConfusionCounts::from_sets(&mentions.relations, &truth.relations),
    }
}

pub fn score_attributes(
    mentions: &ExtractedMentions,
    truth: &GroundTruthRecord,
) -> AttributeScores {
    count_attributes(mentions, truth).scores()
}

/// Lowercases, replaces punctuation with spaces, drops the articles
/// `a`, `an`, `the` and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Consensus accuracy: for each human answer held out in turn, the
/// prediction scores `min(matches among the others / 3, 1)`; the result is
/// the mean over all held-out choices.
pub fn vqa_accuracy<S: AsRef<str>>(
    predicted_answer: &str,
    human_answers: &[S],
) -> Result<f64, EvalError> {
    if human_answers.len() < 3 {
        return Err(EvalError::TooFewAnswers(human_answers.len()));
    }
    let predicted = normalize_answer(predicted_answer);
    let matching = human_answers
        .iter()
        .filter(|h| normalize_answer(h.as_ref()) == predicted)
        .count();
    let n = human_answers.len();
    // Holding out a matching answer leaves `matching - 1` matches; holding out
    // any other leaves `matching`.
    let held_out_match = (matching as f64 - 1.0).max(0.0) / 3.0;
    let held_out_other = matching as f64 / 3.0;
    let total =
        matching as f64 * held_out_match.min(1.0) + (n - matching) as f64 * held_out_other.min(1.0);
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::extract_mentions;
    use crate::scene_graph::parse_scene_graph;

    fn truth(categories: &[&str]) -> GroundTruthRecord {
        GroundTruthRecord {
            image_id: "img".into(),
            counts: categories.iter().map(|c| (c.to_string(), 1)).collect(),
            locations: BTreeMap::new(),
            relations: BTreeSet::new(),
        }
    }

    #[test]
    fn two_of_three_categories() {
        let t = truth(&["car", "tree", "building"]);
        let m = ExtractedMentions {
            categories: ["car", "tree", "road"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ..Default::default()
        };
        let s = score_attributes(&m, &t).category;
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let g = parse_scene_graph(
            r#"{"image_id":"img1","width":300,"height":300,
                "objects":[{"id":1,"label":"car","bbox":[120,120,180,180]},
                           {"id":2,"label":"road","bbox":[0,100,300,200]}],
                "relations":[{"subject":1,"predicate":"parked-on","object":2}]}"#,
        )
        .unwrap();
        let t = GroundTruthRecord::from_graph(&g);
        for (_, prf) in score_attributes(&t.as_mentions(), &t).attributes() {
            assert_eq!(
                prf,
                Prf {
                    recall: 1.0,
                    precision: 1.0,
                    f1: 1.0
                }
            );
        }
        let other = ExtractedMentions {
            categories: BTreeSet::from(["tree".into()]),
            quantities: BTreeMap::from([("car".into(), 7)]),
            locations: BTreeMap::from([("car".into(), BTreeSet::from([GridCell::TopLeft]))]),
            relations: BTreeSet::from([RelationKey::new("road", "parked-on", "car")]),
        };
        for (name, prf) in score_attributes(&other, &t).attributes() {
            assert_eq!(
                prf,
                Prf {
                    recall: 0.0,
                    precision: 0.0,
                    f1: 0.0
                },
                "{name}"
            );
        }
    }

    #[test]
    fn quantity_requires_exact_count() {
        let mut t = truth(&["car"]);
        t.counts.insert("car".into(), 3);
        let m = extract_mentions("There are 2 cars", ["car"], [] as [&str; 0]);
        assert_eq!(
            count_attributes(&m, &t).quantity,
            ConfusionCounts::new(0, 1, 1)
        );
        let m = extract_mentions("There are three cars", ["car"], [] as [&str; 0]);
        assert_eq!(
            count_attributes(&m, &t).quantity,
            ConfusionCounts::new(1, 0, 0)
        );
    }

    #[test]
    fn empty_side_rules() {
        assert_eq!(ConfusionCounts::default().scores().f1, 1.0);
        assert_eq!(
            ConfusionCounts::new(0, 0, 2).scores(),
            Prf {
                recall: 0.0,
                precision: 0.0,
                f1: 0.0
            }
        );
        assert_eq!(
            ConfusionCounts::new(0, 2, 0).scores(),
            Prf {
                recall: 0.0,
                precision: 0.0,
                f1: 0.0
            }
        );
    }

    #[test]
    fn restrict_keeps_touching_relations() {
        let g = parse_scene_graph(
            r#"{"image_id":"i","width":90,"height":90,
                "objects":[{"id":1,"label":"car","bbox":[0,0,10,10]},
                           {"id":2,"label":"road","bbox":[0,0,90,90]},
                           {"id":3,"label":"tree","bbox":[50,50,60,60]}],
                "relations":[{"subject":1,"predicate":"on","object":2},
                             {"subject":3,"predicate":"near","object":2}]}"#,
        )
        .unwrap();
        let t = GroundTruthRecord::from_graph(&g).restrict(&["car"]);
        assert_eq!(t.counts.keys().collect::<Vec<_>>(), ["car"]);
        assert_eq!(
            t.relations,
            BTreeSet::from([RelationKey::new("car", "on", "road")])
        );
        let none: [&str; 0] = [];
        assert_eq!(
            GroundTruthRecord::from_graph(&g).restrict(&none),
            GroundTruthRecord::from_graph(&g)
        );
    }

    #[test]
    fn vqa_examples() {
        let ten = |k: usize| {
            (0..10)
                .map(|i| if i < k { "two" } else { "three" })
                .collect::<Vec<_>>()
        };
        assert_eq!(vqa_accuracy("two", &ten(10)).unwrap(), 1.0);
        assert_eq!(vqa_accuracy("two", &ten(0)).unwrap(), 0.0);
        assert!((vqa_accuracy("Two.", &ten(3)).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(
            vqa_accuracy("x", &["x", "x"]),
            Err(EvalError::TooFewAnswers(2))
        ));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The  Red car!"), "red car");
        assert_eq!(normalize_answer("an apple, a pear"), "apple pear");
    }
}

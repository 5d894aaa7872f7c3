//! Scene-graph data model and ingestion.
//!
//! A [`SceneGraph`] holds the objects of one image, the relation triples
//! between them and the predicate vocabulary. Per-object structured
//! attributes (center point, 3×3 grid cell, per-category counts) are derived
//! here and consumed by chunking and evaluation.

mod adapters;
mod dataset;
mod grid;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapters::{convert_aug, convert_vg150, Adapter};
pub use dataset::{load_dataset, read_documents, write_lines, DatasetFormat};
pub use grid::{grid_cell, GridCell, ParseGridCellError};

#[derive(Debug, Error)]
pub enum SceneGraphError {
    #[error("malformed annotation document: {0}")]
    Malformed(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("duplicate object id {0}")]
    DuplicateObject(u64),
    #[error("relation references unknown object id {0}")]
    DanglingRelation(u64),
    #[error("relation has identical subject and object id {0}")]
    SelfRelation(u64),
    #[error(
        "invalid bounding box for object {object_id}: ({x_min}, {y_min}, {x_max}, {y_max}) in {width}x{height} image"
    )]
    InvalidBbox {
        object_id: u64,
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: u32,
        height: u32,
    },
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfRange {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: {source}")]
    InDocument {
        location: String,
        #[source]
        source: Box<SceneGraphError>,
    },
}

impl SceneGraphError {
    pub(crate) fn at(self, location: impl Into<String>) -> Self {
        SceneGraphError::InDocument {
            location: location.into(),
            source: Box::new(self),
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Midpoint of the box.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    fn is_valid_in(&self, width: u32, height: u32) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|c| c.is_finite() && *c >= 0.0)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }
}

/// Free-function form of [`BoundingBox::center`].
pub fn center(bbox: &BoundingBox) -> (f64, f64) {
    bbox.center()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: u64,
    pub category_label: String,
    pub bbox: BoundingBox,
    pub detection_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject_id: u64,
    pub predicate_label: String,
    pub object_id: u64,
    pub relation_score: f64,
}

/// Immutable per-image scene graph. Construct through [`SceneGraph::new`] or
/// [`parse_scene_graph`]; both validate every invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    image_id: String,
    image_width: u32,
    image_height: u32,
    objects: Vec<ObjectInstance>,
    relations: Vec<RelationTriple>,
    declared_predicates: BTreeSet<String>,
}

/// Lowercases and collapses internal whitespace runs to a single space.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(|part| part.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl SceneGraph {
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        objects: Vec<ObjectInstance>,
        relations: Vec<RelationTriple>,
    ) -> Result<Self, SceneGraphError> {
        Self::with_vocabulary(
            image_id,
            image_width,
            image_height,
            objects,
            relations,
            Vec::<String>::new(),
        )
    }

    pub fn with_vocabulary<I, S>(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        mut objects: Vec<ObjectInstance>,
        mut relations: Vec<RelationTriple>,
        declared_predicates: I,
    ) -> Result<Self, SceneGraphError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let image_id = image_id.into();
        if image_id.is_empty() {
            return Err(invalid("image_id", "must be non-empty"));
        }
        if image_width == 0 {
            return Err(invalid("width", "must be positive"));
        }
        if image_height == 0 {
            return Err(invalid("height", "must be positive"));
        }

        let mut seen = HashSet::with_capacity(objects.len());
        for (i, obj) in objects.iter_mut().enumerate() {
            obj.category_label = normalize_label(&obj.category_label);
            if obj.category_label.is_empty() {
                return Err(invalid(&format!("objects[{i}].label"), "must be non-empty"));
            }
            if !seen.insert(obj.object_id) {
                return Err(SceneGraphError::DuplicateObject(obj.object_id));
            }
            if !(0.0..=1.0).contains(&obj.detection_score) {
                return Err(invalid(
                    &format!("objects[{i}].score"),
                    "must lie in [0, 1]",
                ));
            }
            if !obj.bbox.is_valid_in(image_width, image_height) {
                let b = obj.bbox;
                return Err(SceneGraphError::InvalidBbox {
                    object_id: obj.object_id,
                    x_min: b.x_min,
                    y_min: b.y_min,
                    x_max: b.x_max,
                    y_max: b.y_max,
                    width: image_width,
                    height: image_height,
                });
            }
        }

        for (i, rel) in relations.iter_mut().enumerate() {
            rel.predicate_label = normalize_label(&rel.predicate_label);
            if rel.predicate_label.is_empty() {
                return Err(invalid(
                    &format!("relations[{i}].predicate"),
                    "must be non-empty",
                ));
            }
            if !(0.0..=1.0).contains(&rel.relation_score) {
                return Err(invalid(
                    &format!("relations[{i}].score"),
                    "must lie in [0, 1]",
                ));
            }
            for id in [rel.subject_id, rel.object_id] {
                if !seen.contains(&id) {
                    return Err(SceneGraphError::DanglingRelation(id));
                }
            }
            if rel.subject_id == rel.object_id {
                return Err(SceneGraphError::SelfRelation(rel.subject_id));
            }
        }

        let declared_predicates = declared_predicates
            .into_iter()
            .map(|p| normalize_label(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();

        Ok(Self {
            image_id,
            image_width,
            image_height,
            objects,
            relations,
            declared_predicates,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn relations(&self) -> &[RelationTriple] {
        &self.relations
    }

    pub fn declared_predicates(&self) -> &BTreeSet<String> {
        &self.declared_predicates
    }

    /// The predicate set: declared vocabulary plus every observed predicate.
    pub fn predicates(&self) -> BTreeSet<String> {
        let mut all = self.declared_predicates.clone();
        all.extend(self.relations.iter().map(|r| r.predicate_label.clone()));
        all
    }

    pub fn object(&self, id: u64) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    /// Distinct category labels, ascending.
    pub fn categories(&self) -> BTreeSet<String> {
        self.objects
            .iter()
            .map(|o| o.category_label.clone())
            .collect()
    }

    /// Grid cell of an object's center.
    pub fn cell_of(&self, object: &ObjectInstance) -> GridCell {
        let (x, y) = object.bbox.center();
        // Centers of validated boxes always lie inside the image.
        grid_cell((x, y), self.image_width, self.image_height).expect("bbox center inside image")
    }

    /// Drops objects and relations scoring below `min_score`, together with
    /// any relation touching a dropped object.
    pub fn filter_by_score(&self, min_score: f64) -> SceneGraph {
        if min_score <= 0.0 {
            return self.clone();
        }
        let objects: Vec<_> = self
            .objects
            .iter()
            .filter(|o| o.detection_score >= min_score)
            .cloned()
            .collect();
        let kept: HashSet<u64> = objects.iter().map(|o| o.object_id).collect();
        let relations = self
            .relations
            .iter()
            .filter(|r| {
                r.relation_score >= min_score
                    && kept.contains(&r.subject_id)
                    && kept.contains(&r.object_id)
            })
            .cloned()
            .collect();
        SceneGraph {
            objects,
            relations,
            ..self.clone()
        }
    }

    /// Returns a copy with the relation list replaced. Used when relations are
    /// inferred instead of read from annotations.
    pub fn with_relations(
        &self,
        relations: Vec<RelationTriple>,
    ) -> Result<SceneGraph, SceneGraphError> {
        SceneGraph::with_vocabulary(
            self.image_id.clone(),
            self.image_width,
            self.image_height,
            self.objects.clone(),
            relations,
            self.declared_predicates.iter(),
        )
    }
}

fn invalid(field: &str, reason: &str) -> SceneGraphError {
    SceneGraphError::InvalidField {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

/// Count of instances per category label.
pub fn category_counts(graph: &SceneGraph) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for obj in &graph.objects {
        *counts.entry(obj.category_label.clone()).or_insert(0) += 1;
    }
    counts
}

// Canonical document layout.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DocObject {
    pub id: u64,
    pub label: String,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DocRelation {
    pub subject: u64,
    pub predicate: String,
    pub object: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Document {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub objects: Vec<DocObject>,
    #[serde(default)]
    pub relations: Vec<DocRelation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<String>,
}

impl Document {
    pub(crate) fn into_graph(self) -> Result<SceneGraph, SceneGraphError> {
        let objects = self
            .objects
            .into_iter()
            .map(|o| ObjectInstance {
                object_id: o.id,
                category_label: o.label,
                bbox: BoundingBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
                detection_score: o.score.unwrap_or(1.0),
            })
            .collect();
        let relations = self
            .relations
            .into_iter()
            .map(|r| RelationTriple {
                subject_id: r.subject,
                predicate_label: r.predicate,
                object_id: r.object,
                relation_score: r.score.unwrap_or(1.0),
            })
            .collect();
        SceneGraph::with_vocabulary(
            self.image_id,
            self.width,
            self.height,
            objects,
            relations,
            self.predicates,
        )
    }

    fn from_graph(graph: &SceneGraph) -> Self {
        Document {
            image_id: graph.image_id.clone(),
            width: graph.image_width,
            height: graph.image_height,
            objects: graph
                .objects
                .iter()
                .map(|o| DocObject {
                    id: o.object_id,
                    label: o.category_label.clone(),
                    bbox: [o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max],
                    score: (o.detection_score != 1.0).then_some(o.detection_score),
                })
                .collect(),
            relations: graph
                .relations
                .iter()
                .map(|r| DocRelation {
                    subject: r.subject_id,
                    predicate: r.predicate_label.clone(),
                    object: r.object_id,
                    score: (r.relation_score != 1.0).then_some(r.relation_score),
                })
                .collect(),
            predicates: graph.declared_predicates.iter().cloned().collect(),
        }
    }
}

/// Parses one canonical annotation document.
pub fn parse_scene_graph(document: &str) -> Result<SceneGraph, SceneGraphError> {
    let doc: Document =
        serde_json::from_str(document).map_err(|e| SceneGraphError::Malformed(e.to_string()))?;
    doc.into_graph()
}

/// Serializes to a single-line canonical document.
pub fn serialize_scene_graph(graph: &SceneGraph) -> String {
    serde_json::to_string(&Document::from_graph(graph)).expect("document serializes")
}

//! Converters from common scene-graph annotation layouts into the canonical
//! document.
//!
//! AUG-style (one COCO-like record per image):
//!
//! ```text
//! { "file_name": "P0001.png", "width": W, "height": H,
//!   "annotations": [ { "id": 3, "category": "car", "bbox": [x, y, w, h], "score"?: s, ... } ],
//!   "relationships": [ [subject_id, object_id, "predicate"] ] }
//! ```
//!
//! `image_id` is taken from `image_id` when present, else the stem of
//! `file_name`. Boxes are `[x, y, w, h]` and become `[x, y, x + w, y + h]`,
//! clipped to the image.
//!
//! VG-150-style (Visual Genome record restricted to the 150/50 vocabulary):
//!
//! ```text
//! { "image_id": 2343, "width": W, "height": H,
//!   "objects": [ { "object_id": 10, "x": .., "y": .., "w": .., "h": .., "names": ["man"], ... } ],
//!   "relationships": [ { "subject_id": 10, "predicate": "ON", "object_id": 11, ... } ] }
//! ```
//!
//! Only the first entry of `names` is kept. Any field without a canonical
//! counterpart (segmentation, attributes, synsets, relationship ids, ...) is
//! dropped and reported with a warning.

use std::collections::BTreeMap;
use std::str::FromStr;

use log::warn;
use serde::Deserialize;
use serde_json::Value;

use super::{parse_scene_graph, DocObject, DocRelation, Document, SceneGraph, SceneGraphError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adapter {
    #[default]
    Canonical,
    Aug,
    Vg150,
}

impl FromStr for Adapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(Adapter::Canonical),
            "aug" => Ok(Adapter::Aug),
            "vg150" => Ok(Adapter::Vg150),
            other => Err(format!(
                "unknown adapter `{other}` (expected canonical|aug|vg150)"
            )),
        }
    }
}

impl Adapter {
    pub fn parse(self, text: &str) -> Result<SceneGraph, SceneGraphError> {
        match self {
            Adapter::Canonical => parse_scene_graph(text),
            Adapter::Aug => convert_aug(text),
            Adapter::Vg150 => convert_vg150(text),
        }
    }
}

type Extra = BTreeMap<String, Value>;

fn report_dropped(image_id: &str, dropped: &mut Vec<String>) {
    if dropped.is_empty() {
        return;
    }
    dropped.sort();
    dropped.dedup();
    warn!(
        "image {image_id}: dropped fields without canonical counterpart: {}",
        dropped.join(", ")
    );
}

fn clip_xywh(xywh: [f64; 4], width: u32, height: u32) -> [f64; 4] {
    let [x, y, w, h] = xywh;
    [
        x.max(0.0),
        y.max(0.0),
        (x + w).min(width as f64),
        (y + h).min(height as f64),
    ]
}

#[derive(Deserialize)]
struct AugAnnotation {
    id: u64,
    category: String,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct AugRecord {
    #[serde(default)]
    image_id: Option<Value>,
    #[serde(default)]
    file_name: Option<String>,
    width: u32,
    height: u32,
    #[serde(default)]
    annotations: Vec<AugAnnotation>,
    #[serde(default)]
    relationships: Vec<(u64, u64, String)>,
    #[serde(flatten)]
    extra: Extra,
}

fn id_string(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn convert_aug(text: &str) -> Result<SceneGraph, SceneGraphError> {
    let rec: AugRecord =
        serde_json::from_str(text).map_err(|e| SceneGraphError::Malformed(e.to_string()))?;
    let image_id = match (&rec.image_id, &rec.file_name) {
        (Some(id), _) => id_string(id),
        (None, Some(name)) => std::path::Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone()),
        (None, None) => {
            return Err(SceneGraphError::Malformed(
                "missing field `image_id` or `file_name`".into(),
            ))
        }
    };
    let mut dropped: Vec<String> = rec.extra.keys().cloned().collect();
    if rec.image_id.is_some() && rec.file_name.is_some() {
        dropped.push("file_name".into());
    }
    let mut clipped = 0usize;
    let objects = rec
        .annotations
        .into_iter()
        .map(|a| {
            dropped.extend(a.extra.keys().map(|k| format!("annotations.{k}")));
            let bbox = clip_xywh(a.bbox, rec.width, rec.height);
            if bbox
                != [
                    a.bbox[0],
                    a.bbox[1],
                    a.bbox[0] + a.bbox[2],
                    a.bbox[1] + a.bbox[3],
                ]
            {
                clipped += 1;
            }
            DocObject {
                id: a.id,
                label: a.category,
                bbox,
                score: a.score,
            }
        })
        .collect();
    if clipped > 0 {
        warn!("image {image_id}: clipped {clipped} boxes to the image bounds");
    }
    let relations = rec
        .relationships
        .into_iter()
        .map(|(subject, object, predicate)| DocRelation {
            subject,
            predicate,
            object,
            score: None,
        })
        .collect();
    report_dropped(&image_id, &mut dropped);
    Document {
        image_id,
        width: rec.width,
        height: rec.height,
        objects,
        relations,
        predicates: vec![],
    }
    .into_graph()
}

#[derive(Deserialize)]
struct VgObject {
    object_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    names: Vec<String>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct VgRelationship {
    subject_id: u64,
    predicate: String,
    object_id: u64,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct VgRecord {
    image_id: Value,
    width: u32,
    height: u32,
    #[serde(default)]
    objects: Vec<VgObject>,
    #[serde(default)]
    relationships: Vec<VgRelationship>,
    #[serde(flatten)]
    extra: Extra,
}

pub fn convert_vg150(text: &str) -> Result<SceneGraph, SceneGraphError> {
    let rec: VgRecord =
        serde_json::from_str(text).map_err(|e| SceneGraphError::Malformed(e.to_string()))?;
    let image_id = id_string(&rec.image_id);
    let mut dropped: Vec<String> = rec.extra.keys().cloned().collect();
    let mut objects = Vec::with_capacity(rec.objects.len());
    for (i, o) in rec.objects.into_iter().enumerate() {
        dropped.extend(o.extra.keys().map(|k| format!("objects.{k}")));
        let Some(label) = o.names.first().cloned() else {
            return Err(SceneGraphError::InvalidField {
                field: format!("objects[{i}].names"),
                reason: "must contain at least one name".into(),
            });
        };
        if o.names.len() > 1 {
            dropped.push("objects.names[1..]".into());
        }
        objects.push(DocObject {
            id: o.object_id,
            label,
            bbox: clip_xywh([o.x, o.y, o.w, o.h], rec.width, rec.height),
            score: None,
        });
    }
    let relations = rec
        .relationships
        .into_iter()
        .map(|r| {
            dropped.extend(r.extra.keys().map(|k| format!("relationships.{k}")));
            DocRelation {
                subject: r.subject_id,
                predicate: r.predicate,
                object: r.object_id,
                score: None,
            }
        })
        .collect();
    report_dropped(&image_id, &mut dropped);
    Document {
        image_id,
        width: rec.width,
        height: rec.height,
        objects,
        relations,
        predicates: vec![],
    }
    .into_graph()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::BoundingBox;

    #[test]
    fn aug_record_converts() {
        let text = r#"{"file_name":"P0001.png","width":100,"height":100,
            "annotations":[{"id":1,"category":"Car","bbox":[10,10,20,20],"segmentation":[]},
                           {"id":2,"category":"road","bbox":[0,40,120,20]}],
            "relationships":[[1,2,"parked-on"]]}"#;
        let g = convert_aug(text).unwrap();
        assert_eq!(g.image_id(), "P0001");
        assert_eq!(g.objects()[0].category_label, "car");
        assert_eq!(
            g.objects()[0].bbox,
            BoundingBox::new(10.0, 10.0, 30.0, 30.0)
        );
        assert_eq!(
            g.objects()[1].bbox,
            BoundingBox::new(0.0, 40.0, 100.0, 60.0)
        );
        assert_eq!(g.relations()[0].predicate_label, "parked-on");
    }

    #[test]
    fn vg150_record_converts() {
        let text = r#"{"image_id":2343,"width":800,"height":600,
            "objects":[{"object_id":10,"x":5,"y":6,"w":50,"h":40,"names":["Man","person"],"synsets":["man.n.01"]},
                       {"object_id":11,"x":0,"y":0,"w":800,"h":600,"names":["street"]}],
            "relationships":[{"relationship_id":7,"predicate":"ON","subject_id":10,"object_id":11}]}"#;
        let g = convert_vg150(text).unwrap();
        assert_eq!(g.image_id(), "2343");
        assert_eq!(g.objects()[0].category_label, "man");
        assert_eq!(g.objects()[0].bbox, BoundingBox::new(5.0, 6.0, 55.0, 46.0));
        assert_eq!(g.relations()[0].predicate_label, "on");
    }

    #[test]
    fn vg150_requires_a_name() {
        let text = r#"{"image_id":"x","width":8,"height":6,
            "objects":[{"object_id":1,"x":0,"y":0,"w":2,"h":2,"names":[]}]}"#;
        let err = convert_vg150(text).unwrap_err();
        assert!(err.to_string().contains("objects[0].names"), "{err}");
    }
}

//! Property tests for the invariants of each module.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgrag_core::chunks::{build_chunks, render_chunk_text, write_chunk_dump, KnowledgeChunk};
use sgrag_core::evaluation::{
    extract_mentions, score_attributes, ConfusionCounts, GroundTruthRecord, Prf,
};
use sgrag_core::relation_model::{
    cosine, entity_representation, fuse, fuse_gradient, pseudo_prototype, RelationDims,
    RelationModel, Role,
};
use sgrag_core::scene_graph::{
    category_counts, center, grid_cell, parse_scene_graph, serialize_scene_graph, BoundingBox,
    GridCell, ObjectInstance, RelationTriple, SceneGraph,
};
use sgrag_core::vector_store::{load_index, save_index, EmbeddingVector, Index};

const LABELS: [&str; 5] = ["car", "road", "tree", "storage tank", "ship"];
const PREDICATES: [&str; 3] = ["on", "near", "parked-on"];

type RawObject = (usize, f64, f64, f64, f64, f64);

fn build_graph(
    w: u32,
    h: u32,
    objs: &[RawObject],
    rels: &[(usize, usize, usize, f64)],
) -> SceneGraph {
    let objects: Vec<ObjectInstance> = objs
        .iter()
        .enumerate()
        .map(|(i, &(label, fx, fy, bw, bh, score))| {
            let (w, h) = (w as f64, h as f64);
            let x_min = fx * w;
            let y_min = fy * h;
            ObjectInstance {
                object_id: i as u64 * 3 + 1,
                category_label: LABELS[label].to_string(),
                bbox: BoundingBox::new(
                    x_min,
                    y_min,
                    x_min + bw * (w - x_min),
                    y_min + bh * (h - y_min),
                ),
                detection_score: score,
            }
        })
        .collect();
    let relations = rels
        .iter()
        .filter(|(s, o, _, _)| s != o && *s < objs.len() && *o < objs.len())
        .map(|&(s, o, p, score)| RelationTriple {
            subject_id: objects[s].object_id,
            predicate_label: PREDICATES[p].to_string(),
            object_id: objects[o].object_id,
            relation_score: score,
        })
        .collect();
    SceneGraph::new(format!("img-{w}x{h}"), w, h, objects, relations)
        .expect("generated graph is valid")
}

fn graph_strategy() -> impl Strategy<Value = SceneGraph> {
    let object = (
        0..LABELS.len(),
        0.0..0.95f64,
        0.0..0.95f64,
        0.05..1.0f64,
        0.05..1.0f64,
        0.0..=1.0f64,
    );
    (
        1u32..500,
        1u32..500,
        prop::collection::vec(object, 0..12),
        prop::collection::vec(
            (0usize..12, 0usize..12, 0..PREDICATES.len(), 0.0..=1.0f64),
            0..10,
        ),
    )
        .prop_map(|(w, h, objs, rels)| build_graph(w, h, &objs, &rels))
}

fn shuffled(graph: &SceneGraph, seed: u64) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = graph.objects().to_vec();
    let mut relations = graph.relations().to_vec();
    objects.shuffle(&mut rng);
    relations.shuffle(&mut rng);
    SceneGraph::new(
        graph.image_id(),
        graph.image_width(),
        graph.image_height(),
        objects,
        relations,
    )
    .unwrap()
}

fn dump(chunks: &[KnowledgeChunk]) -> Vec<u8> {
    let mut out = Vec::new();
    write_chunk_dump(chunks, &mut out).unwrap();
    out
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn center_is_strictly_inside(x in 0.0..1000.0f64, y in 0.0..1000.0f64, bw in 0.001..1000.0f64, bh in 0.001..1000.0f64) {
        let b = BoundingBox::new(x, y, x + bw, y + bh);
        let (cx, cy) = center(&b);
        prop_assert!(b.x_min < cx && cx < b.x_max);
        prop_assert!(b.y_min < cy && cy < b.y_max);
    }

    #[test]
    fn grid_is_total_and_follows_floor_rule(w in 1u32..48, h in 1u32..48) {
        let mut seen = BTreeMap::<GridCell, usize>::new();
        for x in 0..=w {
            for y in 0..=h {
                let cell = grid_cell((x as f64, y as f64), w, h).unwrap();
                let col = ((3 * x) / w).min(2) as usize;
                let row = ((3 * y) / h).min(2) as usize;
                prop_assert_eq!(cell.row_col(), (row, col));
                *seen.entry(cell).or_default() += 1;
            }
        }
        prop_assert_eq!(seen.values().sum::<usize>(), ((w + 1) * (h + 1)) as usize);
        prop_assert!(grid_cell((w as f64 + 0.5, 0.0), w, h).is_err());
        prop_assert!(grid_cell((0.0, -0.5), w, h).is_err());
    }

    #[test]
    fn counts_sum_to_object_count(g in graph_strategy()) {
        let counts = category_counts(&g);
        prop_assert_eq!(counts.values().sum::<usize>(), g.objects().len());
        prop_assert!(counts.values().all(|&c| c > 0));
    }

    #[test]
    fn parse_serialize_round_trip(g in graph_strategy()) {
        let text = serialize_scene_graph(&g);
        let back = parse_scene_graph(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize_scene_graph(&back), text);
    }

    #[test]
    fn chunks_ignore_input_order(g in graph_strategy(), seed in any::<u64>()) {
        let chunks = build_chunks(&g);
        prop_assert_eq!(dump(&build_chunks(&shuffled(&g, seed))), dump(&chunks));
        prop_assert_eq!(chunks.iter().map(|c| c.count).sum::<usize>(), g.objects().len());
        for c in &chunks {
            prop_assert!(c.validate().is_ok());
            prop_assert_eq!(render_chunk_text(c), c.canonical_text.clone());
        }
    }

    #[test]
    fn fuse_is_symmetric(a in finite_vec(6), b in finite_vec(6)) {
        let ab = fuse(ArrayView1::from(&a), ArrayView1::from(&b)).unwrap();
        let ba = fuse(ArrayView1::from(&b), ArrayView1::from(&a)).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn fuse_gradient_matches_central_differences(
        pairs in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..8)
            .prop_filter("away from the kink", |p| p.iter().all(|(x, y)| (x + y).abs() > 0.1))
    ) {
        let a: Array1<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Array1<f64> = pairs.iter().map(|p| p.1).collect();
        let (da, db) = fuse_gradient(a.view(), b.view()).unwrap();
        let h = 1e-5;
        for (jac, wrt_a) in [(&da, true), (&db, false)] {
            for j in 0..a.len() {
                let (mut plus, mut minus) = if wrt_a { (a.clone(), a.clone()) } else { (b.clone(), b.clone()) };
                plus[j] += h;
                minus[j] -= h;
                let (gp, gm) = if wrt_a {
                    (fuse(plus.view(), b.view()).unwrap(), fuse(minus.view(), b.view()).unwrap())
                } else {
                    (fuse(a.view(), plus.view()).unwrap(), fuse(a.view(), minus.view()).unwrap())
                };
                for i in 0..a.len() {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    let an = jac[[i, j]];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                    prop_assert!(rel < 1e-4, "d[{i}]/d[{j}]: analytic {an}, numeric {fd}");
                }
            }
        }
    }

    #[test]
    fn deviation_gate_is_nonnegative(seed in any::<u64>(), visual in finite_vec(8)) {
        let dims = RelationDims { d: 6, d_t: 5, d_v: 8 };
        let model = RelationModel::seeded(dims, ["car"], ["on"], seed);
        let e = Array1::from(visual);
        let o = entity_representation("car", Role::Subject, e.view(), &model.weights, &model.prototypes).unwrap();
        let base = model.weights.w_subject.dot(model.prototypes.entity("car").unwrap());
        let m = model.weights.m_entity.apply(e.view(), "m").unwrap();
        prop_assert_eq!(o.len(), dims.d);
        for i in 0..dims.d {
            let v = o[i] - base[i];
            prop_assert!(v.abs() <= 1e-12 || v.signum() == m[i].signum(), "coordinate {i}: v={v}, m={}", m[i]);
        }
    }

    #[test]
    fn pseudo_prototypes_are_deterministic(label in "[a-z]{1,12}", seed in any::<u64>()) {
        prop_assert_eq!(pseudo_prototype(&label, 16, seed), pseudo_prototype(&label, 16, seed));
    }

    #[test]
    fn cosine_is_bounded(a in finite_vec(5), b in finite_vec(5)) {
        let c = cosine(ArrayView1::from(&a), ArrayView1::from(&b));
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn retrieval_scores_bounded_and_sorted(
        vectors in prop::collection::vec(finite_vec(8), 1..30),
        query in finite_vec(8),
        k in 1usize..40,
    ) {
        let mut index = Index::new(8);
        for (i, v) in vectors.iter().enumerate() {
            let Ok(e) = EmbeddingVector::normalized(v.clone()) else { continue };
            index.insert(&format!("img#c{i:03}"), &e, chunk(&format!("c{i:03}"))).unwrap();
        }
        let Ok(q) = EmbeddingVector::normalized(query) else { return Ok(()) };
        let result = index.top_k(&q, k).unwrap();
        prop_assert_eq!(result.len(), k.min(index.len()));
        prop_assert!(result.hits.iter().all(|h| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&h.score)));
        prop_assert!(result.hits.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].chunk_id < w[1].chunk_id)));
    }

    #[test]
    fn metric_bounds(tp in 0u64..60, fp in 0u64..60, fn_ in 0u64..60) {
        let Prf { recall, precision, f1 } = ConfusionCounts::new(tp, fp, fn_).scores();
        for v in [recall, precision, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if precision + recall == 0.0 {
            prop_assert_eq!(f1, 0.0);
        }
        if precision > 0.0 && recall > 0.0 {
            prop_assert!(f1 <= precision.max(recall) + 1e-15);
            prop_assert!(f1 >= precision.min(recall) - 1e-15);
        }
    }

    #[test]
    fn truth_scores_itself_perfectly(g in graph_strategy()) {
        let truth = GroundTruthRecord::from_graph(&g);
        for (_, prf) in score_attributes(&truth.as_mentions(), &truth).attributes() {
            prop_assert_eq!(prf, Prf { recall: 1.0, precision: 1.0, f1: 1.0 });
        }
    }

    #[test]
    fn mentions_ignore_casing(words in prop::collection::vec(prop::sample::select(vec![
        "There", "are", "3", "Cars", "car", "in", "the", "Upper", "left", "ROAD", "parked-on", "Near", ".", "two",
        "trees", "Center", ";", "storage", "tanks", "bottom-right", "\n",
    ]), 0..30)) {
        let text = words.join(" ");
        let lower = extract_mentions(&text.to_lowercase(), LABELS, PREDICATES);
        prop_assert_eq!(extract_mentions(&text, LABELS, PREDICATES), lower.clone());
        prop_assert_eq!(extract_mentions(&text.to_uppercase(), LABELS, PREDICATES), lower);
    }
}

fn chunk(id: &str) -> KnowledgeChunk {
    let mut c = KnowledgeChunk {
        chunk_id: KnowledgeChunk::chunk_id_for("img", id),
        image_id: "img".into(),
        category_label: id.into(),
        count: 1,
        location_histogram: BTreeMap::from([(GridCell::Center, 1)]),
        relation_phrases: vec![],
        canonical_text: String::new(),
    };
    c.canonical_text = render_chunk_text(&c);
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn index_file_round_trip_preserves_answers(
        vectors in prop::collection::vec(finite_vec(16), 1..20),
        queries in prop::collection::vec(finite_vec(16), 1..5),
    ) {
        let mut index = Index::new(16);
        for (i, v) in vectors.iter().enumerate() {
            if let Ok(e) = EmbeddingVector::normalized(v.clone()) {
                index.insert(&format!("img#c{i:03}"), &e, chunk(&format!("c{i:03}"))).unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        save_index(&index, &path).unwrap();
        let back = load_index(&path).unwrap();
        for q in queries {
            let Ok(q) = EmbeddingVector::normalized(q) else { continue };
            for k in [1, 4, 16] {
                prop_assert_eq!(back.top_k(&q, k).unwrap(), index.top_k(&q, k).unwrap());
            }
        }
    }
}

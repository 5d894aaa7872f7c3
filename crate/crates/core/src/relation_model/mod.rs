//! Forward-only prototype-based relation representations.
//!
//! Entities are represented as a projected class prototype plus a gated,
//! instance-specific visual deviation; predicates likewise, with the gate fed
//! by the fused subject/object pair. Only the fusion function carries an
//! analytic gradient, which the test suite checks against finite
//! differences. Weights are loaded from a tensor dump or initialized from a
//! seed; there is no training loop.

mod prototypes;
mod weights;

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use thiserror::Error;

use crate::scene_graph::{RelationTriple, SceneGraph};
use crate::util::keyed_rng;

pub use prototypes::{pseudo_prototype, PrototypeTable};
pub use weights::{Affine, ModelWeights, RelationDims};

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("label `{0}` has no entity prototype")]
    UnknownLabel(String),
    #[error("predicate `{0}` has no prototype")]
    UnknownPredicate(String),
    #[error("fusion is not differentiable at coordinate {index}: a + b = 0")]
    NonDifferentiable { index: usize },
    #[error("predicate vocabulary is empty")]
    EmptyPredicates,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error("prototype file: {0}")]
    PrototypeFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_len(
    context: &str,
    expected: usize,
    actual: usize,
) -> Result<(), RelationError> {
    if expected == actual {
        Ok(())
    } else {
        Err(RelationError::Dimension {
            context: context.to_string(),
            expected,
            actual,
        })
    }
}

/// Which side of a triple an entity occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Subject,
    Object,
}

/// `ReLU(a + b) - (a - b)^2`, elementwise.
pub fn fuse(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>, RelationError> {
    check_len("fuse", a.len(), b.len())?;
    Ok(ndarray::Zip::from(&a)
        .and(&b)
        .map_collect(|&x, &y| (x + y).max(0.0) - (x - y).powi(2)))
}

/// Diagonal Jacobians of [`fuse`] with respect to each argument.
pub fn fuse_gradient(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> Result<(Array2<f64>, Array2<f64>), RelationError> {
    check_len("fuse_gradient", a.len(), b.len())?;
    let d = a.len();
    let mut da = Array2::zeros((d, d));
    let mut db = Array2::zeros((d, d));
    for i in 0..d {
        let sum = a[i] + b[i];
        if sum == 0.0 {
            return Err(RelationError::NonDifferentiable { index: i });
        }
        let step = if sum > 0.0 { 1.0 } else { 0.0 };
        let diff = a[i] - b[i];
        da[[i, i]] = step - 2.0 * diff;
        db[[i, i]] = step + 2.0 * diff;
    }
    Ok((da, db))
}

fn relu(v: Array1<f64>) -> Array1<f64> {
    v.mapv_into(|x| x.max(0.0))
}

/// `base + ReLU(fc([context; visual])) ⊙ visual`.
fn gated_deviation(
    base: Array1<f64>,
    context: ArrayView1<f64>,
    visual: Array1<f64>,
    fc: &Affine,
) -> Result<Array1<f64>, RelationError> {
    let joined = concatenate(Axis(0), &[context, visual.view()]).expect("1-d concat");
    let gate = relu(fc.apply(joined.view(), "fc")?);
    Ok(base + gate * visual)
}

pub fn entity_representation(
    label: &str,
    role: Role,
    visual: ArrayView1<f64>,
    weights: &ModelWeights,
    prototypes: &PrototypeTable,
) -> Result<Array1<f64>, RelationError> {
    let t = prototypes
        .entity(label)
        .ok_or_else(|| RelationError::UnknownLabel(label.to_string()))?;
    let w = match role {
        Role::Subject => &weights.w_subject,
        Role::Object => &weights.w_object,
    };
    check_len("entity prototype", w.ncols(), t.len())?;
    let base = w.dot(t);
    let m = weights.m_entity.apply(visual, "entity visual map")?;
    gated_deviation(base.clone(), base.view(), m, &weights.fc_entity)
}

pub fn predicate_representation(
    predicate: &str,
    subject: ArrayView1<f64>,
    object: ArrayView1<f64>,
    union_visual: ArrayView1<f64>,
    weights: &ModelWeights,
    prototypes: &PrototypeTable,
) -> Result<Array1<f64>, RelationError> {
    let t = prototypes
        .predicate(predicate)
        .ok_or_else(|| RelationError::UnknownPredicate(predicate.to_string()))?;
    check_len("predicate prototype", weights.w_predicate.ncols(), t.len())?;
    let d = weights.w_predicate.nrows();
    check_len("subject representation", d, subject.len())?;
    check_len("object representation", d, object.len())?;
    let base = weights.w_predicate.dot(t);
    let fused = fuse(subject, object)?;
    let m = weights
        .m_predicate
        .apply(union_visual, "predicate visual map")?;
    gated_deviation(base, fused.view(), m, &weights.fc_predicate)
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Ranks every predicate by cosine similarity between the fused pair and the
/// predicate representation. Descending score, ties by label ascending.
pub fn score_predicates(
    subject: ArrayView1<f64>,
    object: ArrayView1<f64>,
    union_visual: ArrayView1<f64>,
    weights: &ModelWeights,
    prototypes: &PrototypeTable,
) -> Result<Vec<(String, f64)>, RelationError> {
    if prototypes.predicates().is_empty() {
        return Err(RelationError::EmptyPredicates);
    }
    let fused = fuse(subject, object)?;
    let mut ranked = prototypes
        .predicates()
        .keys()
        .map(|p| {
            let rep =
                predicate_representation(p, subject, object, union_visual, weights, prototypes)?;
            Ok((p.clone(), cosine(fused.view(), rep.view())))
        })
        .collect::<Result<Vec<_>, RelationError>>()?;
    // Keys arrive sorted, so a stable sort keeps label order on ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// Deterministic stand-in for a detector feature vector.
pub fn pseudo_visual_feature(key: &str, dim: usize, seed: u64) -> Array1<f64> {
    use rand::Rng;
    let mut rng = keyed_rng(seed, &format!("visual:{key}"));
    Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0..=1.0)))
}

/// Weights, prototypes and the seed used for pseudo-features.
#[derive(Debug, Clone)]
pub struct RelationModel {
    pub weights: ModelWeights,
    pub prototypes: PrototypeTable,
    pub seed: u64,
}

impl RelationModel {
    /// Seeded weights with pseudo-prototypes for the given vocabularies.
    pub fn seeded<'a>(
        dims: RelationDims,
        entity_labels: impl IntoIterator<Item = &'a str>,
        predicate_labels: impl IntoIterator<Item = &'a str>,
        seed: u64,
    ) -> Self {
        Self {
            weights: ModelWeights::seeded(dims, seed),
            prototypes: PrototypeTable::pseudo(entity_labels, predicate_labels, dims.d_t, seed),
            seed,
        }
    }

    /// Proposes one relation per ordered object pair whose best predicate
    /// scores at least `threshold`.
    pub fn infer_relations(
        &self,
        graph: &SceneGraph,
        threshold: f64,
    ) -> Result<Vec<RelationTriple>, RelationError> {
        let d_v = self.weights.m_entity.weight.ncols();
        let image = graph.image_id();
        let features: BTreeMap<u64, Array1<f64>> = graph
            .objects()
            .iter()
            .map(|o| {
                (
                    o.object_id,
                    pseudo_visual_feature(&format!("{image}/{}", o.object_id), d_v, self.seed),
                )
            })
            .collect();
        let mut relations = Vec::new();
        for subj in graph.objects() {
            let o_s = entity_representation(
                &subj.category_label,
                Role::Subject,
                features[&subj.object_id].view(),
                &self.weights,
                &self.prototypes,
            )?;
            for obj in graph.objects() {
                if obj.object_id == subj.object_id {
                    continue;
                }
                let o_o = entity_representation(
                    &obj.category_label,
                    Role::Object,
                    features[&obj.object_id].view(),
                    &self.weights,
                    &self.prototypes,
                )?;
                let union = pseudo_visual_feature(
                    &format!("{image}/{}/{}", subj.object_id, obj.object_id),
                    self.weights.m_predicate.weight.ncols(),
                    self.seed,
                );
                let ranked = score_predicates(
                    o_s.view(),
                    o_o.view(),
                    union.view(),
                    &self.weights,
                    &self.prototypes,
                )?;
                let (predicate, score) = &ranked[0];
                if *score >= threshold {
                    relations.push(RelationTriple {
                        subject_id: subj.object_id,
                        predicate_label: predicate.clone(),
                        object_id: obj.object_id,
                        relation_score: score.clamp(0.0, 1.0),
                    });
                }
            }
        }
        Ok(relations)
    }
}

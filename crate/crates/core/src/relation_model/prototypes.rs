use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use ndarray::Array1;
use rand::Rng;

use super::{check_len, RelationError};
use crate::util::keyed_rng;

/// Semantic prototypes for entity labels and predicates, all of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    dim: usize,
    entities: BTreeMap<String, Array1<f64>>,
    predicates: BTreeMap<String, Array1<f64>>,
}

/// Deterministic pseudo-prototype: uniform [-1, 1] entries from a generator
/// keyed by `(seed, label)`.
pub fn pseudo_prototype(label: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = keyed_rng(seed, &format!("prototype:{label}"));
    Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0..=1.0)))
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entities: BTreeMap::new(),
            predicates: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entity(&self, label: &str) -> Option<&Array1<f64>> {
        self.entities.get(label)
    }

    pub fn predicate(&self, label: &str) -> Option<&Array1<f64>> {
        self.predicates.get(label)
    }

    pub fn entities(&self) -> &BTreeMap<String, Array1<f64>> {
        &self.entities
    }

    pub fn predicates(&self) -> &BTreeMap<String, Array1<f64>> {
        &self.predicates
    }

    pub fn insert_entity(&mut self, label: &str, v: Array1<f64>) -> Result<(), RelationError> {
        check_len(&format!("entity prototype `{label}`"), self.dim, v.len())?;
        self.entities.insert(label.to_string(), v);
        Ok(())
    }

    pub fn insert_predicate(&mut self, label: &str, v: Array1<f64>) -> Result<(), RelationError> {
        check_len(&format!("predicate prototype `{label}`"), self.dim, v.len())?;
        self.predicates.insert(label.to_string(), v);
        Ok(())
    }

    pub fn pseudo<'a>(
        entity_labels: impl IntoIterator<Item = &'a str>,
        predicate_labels: impl IntoIterator<Item = &'a str>,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut table = Self::new(dim);
        for l in entity_labels {
            table
                .entities
                .insert(l.to_string(), pseudo_prototype(l, dim, seed));
        }
        for p in predicate_labels {
            // Distinct key space so a label used both ways gets two vectors.
            table.predicates.insert(
                p.to_string(),
                pseudo_prototype(&format!("predicate:{p}"), dim, seed),
            );
        }
        table
    }

    /// Builds a table from a word-vector file (one word followed by its
    /// floats per line, GloVe text layout). Labels missing verbatim are
    /// composed as the mean of their space/hyphen/underscore-separated parts.
    pub fn from_word_vectors<'a>(
        input: impl BufRead,
        entity_labels: impl IntoIterator<Item = &'a str>,
        predicate_labels: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, RelationError> {
        let entity_labels: Vec<&str> = entity_labels.into_iter().collect();
        let predicate_labels: Vec<&str> = predicate_labels.into_iter().collect();
        let wanted: HashSet<String> = entity_labels
            .iter()
            .chain(predicate_labels.iter())
            .flat_map(|l| std::iter::once(l.to_string()).chain(split_label(l).map(str::to_string)))
            .collect();

        let mut dim = None;
        let mut vectors: HashMap<String, Array1<f64>> = HashMap::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        RelationError::PrototypeFormat(format!("line {}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(RelationError::PrototypeFormat(format!(
                        "line {}: expected {d} values, got {}",
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            if wanted.contains(word) {
                vectors.insert(word.to_string(), Array1::from(values));
            }
        }
        let dim = dim.ok_or_else(|| RelationError::PrototypeFormat("no vectors".into()))?;
        if dim == 0 {
            return Err(RelationError::PrototypeFormat("zero-length vectors".into()));
        }

        let lookup = |label: &str| -> Option<Array1<f64>> {
            if let Some(v) = vectors.get(label) {
                return Some(v.clone());
            }
            let parts: Vec<&Array1<f64>> =
                split_label(label).filter_map(|p| vectors.get(p)).collect();
            if parts.is_empty() {
                return None;
            }
            let sum = parts.iter().fold(Array1::zeros(dim), |acc, v| acc + *v);
            Some(sum / parts.len() as f64)
        };

        let mut table = Self::new(dim);
        for l in entity_labels {
            let v = lookup(l).ok_or_else(|| RelationError::UnknownLabel(l.to_string()))?;
            table.entities.insert(l.to_string(), v);
        }
        for p in predicate_labels {
            let v = lookup(p).ok_or_else(|| RelationError::UnknownPredicate(p.to_string()))?;
            table.predicates.insert(p.to_string(), v);
        }
        Ok(table)
    }
}

fn split_label(label: &str) -> impl Iterator<Item = &str> {
    label.split([' ', '-', '_']).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pseudo_prototypes_are_deterministic() {
        assert_eq!(
            pseudo_prototype("car", 50, 42),
            pseudo_prototype("car", 50, 42)
        );
        assert_ne!(
            pseudo_prototype("car", 50, 42),
            pseudo_prototype("cat", 50, 42)
        );
        assert_ne!(
            pseudo_prototype("car", 50, 42),
            pseudo_prototype("car", 50, 43)
        );
        assert!(pseudo_prototype("car", 50, 42)
            .iter()
            .all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn word_vectors_compose_multiword_labels() {
        let file = "car 1.0 0.0\nparked 0.0 2.0\non 1.0 1.0\nroad 3.0 3.0\nunused 9 9\n";
        let t = PrototypeTable::from_word_vectors(file.as_bytes(), ["car", "road"], ["parked-on"])
            .unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.entity("car").unwrap(), &array![1.0, 0.0]);
        assert_eq!(t.predicate("parked-on").unwrap(), &array![0.5, 1.5]);
    }

    #[test]
    fn word_vector_errors() {
        let ragged = "car 1.0 0.0\nroad 3.0\n";
        assert!(PrototypeTable::from_word_vectors(ragged.as_bytes(), ["car"], []).is_err());
        let file = "car 1.0 0.0\n";
        assert!(matches!(
            PrototypeTable::from_word_vectors(file.as_bytes(), ["boat"], []),
            Err(RelationError::UnknownLabel(_))
        ));
    }

    #[test]
    fn insert_checks_dimension() {
        let mut t = PrototypeTable::new(3);
        assert!(t.insert_entity("a", array![1.0, 2.0]).is_err());
        t.insert_entity("a", array![1.0, 2.0, 3.0]).unwrap();
    }
}

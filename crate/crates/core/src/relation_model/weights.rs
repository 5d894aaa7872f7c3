use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use super::{check_len, RelationError};
use crate::util::keyed_rng;

/// Model widths: `d` shared space, `d_t` prototype, `d_v` visual feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationDims {
    pub d: usize,
    pub d_t: usize,
    pub d_v: usize,
}

impl Default for RelationDims {
    fn default() -> Self {
        Self {
            d: 64,
            d_t: 50,
            d_v: 128,
        }
    }
}

/// `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn apply(&self, x: ArrayView1<f64>, context: &str) -> Result<Array1<f64>, RelationError> {
        check_len(context, self.weight.ncols(), x.len())?;
        Ok(self.weight.dot(&x) + &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub w_subject: Array2<f64>,
    pub w_object: Array2<f64>,
    pub w_predicate: Array2<f64>,
    pub fc_entity: Affine,
    pub fc_predicate: Affine,
    pub m_entity: Affine,
    pub m_predicate: Affine,
}

const TENSOR_NAMES: [&str; 11] = [
    "w_subject",
    "w_object",
    "w_predicate",
    "fc_entity.weight",
    "fc_entity.bias",
    "fc_predicate.weight",
    "fc_predicate.bias",
    "m_entity.weight",
    "m_entity.bias",
    "m_predicate.weight",
    "m_predicate.bias",
];

const HEADER: &str = "# sgrag relation weights v1";

impl ModelWeights {
    pub fn zeros(dims: RelationDims) -> Self {
        let RelationDims { d, d_t, d_v } = dims;
        Self {
            w_subject: Array2::zeros((d, d_t)),
            w_object: Array2::zeros((d, d_t)),
            w_predicate: Array2::zeros((d, d_t)),
            fc_entity: Affine::zeros(d, 2 * d),
            fc_predicate: Affine::zeros(d, 2 * d),
            m_entity: Affine::zeros(d, d_v),
            m_predicate: Affine::zeros(d, d_v),
        }
    }

    /// Every entry drawn uniformly from [-0.1, 0.1], keyed by tensor name.
    pub fn seeded(dims: RelationDims, seed: u64) -> Self {
        let mut w = Self::zeros(dims);
        for (name, tensor) in w.tensors_mut() {
            let mut rng = keyed_rng(seed, &format!("weights:{name}"));
            tensor
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-0.1..=0.1));
        }
        w
    }

    pub fn dims(&self) -> RelationDims {
        RelationDims {
            d: self.w_subject.nrows(),
            d_t: self.w_subject.ncols(),
            d_v: self.m_entity.weight.ncols(),
        }
    }

    /// Checks that every tensor agrees with [`ModelWeights::dims`] and is finite.
    pub fn validate(&self) -> Result<(), RelationError> {
        let RelationDims { d, d_t, d_v } = self.dims();
        let expected = |name: &str| -> Vec<usize> {
            match name {
                "w_subject" | "w_object" | "w_predicate" => vec![d, d_t],
                "fc_entity.weight" | "fc_predicate.weight" => vec![d, 2 * d],
                "m_entity.weight" | "m_predicate.weight" => vec![d, d_v],
                _ => vec![d],
            }
        };
        for (name, shape, values) in self.tensors() {
            let want = expected(name);
            if shape != want {
                return Err(RelationError::WeightFormat(format!(
                    "tensor {name} has shape {shape:?}, expected {want:?}"
                )));
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(RelationError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mat = |m: &Array2<f64>| (vec![m.nrows(), m.ncols()], m.iter().copied().collect());
        let vec = |v: &Array1<f64>| (vec![v.len()], v.to_vec());
        let parts = [
            mat(&self.w_subject),
            mat(&self.w_object),
            mat(&self.w_predicate),
            mat(&self.fc_entity.weight),
            vec(&self.fc_entity.bias),
            mat(&self.fc_predicate.weight),
            vec(&self.fc_predicate.bias),
            mat(&self.m_entity.weight),
            vec(&self.m_entity.bias),
            mat(&self.m_predicate.weight),
            vec(&self.m_predicate.bias),
        ];
        TENSOR_NAMES
            .into_iter()
            .zip(parts)
            .map(|(n, (s, v))| (n, s, v))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let slices: [&mut [f64]; 11] = [
            self.w_subject.as_slice_mut().unwrap(),
            self.w_object.as_slice_mut().unwrap(),
            self.w_predicate.as_slice_mut().unwrap(),
            self.fc_entity.weight.as_slice_mut().unwrap(),
            self.fc_entity.bias.as_slice_mut().unwrap(),
            self.fc_predicate.weight.as_slice_mut().unwrap(),
            self.fc_predicate.bias.as_slice_mut().unwrap(),
            self.m_entity.weight.as_slice_mut().unwrap(),
            self.m_entity.bias.as_slice_mut().unwrap(),
            self.m_predicate.weight.as_slice_mut().unwrap(),
            self.m_predicate.bias.as_slice_mut().unwrap(),
        ];
        TENSOR_NAMES.into_iter().zip(slices).collect()
    }

    /// Text tensor dump: a header line, then per tensor a line
    /// `tensor <name> <dim>...` followed by one line of values per row.
    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{HEADER}")?;
        for (name, shape, values) in self.tensors() {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} {}", dims.join(" "))?;
            let row_len = *shape.last().unwrap();
            for row in values.chunks(row_len.max(1)) {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(out, "{}", cells.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self, RelationError> {
        let mut lines = input.lines();
        let mut next_line = || -> Result<Option<String>, RelationError> {
            for line in lines.by_ref() {
                let line = line?;
                if !line.trim().is_empty() {
                    return Ok(Some(line));
                }
            }
            Ok(None)
        };
        match next_line()? {
            Some(h) if h.trim() == HEADER => {}
            other => {
                return Err(RelationError::WeightFormat(format!("bad header {other:?}")));
            }
        }
        let mut found: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        while let Some(line) = next_line()? {
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(RelationError::WeightFormat(format!(
                    "expected tensor header, got `{line}`"
                )));
            }
            let name = parts
                .next()
                .ok_or_else(|| RelationError::WeightFormat("tensor header without name".into()))?
                .to_string();
            let shape = parts
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| RelationError::WeightFormat(format!("{name}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if shape.is_empty() || shape.len() > 2 {
                return Err(RelationError::WeightFormat(format!(
                    "{name}: unsupported rank {}",
                    shape.len()
                )));
            }
            let rows = if shape.len() == 2 { shape[0] } else { 1 };
            let cols = *shape.last().unwrap();
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = next_line()?.ok_or_else(|| {
                    RelationError::WeightFormat(format!("{name}: missing row {r}"))
                })?;
                let parsed = row
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| RelationError::WeightFormat(format!("{name}: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                check_len(&format!("{name} row {r}"), cols, parsed.len())?;
                values.extend(parsed);
            }
            found.push((name, shape, values));
        }

        let take = |name: &str| -> Result<(Vec<usize>, Vec<f64>), RelationError> {
            found
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, v)| (s.clone(), v.clone()))
                .ok_or_else(|| RelationError::WeightFormat(format!("missing tensor {name}")))
        };
        let mat = |name: &str| -> Result<Array2<f64>, RelationError> {
            let (s, v) = take(name)?;
            if s.len() != 2 {
                return Err(RelationError::WeightFormat(format!(
                    "{name} must be rank 2"
                )));
            }
            Ok(Array2::from_shape_vec((s[0], s[1]), v).expect("shape checked"))
        };
        let vec = |name: &str| -> Result<Array1<f64>, RelationError> {
            let (s, v) = take(name)?;
            if s.len() != 1 {
                return Err(RelationError::WeightFormat(format!(
                    "{name} must be rank 1"
                )));
            }
            Ok(Array1::from(v))
        };
        let weights = ModelWeights {
            w_subject: mat("w_subject")?,
            w_object: mat("w_object")?,
            w_predicate: mat("w_predicate")?,
            fc_entity: Affine {
                weight: mat("fc_entity.weight")?,
                bias: vec("fc_entity.bias")?,
            },
            fc_predicate: Affine {
                weight: mat("fc_predicate.weight")?,
                bias: vec("fc_predicate.bias")?,
            },
            m_entity: Affine {
                weight: mat("m_entity.weight")?,
                bias: vec("m_entity.bias")?,
            },
            m_predicate: Affine {
                weight: mat("m_predicate.weight")?,
                bias: vec("m_predicate.bias")?,
            },
        };
        weights.validate()?;
        Ok(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_weights_are_bounded_and_reproducible() {
        let dims = RelationDims {
            d: 5,
            d_t: 4,
            d_v: 3,
        };
        let a = ModelWeights::seeded(dims, 42);
        assert_eq!(a, ModelWeights::seeded(dims, 42));
        assert_ne!(a, ModelWeights::seeded(dims, 43));
        for (_, _, values) in a.tensors() {
            assert!(values.iter().all(|x| (-0.1..=0.1).contains(x)));
        }
        a.validate().unwrap();
        assert_eq!(a.dims(), dims);
    }

    #[test]
    fn text_dump_round_trips_exactly() {
        let w = ModelWeights::seeded(
            RelationDims {
                d: 3,
                d_t: 2,
                d_v: 4,
            },
            9,
        );
        let mut buf = Vec::new();
        w.write_text(&mut buf).unwrap();
        let back = ModelWeights::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let mut w = ModelWeights::seeded(
            RelationDims {
                d: 3,
                d_t: 2,
                d_v: 4,
            },
            9,
        );
        w.fc_entity = Affine::zeros(3, 5);
        let mut buf = Vec::new();
        w.write_text(&mut buf).unwrap();
        let err = ModelWeights::read_text(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("fc_entity.weight"), "{err}");
    }

    #[test]
    fn missing_tensor_rejected() {
        let text = format!("{HEADER}\ntensor w_subject 1 1\n0.5\n");
        let err = ModelWeights::read_text(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");
    }
}

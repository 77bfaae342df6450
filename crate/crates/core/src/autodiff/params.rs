use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a parameter block is initialised by the frequentist trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: ParamRole,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered map from named tensors to slices of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    dim: usize,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>, ParamRole)>) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, shape, role) in blocks {
            let n: usize = shape.iter().product();
            entries.push(ParamEntry {
                name: name.into(),
                shape,
                offset,
                role,
            });
            offset += n;
        }
        ParamLayout {
            entries,
            dim: offset,
        }
    }

    /// Total parameter count `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Concatenate named tensors in layout order.
    pub fn flatten(self: &Arc<Self>, tensors: &[(String, Tensor)]) -> Result<ParamVector> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(self.dim);
        for (entry, (name, t)) in self.entries.iter().zip(tensors) {
            if &entry.name != name || entry.shape != t.shape() {
                return Err(Error::Shape {
                    op: "flatten_params",
                    lhs: entry.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            values.extend_from_slice(t.data());
        }
        Ok(ParamVector {
            values,
            layout: Arc::clone(self),
        })
    }
}

/// Flat weight vector of one network realisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Shape {
                op: "param_vector",
                lhs: vec![layout.dim()],
                rhs: vec![values.len()],
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.dim()];
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Split back into named tensors in layout order.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let t = Tensor::new(e.shape.clone(), self.values[e.range()].to_vec())
                    .expect("layout entry shapes are positive");
                (e.name.clone(), t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_block_layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new([
            ("a", vec![2, 2], ParamRole::Weight { fan_in: 2 }),
            ("b", vec![3], ParamRole::Bias),
        ]))
    }

    #[test]
    fn sizes_and_offsets() {
        let layout = two_block_layout();
        assert_eq!(layout.dim(), 7);
        assert_eq!(layout.entries()[1].offset, 4);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let layout = two_block_layout();
        assert!(ParamVector::new(layout, vec![0.0; 6]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 7)) {
            let layout = two_block_layout();
            let pv = ParamVector::new(Arc::clone(&layout), values.clone()).unwrap();
            let tensors = pv.unflatten();
            let back = layout.flatten(&tensors).unwrap();
            prop_assert_eq!(back.values(), &values[..]);
            prop_assert_eq!(back.unflatten(), tensors);
        }
    }
}

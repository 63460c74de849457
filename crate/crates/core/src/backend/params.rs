use serde::{Deserialize, Serialize};

/// A named row-major matrix of trainable values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, values: &[f64]) {
        assert_eq!(
            values.len(),
            self.cols,
            "row width mismatch for {}",
            self.name
        );
        self.data.extend_from_slice(values);
        self.rows += 1;
    }
}

/// An ordered collection of tensors. Also used for gradients, which share the
/// layout of the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.rows, t.cols))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    /// Flat-index access, in tensor order.
    pub fn flat(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values().flat_map(f64::to_le_bytes).collect()
    }

    /// Fills tensor data from bytes produced by [`ParamSet::to_le_bytes`];
    /// the tensor shapes must already be set.
    pub fn fill_from_le_bytes(&mut self, bytes: &[u8]) -> bool {
        if bytes.len() != self.len() * 8 {
            return false;
        }
        for (x, chunk) in self.values_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        true
    }
}

/// Sums per-example gradients in input order.
pub fn sum_in_order(template: &ParamSet, parts: impl IntoIterator<Item = ParamSet>) -> ParamSet {
    let mut total = template.zeros_like();
    for g in parts {
        total.add_assign(&g);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_indexing_and_bytes() {
        let mut p = ParamSet {
            tensors: vec![Tensor::zeros("a", 2, 2), Tensor::zeros("b", 1, 3)],
        };
        *p.flat_mut(5) = 2.5;
        assert_eq!(p.get("b").unwrap().data, [0.0, 2.5, 0.0]);
        assert_eq!(p.flat(5), 2.5);
        let bytes = p.to_le_bytes();
        let mut q = p.zeros_like();
        assert!(q.fill_from_le_bytes(&bytes));
        assert_eq!(p, q);
        p.tensors[0].push_row(&[1.0, 1.0]);
        assert_eq!(p.len(), 9);
    }
}

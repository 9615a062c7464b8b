//! Per-batch multi-positive ground-truth match matrix.
//!
//! Every (image, prompt) pair with equal prompt indices is a correct match,
//! so a batch can hold several positives per row. Rows of the 0/1 match
//! matrix are normalized by their sum; since matching entries always share
//! the same match count, the normalized matrix stays symmetric and its
//! columns also sum to one.

use std::collections::HashMap;

use ndarray::Array2;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix<T> {
    values: Array2<T>,
}

impl<T: Scalar> TargetMatrix<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// True where the unnormalized match matrix is 1.
    pub fn is_match(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)] > T::zero()
    }
}

/// Build the row-normalized match matrix for a batch's prompt indices.
/// With all-distinct indices this degenerates to the identity matrix.
pub fn build_target_matrix<T: Scalar>(prompt_indices: &[usize]) -> TargetMatrix<T> {
    let b = prompt_indices.len();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &idx in prompt_indices {
        *counts.entry(idx).or_insert(0) += 1;
    }
    let mut values = Array2::zeros((b, b));
    for i in 0..b {
        let share = T::one() / T::from_f64(counts[&prompt_indices[i]] as f64);
        for j in 0..b {
            if prompt_indices[i] == prompt_indices[j] {
                values[(i, j)] = share;
            }
        }
    }
    TargetMatrix { values }
}

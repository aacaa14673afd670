//! Class regions on Δ² and the conformal class set.

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};

/// Index of the largest coordinate; ties go to the lowest index.
pub fn argmax_class(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBand {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Classes whose region meets the set.
    pub class_set: Vec<usize>,
    pub n_in: usize,
}

/// Splits the in-set candidates by argmax region.
pub fn simplex_class_band(set: &PredictionSet) -> Result<ClassBand> {
    let mut counts = vec![0usize; 3];
    for p in set.in_set_points() {
        if p.dim() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: p.dim(),
            });
        }
        counts[argmax_class(p.coords())] += 1;
    }
    let n_in: usize = counts.iter().sum();
    if n_in == 0 {
        return Err(Error::EmptySet);
    }
    let fractions = counts.iter().map(|&c| c as f64 / n_in as f64).collect();
    let class_set = (0..3).filter(|&k| counts[k] > 0).collect();
    Ok(ClassBand {
        counts,
        fractions,
        class_set,
        n_in,
    })
}

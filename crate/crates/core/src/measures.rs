//! Atomic probability measures on the real line.
//!
//! An [`EmpiricalMeasure`] is a finite list of weighted atoms. Atoms are kept
//! in insertion order; the distance routines sort internally. In one
//! dimension the optimal quadratic coupling is the monotone (quantile)
//! coupling, so `W₂` is computed exactly by merging the two quantile
//! functions.

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<Atom>,
}

/// One cell of a coupling between two measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingCell {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

impl EmpiricalMeasure {
    /// Uniform measure over the samples. Duplicates are kept as separate atoms.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MfgError::EmptyMeasure);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MfgError::NonFiniteValue { index, value });
        }
        let w = 1.0 / values.len() as f64;
        Ok(Self {
            atoms: values
                .iter()
                .map(|&location| Atom {
                    location,
                    weight: w,
                })
                .collect(),
        })
    }

    pub fn from_weighted(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(MfgError::EmptyMeasure);
        }
        let mut sum = 0.0;
        for (index, &(location, weight)) in atoms.iter().enumerate() {
            if !location.is_finite() {
                return Err(MfgError::NonFiniteValue {
                    index,
                    value: location,
                });
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(MfgError::InvalidWeight { index, weight });
            }
            sum += weight;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MfgError::WeightsNotNormalized { sum });
        }
        Ok(Self {
            atoms: atoms
                .into_iter()
                .map(|(location, weight)| Atom { location, weight })
                .collect(),
        })
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: f64) -> Result<Self> {
        Self::from_samples(&[x])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn moment(&self, k: u32) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * a.location.powi(k as i32))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn second_moment(&self) -> f64 {
        self.moment(2)
    }

    /// `∫ f dm`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(a.location)).sum()
    }

    /// Translate every atom by `shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    location: a.location + shift,
                    weight: a.weight,
                })
                .collect(),
        }
    }

    fn sorted_atoms(&self) -> Vec<Atom> {
        let mut atoms = self.atoms.clone();
        atoms.sort_by(|a, b| a.location.total_cmp(&b.location));
        atoms
    }
}

/// Quantile coupling of two measures: merge the cumulative weights of the
/// sorted atoms and pair the quantiles. Its transport cost equals `W₂²`.
pub fn monotone_coupling(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Vec<CouplingCell> {
    let a = m1.sorted_atoms();
    let b = m2.sorted_atoms();
    let mut cells = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let (mut cum_a, mut cum_b) = (a[0].weight, b[0].weight);
    let mut prev = 0.0;
    loop {
        let last_a = i + 1 == a.len();
        let last_b = j + 1 == b.len();
        // The last atom on each side absorbs whatever mass rounding left over.
        let ea = if last_a { f64::INFINITY } else { cum_a };
        let eb = if last_b { f64::INFINITY } else { cum_b };
        let next = if last_a && last_b {
            cum_a.max(cum_b)
        } else {
            ea.min(eb)
        };
        let w = next - prev;
        if w > 0.0 {
            cells.push(CouplingCell {
                x: a[i].location,
                y: b[j].location,
                weight: w,
            });
        }
        prev = next;
        if last_a && last_b {
            break;
        }
        if ea <= eb {
            i += 1;
            cum_a += a[i].weight;
        }
        if eb <= ea {
            j += 1;
            cum_b += b[j].weight;
        }
    }
    cells
}

/// Quadratic Wasserstein distance between two atomic measures.
pub fn wasserstein2(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> f64 {
    transport_cost(&monotone_coupling(m1, m2)).max(0.0).sqrt()
}

/// `Σ w (x - y)²` over the coupling cells.
pub fn transport_cost(coupling: &[CouplingCell]) -> f64 {
    coupling
        .iter()
        .map(|c| c.weight * (c.x - c.y) * (c.x - c.y))
        .sum()
}

/// `W₂` between two equally weighted sample sets of the same size, without
/// allocating measures. Both slices are sorted in place.
pub fn wasserstein2_equal_size(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    (a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt()
}

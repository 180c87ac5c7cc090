use serde::{Deserialize, Serialize};

use super::{SteerError, MAX_FIELD_ORDER};

/// Multiplicities of order-`l` subfields. Channels are order-sorted: all
/// scalars first, then each order-1 subfield as 3 consecutive channels, and so on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FieldType {
    mult: Vec<usize>,
}

impl FieldType {
    pub fn new(mut mult: Vec<usize>) -> Result<Self, SteerError> {
        while mult.last() == Some(&0) {
            mult.pop();
        }
        if mult.is_empty() {
            return Err(SteerError::EmptyField);
        }
        if mult.len() > MAX_FIELD_ORDER + 1 {
            return Err(SteerError::FieldOrderTooHigh(mult.len() - 1));
        }
        Ok(Self { mult })
    }

    pub fn scalars(n: usize) -> Self {
        Self::new(vec![n]).expect("nonzero scalar count")
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.mult
    }

    pub fn max_order(&self) -> usize {
        self.mult.len() - 1
    }

    pub fn multiplicity(&self, l: usize) -> usize {
        self.mult.get(l).copied().unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.mult
            .iter()
            .enumerate()
            .map(|(l, m)| m * (2 * l + 1))
            .sum()
    }

    /// Channel index of the first subfield of order `l`.
    pub fn offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.multiplicity(k) * (2 * k + 1)).sum()
    }

    /// `(order, first channel)` for every subfield, in channel order.
    pub fn subfields(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mult.iter().enumerate().flat_map(move |(l, &m)| {
            let base = self.offset(l);
            (0..m).map(move |s| (l, base + s * (2 * l + 1)))
        })
    }

    /// Number of subfields with order > 0.
    pub fn gated_subfields(&self) -> usize {
        self.mult.iter().skip(1).sum()
    }
}

impl TryFrom<Vec<usize>> for FieldType {
    type Error = SteerError;
    fn try_from(v: Vec<usize>) -> Result<Self, SteerError> {
        Self::new(v)
    }
}

impl From<FieldType> for Vec<usize> {
    fn from(f: FieldType) -> Vec<usize> {
        f.mult
    }
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::case::{BusId, NetworkCase};

/// A distance-2 coloring: buses within two hops of each other never share a color.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coloring {
    /// Color of each bus, by internal index.
    colors: Vec<usize>,
    num_colors: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ColoringError {
    #[error("coloring covers {got} buses, case has {expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error("buses {a} and {b} are within two hops but share color {color}")]
    Conflict { a: BusId, b: BusId, color: usize },
}

impl Coloring {
    /// Builds a coloring from explicit per-index colors without validating it.
    pub fn from_colors(colors: Vec<usize>) -> Self {
        let num_colors = colors.iter().map(|c| c + 1).max().unwrap_or(0);
        Self { colors, num_colors }
    }

    pub fn color(&self, index: usize) -> usize {
        self.colors[index]
    }

    pub fn colors(&self) -> &[usize] {
        &self.colors
    }

    pub fn num_colors(&self) -> usize {
        self.num_colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Bus indices of each color, ascending within a group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_colors];
        for (i, &c) in self.colors.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }

    /// Exhaustive check of the distance-2 property against `case`.
    pub fn validate(&self, case: &NetworkCase) -> Result<(), ColoringError> {
        if self.colors.len() != case.num_buses() {
            return Err(ColoringError::SizeMismatch {
                got: self.colors.len(),
                expected: case.num_buses(),
            });
        }
        for i in 0..case.num_buses() {
            for j in two_hop(case, i) {
                if j > i && self.colors[i] == self.colors[j] {
                    return Err(ColoringError::Conflict {
                        a: case.bus(i).id,
                        b: case.bus(j).id,
                        color: self.colors[i],
                    });
                }
            }
        }
        Ok(())
    }
}

/// Buses at graph distance 1 or 2 from `i` (may repeat).
fn two_hop(case: &NetworkCase, i: usize) -> impl Iterator<Item = usize> + '_ {
    case.adjacent(i).iter().flat_map(move |&j| {
        std::iter::once(j).chain(case.adjacent(j).iter().copied().filter(move |&k| k != i))
    })
}

/// Greedy distance-2 coloring in ascending bus-id order, first admissible color.
pub fn distance2_coloring(case: &NetworkCase) -> Coloring {
    let n = case.num_buses();
    let mut colors: Vec<Option<usize>> = vec![None; n];
    let mut taken = Vec::new();
    for i in 0..n {
        taken.clear();
        taken.extend(two_hop(case, i).filter_map(|j| colors[j]));
        taken.sort_unstable();
        taken.dedup();
        let mut c = 0;
        for &t in &taken {
            if t == c {
                c += 1;
            } else if t > c {
                break;
            }
        }
        colors[i] = Some(c);
    }
    Coloring::from_colors(colors.into_iter().map(|c| c.expect("colored")).collect())
}

//! Cell-based search space: candidate operations, operation pools, relaxed
//! mixtures, discretisation and cardinality.

mod cell;
mod ops;

pub use cell::{
    alpha_weights, cell_forward, connections, mixed_connection, CellParams, EdgeParams, EdgeWeights,
};
pub use ops::{apply_op, attention_matrix, OpParams, OpShape};

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::config::AblationConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "conv_1")]
    Conv1,
    #[serde(rename = "t_conv")]
    TConv,
    #[serde(rename = "t_att")]
    TAtt,
    #[serde(rename = "gcn")]
    Gcn,
    #[serde(rename = "s_att")]
    SAtt,
}

impl OpKind {
    /// Every operation, in pool order.
    pub const ALL: [OpKind; 7] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::Conv1,
        OpKind::TConv,
        OpKind::TAtt,
        OpKind::Gcn,
        OpKind::SAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::Conv1 => "conv_1",
            OpKind::TConv => "t_conv",
            OpKind::TAtt => "t_att",
            OpKind::Gcn => "gcn",
            OpKind::SAtt => "s_att",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, OpKind::TAtt | OpKind::SAtt)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether `(i, j)` joins consecutive nodes.
pub fn is_adjacent(from: usize, to: usize) -> bool {
    to == from + 1
}

/// Candidate operations for adjacent and skip connections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpPools {
    pub adjacent: Vec<OpKind>,
    pub skip: Vec<OpKind>,
}

impl Default for OpPools {
    fn default() -> Self {
        Self::from_ablation(&AblationConfig::default()).expect("default pools are non-empty")
    }
}

impl OpPools {
    pub fn from_ablation(ab: &AblationConfig) -> Result<Self> {
        let keep = |op: &OpKind| {
            let basic = matches!(op, OpKind::Zero | OpKind::Identity | OpKind::Conv1);
            let conv = matches!(op, OpKind::TConv | OpKind::Gcn);
            !(ab.no_att && op.is_attention() || ab.no_conv && conv || ab.no_basic && basic)
        };
        let adjacent: Vec<OpKind> = OpKind::ALL.iter().copied().filter(keep).collect();
        let skip: Vec<OpKind> = if ab.no_grouping {
            adjacent.clone()
        } else {
            adjacent.iter().copied().filter(|op| !op.is_attention()).collect()
        };
        for (name, pool) in [("adjacent", &adjacent), ("skip", &skip)] {
            if pool.is_empty() {
                return Err(Error::config(format!(
                    "ablations leave the {name} operation pool empty"
                )));
            }
        }
        Ok(Self { adjacent, skip })
    }

    pub fn pool(&self, from: usize, to: usize) -> &[OpKind] {
        if is_adjacent(from, to) {
            &self.adjacent
        } else {
            &self.skip
        }
    }

    /// Distinct operations appearing in any pool.
    pub fn union(&self) -> Vec<OpKind> {
        OpKind::ALL
            .iter()
            .copied()
            .filter(|op| self.adjacent.contains(op) || self.skip.contains(op))
            .collect()
    }
}

/// Index of the winning operation: the largest softmax weight, with ties
/// resolved towards the earlier pool entry.
pub fn argmax_op(logits: &[f64]) -> usize {
    let weights = softmax(logits);
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| libm::exp(v - mx)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One fixed connection of a discretised cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteCell {
    pub edges: Vec<ChosenEdge>,
}

/// Raw logits of one relaxed connection, kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAlpha {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<OpKind>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScale {
    pub cells: Vec<DiscreteCell>,
    #[serde(default)]
    pub alpha: Vec<EdgeAlpha>,
}

/// A fixed architecture: one operation per connection, per cell, per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub nodes_per_cell: usize,
    pub scales: Vec<DiscreteScale>,
}

impl DiscreteArchitecture {
    /// Picks the argmax operation of every connection. `alphas[k]` holds the
    /// logits of scale `k` in [`connections`] order; every stacked cell of a
    /// scale receives the same choice.
    pub fn from_alphas(
        pools: &OpPools,
        nodes_per_cell: usize,
        cells_per_scale: &[usize],
        alphas: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        if alphas.len() != cells_per_scale.len() {
            return Err(Error::config(format!(
                "{} alpha sets for {} scales",
                alphas.len(),
                cells_per_scale.len()
            )));
        }
        let conns = connections(nodes_per_cell);
        let mut scales = Vec::with_capacity(alphas.len());
        for (scale_alpha, &n_cells) in alphas.iter().zip(cells_per_scale) {
            if scale_alpha.len() != conns.len() {
                return Err(Error::config("alpha count does not match the cell's connections"));
            }
            let mut edges = Vec::with_capacity(conns.len());
            let mut raw = Vec::with_capacity(conns.len());
            for (&(from, to), logits) in conns.iter().zip(scale_alpha) {
                let pool = pools.pool(from, to);
                if logits.len() != pool.len() {
                    return Err(Error::shape("discretize", &[logits.len()], &[pool.len()]));
                }
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(format!("non-finite alpha on connection ({from}, {to})")));
                }
                edges.push(ChosenEdge {
                    from,
                    to,
                    op: pool[argmax_op(logits)],
                });
                raw.push(EdgeAlpha {
                    from,
                    to,
                    ops: pool.to_vec(),
                    alpha: logits.clone(),
                });
            }
            let cell = DiscreteCell { edges };
            scales.push(DiscreteScale {
                cells: alloc::vec![cell; n_cells],
                alpha: raw,
            });
        }
        Ok(Self {
            nodes_per_cell,
            scales,
        })
    }

    pub fn cells_per_scale(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.cells.len()).collect()
    }

    /// Checks the connection layout of every cell.
    pub fn validate(&self) -> Result<()> {
        let conns = connections(self.nodes_per_cell);
        for (k, s) in self.scales.iter().enumerate() {
            if s.cells.is_empty() {
                return Err(Error::config(format!("scale {} has no cells", k + 1)));
            }
            for cell in &s.cells {
                let layout: Vec<(usize, usize)> = cell.edges.iter().map(|e| (e.from, e.to)).collect();
                if layout != conns {
                    return Err(Error::config(format!(
                        "scale {} cell does not list the connections of a {}-node cell",
                        k + 1,
                        self.nodes_per_cell
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of distinct architectures for `cells` cells of `nodes` nodes.
///
/// Ungrouped: `7^(M(M-1)C/2)`. Grouped: adjacent connections choose from
/// seven operations and skip connections from five, independently, so the
/// counts multiply.
pub fn space_cardinality(nodes: usize, cells: usize, grouped: bool) -> Result<BigUint> {
    if nodes < 2 || cells == 0 {
        return Err(Error::config("cardinality needs at least 2 nodes and 1 cell"));
    }
    let all = nodes * (nodes - 1) / 2;
    let pow = |base: u32, e: usize| -> Result<BigUint> {
        let e = u32::try_from(e).map_err(|_| Error::config("cardinality exponent too large"))?;
        Ok(BigUint::from(base).pow(e))
    };
    if grouped {
        let adjacent = (nodes - 1) * cells;
        let skip = (nodes - 2) * (nodes - 1) / 2 * cells;
        Ok(pow(7, adjacent)? * pow(5, skip)?)
    } else {
        pow(7, all * cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn default_pools() {
        let p = OpPools::default();
        assert_eq!(p.adjacent.len(), 7);
        assert_eq!(
            p.skip,
            vec![OpKind::Zero, OpKind::Identity, OpKind::Conv1, OpKind::TConv, OpKind::Gcn]
        );
        assert_eq!(p.pool(0, 1), &p.adjacent[..]);
        assert_eq!(p.pool(0, 2), &p.skip[..]);
    }

    #[test]
    fn ablation_pools() {
        let mut ab = AblationConfig {
            no_att: true,
            ..Default::default()
        };
        let p = OpPools::from_ablation(&ab).unwrap();
        assert!(!p.adjacent.iter().any(|o| o.is_attention()));
        ab.no_att = false;
        ab.no_grouping = true;
        let p = OpPools::from_ablation(&ab).unwrap();
        assert_eq!(p.skip.len(), 7);
        ab.no_grouping = false;
        ab.no_basic = true;
        ab.no_conv = true;
        // the skip pool would be empty
        assert!(OpPools::from_ablation(&ab).is_err());
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(argmax_op(&[3.0, 1.0, 1.0]), 0);
        assert_eq!(argmax_op(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax_op(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn cardinality_values() {
        assert_eq!(space_cardinality(2, 1, false).unwrap(), BigUint::from(7u32));
        assert_eq!(space_cardinality(2, 1, true).unwrap(), BigUint::from(7u32));
        assert_eq!(space_cardinality(3, 1, true).unwrap(), BigUint::from(245u32));
        assert_eq!(space_cardinality(4, 1, false).unwrap(), BigUint::from(7u32).pow(6));
        assert!(space_cardinality(1, 1, true).is_err());
        // far beyond u128
        let big = space_cardinality(40, 10, false).unwrap();
        assert!(big.bits() > 128);
    }

    #[test]
    fn discretize_layout() {
        let pools = OpPools::default();
        let alphas = vec![vec![vec![0.0; 7], vec![0.0, 5.0, 0.0, 0.0, 0.0], vec![0.0; 7]]];
        let arch = DiscreteArchitecture::from_alphas(&pools, 3, &[2], &alphas).unwrap();
        arch.validate().unwrap();
        let cell = &arch.scales[0].cells[0];
        assert_eq!(cell.edges[0].op, OpKind::Zero);
        assert_eq!(cell.edges[1].op, OpKind::Identity);
        assert_eq!((cell.edges[1].from, cell.edges[1].to), (0, 2));
        assert_eq!(arch.cells_per_scale(), vec![2]);
        let bad = vec![vec![vec![0.0; 6], vec![0.0; 5], vec![0.0; 7]]];
        assert!(DiscreteArchitecture::from_alphas(&pools, 3, &[1], &bad).is_err());
    }
}

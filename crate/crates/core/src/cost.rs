//! How many covariance (`Σ`) and cross-correlation (`E`) matrices an exact
//! bookkeeping of a 1-D conv net would need, traced back from one output.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CostMode {
    /// Stride equals kernel: receptive fields multiply.
    NoOverlap,
    /// Stride 1: receptive fields grow by `k − 1` per layer.
    Overlap,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(CostMode::Overlap),
            "no-overlap" | "nooverlap" | "no_overlap" => Ok(CostMode::NoOverlap),
            _ => Err(Error::Domain(format!("unknown cost mode {s:?} (overlap | no-overlap)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    /// Layers back from the output (0 is the output layer).
    pub q: u32,
    pub sigma_count: u64,
    pub e_count: u64,
}

fn overflow() -> Error {
    Error::Domain("count overflows 64 bits".into())
}

/// Counts at the `(q+1)`-th last layer. Nodes: `k^q` without overlap,
/// `(k−1)q + 1` with overlap; pairs: `½(nodes + 1)·nodes`, self-pairs
/// included, so the output layer (`q = 0`) counts one of each.
pub fn cost_counts(k: u64, q: u32, mode: CostMode) -> Result<CostRow> {
    if k < 2 {
        return Err(Error::Domain(format!("kernel size must be >= 2, got {k}")));
    }
    let nodes = match mode {
        CostMode::NoOverlap => k.checked_pow(q).ok_or_else(overflow)?,
        CostMode::Overlap => (k - 1)
            .checked_mul(q as u64)
            .and_then(|v| v.checked_add(1))
            .ok_or_else(overflow)?,
    };
    let pairs = nodes
        .checked_add(1)
        .and_then(|v| v.checked_mul(nodes))
        .ok_or_else(overflow)?
        / 2;
    Ok(CostRow {
        q,
        sigma_count: nodes,
        e_count: pairs,
    })
}

/// One row per layer from the output back to depth `depth`.
pub fn cost_table(k: u64, depth: u32, mode: CostMode) -> Result<Vec<CostRow>> {
    (0..=depth).map(|q| cost_counts(k, q, mode)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let r = cost_counts(3, 2, CostMode::NoOverlap).unwrap();
        assert_eq!((r.sigma_count, r.e_count), (9, 45));
        let r = cost_counts(3, 2, CostMode::Overlap).unwrap();
        assert_eq!((r.sigma_count, r.e_count), (5, 15));
        let r = cost_counts(3, 0, CostMode::Overlap).unwrap();
        assert_eq!((r.sigma_count, r.e_count), (1, 1));
    }

    #[test]
    fn modes_agree_at_depth_one() {
        for k in 2..6 {
            assert_eq!(
                cost_counts(k, 1, CostMode::Overlap).unwrap(),
                cost_counts(k, 1, CostMode::NoOverlap).unwrap()
            );
        }
    }

    #[test]
    fn rejects_small_kernel_and_overflow() {
        assert!(cost_counts(1, 3, CostMode::Overlap).is_err());
        assert!(cost_counts(5, 40, CostMode::NoOverlap).is_err());
        assert_eq!("no-overlap".parse::<CostMode>().unwrap(), CostMode::NoOverlap);
        assert!("diagonal".parse::<CostMode>().is_err());
    }

    #[test]
    fn table_length() {
        assert_eq!(cost_table(3, 4, CostMode::Overlap).unwrap().len(), 5);
    }
}

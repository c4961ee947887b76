//! Area-based performance bound of a client trained on a per-class subset.
//!
//! Each class contributes a circle of radius `Z_c` (share of the class used
//! when training on the full split) or `z_c` (share in the action-partitioned
//! subset). The gap between the two total areas is bounded by
//! `Ω = π·Σ(Z_c² − z_c²)`, which holds with equality under these definitions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Full-data radii.
    pub full: Vec<f64>,
    /// Selected-data radii, `0 ≤ z_c ≤ Z_c ≤ 1`.
    pub selected: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceBound {
    pub p_full: f64,
    pub p_selected: f64,
    pub omega: f64,
}

pub fn compute_performance_bound(b: &BoundInputs) -> Result<PerformanceBound> {
    if b.full.len() != b.selected.len() {
        return Err(Error::LengthMismatch {
            left: b.full.len(),
            right: b.selected.len(),
        });
    }
    for (c, (&big, &small)) in b.full.iter().zip(&b.selected).enumerate() {
        if !(0.0..=1.0).contains(&big) || !(0.0..=1.0).contains(&small) {
            return Err(Error::invalid("radii", format!("class {c}: radii must lie in [0, 1]")));
        }
        if small > big {
            return Err(Error::invalid(
                "radii",
                format!("class {c}: selected radius {small} exceeds full radius {big}"),
            ));
        }
    }
    let p_full = PI * b.full.iter().map(|z| z * z).sum::<f64>();
    let p_selected = PI * b.selected.iter().map(|z| z * z).sum::<f64>();
    let omega = PI * b.full.iter().zip(&b.selected).map(|(big, small)| big * big - small * small).sum::<f64>();
    Ok(PerformanceBound {
        p_full,
        p_selected,
        omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_equal_radii_give_zero_gap() {
        let b = compute_performance_bound(&BoundInputs {
            full: vec![0.3, 1.0, 0.7],
            selected: vec![0.3, 1.0, 0.7],
        })
        .unwrap();
        assert_eq!(b.omega, 0.0);
        assert_eq!(b.p_full, b.p_selected);
    }

    #[test]
    fn test_hand_value() {
        let b = compute_performance_bound(&BoundInputs {
            full: vec![1.0, 1.0],
            selected: vec![0.5, 0.5],
        })
        .unwrap();
        assert!((b.omega - 1.5 * PI).abs() < 1e-12);
        assert!((b.omega - 4.7124).abs() < 1e-4);
    }

    #[test]
    fn test_rejects_invalid_radii() {
        let bad = |full: Vec<f64>, selected: Vec<f64>| compute_performance_bound(&BoundInputs { full, selected }).is_err();
        assert!(bad(vec![0.5], vec![0.6]));
        assert!(bad(vec![1.5], vec![0.6]));
        assert!(bad(vec![0.5, 0.5], vec![0.1]));
    }
}

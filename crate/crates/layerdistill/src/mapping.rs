//! Student-to-teacher layer assignment.
//!
//! Student layer `l` is paired with teacher layer
//! `round((l-1) * (Lt-1) / (Ls-1)) + 1`, rounding half away from zero.
//! The assignment is injective, order preserving, pins both endpoints, and
//! spreads the selected teacher layers uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered (student layer, teacher layer) pairs, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub student_layers: usize,
    pub teacher_layers: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn teacher_layer(&self, student_layer: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(l, _)| *l == student_layer)
            .map(|(_, t)| *t)
    }

    pub fn teacher_layers_in_order(&self) -> Vec<usize> {
        self.pairs.iter().map(|(_, t)| *t).collect()
    }
}

/// Integer-exact round-half-away-from-zero of `num/den` for non-negative
/// operands.
fn div_round_half_away(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Compute the assignment for `student_layers` students over
/// `teacher_layers` teachers. Requires `2 <= student_layers <= teacher_layers`.
pub fn layer_map(student_layers: usize, teacher_layers: usize) -> Result<LayerMap> {
    if student_layers < 2 {
        return Err(Error::usage(format!(
            "student must have at least 2 layers, got {student_layers}"
        )));
    }
    if student_layers > teacher_layers {
        return Err(Error::usage(format!(
            "student layers ({student_layers}) exceed teacher layers ({teacher_layers})"
        )));
    }
    let den = (student_layers - 1) as u64;
    let scale = (teacher_layers - 1) as u64;
    let pairs = (1..=student_layers)
        .map(|l| {
            let num = (l as u64 - 1) * scale;
            (l, div_round_half_away(num, den) as usize + 1)
        })
        .collect();
    Ok(LayerMap {
        student_layers,
        teacher_layers,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn twelve_into_forty() {
        let map = layer_map(12, 40).unwrap();
        assert_eq!(
            map.pairs,
            vec![
                (1, 1),
                (2, 5),
                (3, 8),
                (4, 12),
                (5, 15),
                (6, 19),
                (7, 22),
                (8, 26),
                (9, 29),
                (10, 33),
                (11, 36),
                (12, 40)
            ]
        );
    }

    #[test]
    fn equal_sizes_is_identity() {
        let map = layer_map(40, 40).unwrap();
        assert!(map.pairs.iter().all(|&(l, t)| l == t));
    }

    #[test]
    fn tie_rounds_away_from_zero() {
        // l=2 of (3, 6): (2-1)*5/2 = 2.5 rounds to 3, teacher layer 4.
        let map = layer_map(3, 6).unwrap();
        assert_eq!(map.pairs, vec![(1, 1), (2, 4), (3, 6)]);
    }

    #[test]
    fn degenerate_requests_rejected() {
        assert!(layer_map(1, 10).is_err());
        assert!(layer_map(0, 10).is_err());
        assert!(layer_map(12, 11).is_err());
    }

    proptest! {
        #[test]
        fn assignment_properties(ls in 2usize..48, extra in 0usize..48) {
            let lt = ls + extra;
            let map = layer_map(ls, lt).unwrap();
            prop_assert_eq!(map.pairs.len(), ls);
            prop_assert_eq!(map.pairs[0], (1, 1));
            prop_assert_eq!(map.pairs[ls - 1], (ls, lt));
            // Strictly increasing teacher layers (injective, order preserving).
            for w in map.pairs.windows(2) {
                prop_assert!(w[0].1 < w[1].1);
            }
            // Gaps between consecutive teacher layers stay within 1 of the
            // ideal spacing, and max gap - min gap <= 1.
            let ideal = (lt - 1) as f64 / (ls - 1) as f64;
            let gaps: Vec<usize> = map.pairs.windows(2).map(|w| w[1].1 - w[0].1).collect();
            if !gaps.is_empty() {
                let min = *gaps.iter().min().unwrap();
                let max = *gaps.iter().max().unwrap();
                prop_assert!(max - min <= 1, "gaps {:?}", gaps);
                for &g in &gaps {
                    prop_assert!((g as f64 - ideal).abs() <= 1.0);
                }
            }
        }
    }
}

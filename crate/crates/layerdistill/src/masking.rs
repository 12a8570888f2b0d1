//! Span masking over downsampled frames.
//!
//! Each frame index is independently selected as a span start with
//! probability `p`; every span covers `span` frames, clipped at the
//! sequence end, and overlapping spans merge. Far from the sequence start
//! the per-frame mask probability converges to `1 - (1-p)^span`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The set of masked frame indices plus the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub frame_count: usize,
    /// Sorted, unique masked indices. May be empty.
    pub masked: Vec<usize>,
    pub start_prob: f64,
    pub span: usize,
}

impl MaskSpec {
    /// A mask with no masked frames.
    pub fn empty(frame_count: usize) -> Self {
        MaskSpec {
            frame_count,
            masked: Vec::new(),
            start_prob: 0.0,
            span: 1,
        }
    }

    pub fn coverage(&self) -> f64 {
        self.masked.len() as f64 / self.frame_count as f64
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }
}

fn check_params(p: f64, span: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::usage(format!("start probability {p} outside [0, 1]")));
    }
    if span < 1 {
        return Err(Error::usage("span must be >= 1".to_string()));
    }
    Ok(())
}

/// Sample a span mask over `frame_count` frames.
pub fn sample_mask(
    frame_count: usize,
    p: f64,
    span: usize,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    check_params(p, span)?;
    let mut covered = vec![false; frame_count];
    for start in 0..frame_count {
        if rng.gen::<f64>() < p {
            for slot in covered.iter_mut().skip(start).take(span) {
                *slot = true;
            }
        }
    }
    let masked = covered
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(MaskSpec {
        frame_count,
        masked,
        start_prob: p,
        span,
    })
}

/// Stationary per-frame mask probability far from the sequence start:
/// `1 - (1-p)^span`.
pub fn expected_coverage(p: f64, span: usize) -> Result<f64> {
    check_params(p, span)?;
    Ok(1.0 - (1.0 - p).powi(span as i32))
}

/// Empirical vs. expected coverage over one long sampled sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskStats {
    pub p: f64,
    pub span: usize,
    pub n: usize,
    pub empirical_coverage: f64,
    pub expected_coverage: f64,
}

pub fn mask_stats(p: f64, span: usize, n: usize, rng: &mut impl Rng) -> Result<MaskStats> {
    if n == 0 {
        return Err(Error::usage("n must be >= 1".to_string()));
    }
    let mask = sample_mask(n, p, span, rng)?;
    Ok(MaskStats {
        p,
        span,
        n,
        empirical_coverage: mask.coverage(),
        expected_coverage: expected_coverage(p, span)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn zero_probability_masks_nothing() {
        let mut rng = SeedTree::new(1).stream("mask", &[0]);
        let mask = sample_mask(500, 0.0, 10, &mut rng).unwrap();
        assert!(mask.masked.is_empty());
    }

    #[test]
    fn probability_one_masks_everything() {
        let mut rng = SeedTree::new(1).stream("mask", &[0]);
        let mask = sample_mask(5, 1.0, 10, &mut rng).unwrap();
        assert_eq!(mask.masked, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let t = SeedTree::new(9);
        let a = sample_mask(200, 0.065, 10, &mut t.stream("mask", &[3])).unwrap();
        let b = sample_mask(200, 0.065, 10, &mut t.stream("mask", &[3])).unwrap();
        assert_eq!(a, b);
        let c = sample_mask(200, 0.065, 10, &mut t.stream("mask", &[4])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn closed_form_reference_points() {
        assert_eq!(expected_coverage(0.0, 7).unwrap(), 0.0);
        assert_eq!(expected_coverage(1.0, 1).unwrap(), 1.0);
        let c = expected_coverage(0.065, 10).unwrap();
        assert!((c - (1.0 - 0.935f64.powi(10))).abs() < 1e-15);
        assert!((c - 0.49).abs() < 0.01);
    }

    #[test]
    fn monte_carlo_matches_closed_form_in_stationary_region() {
        // Coverage frequency at indices >= span-1 over many short sequences.
        let t = SeedTree::new(4);
        let (p, span, frames) = (0.065, 10, 60);
        let trials = 4000;
        let mut hits = 0usize;
        let mut total = 0usize;
        for k in 0..trials {
            let mask = sample_mask(frames, p, span, &mut t.stream("mc", &[k])).unwrap();
            for idx in (span - 1)..frames {
                total += 1;
                if mask.contains(idx) {
                    hits += 1;
                }
            }
        }
        let expected = expected_coverage(p, span).unwrap();
        let empirical = hits as f64 / total as f64;
        let stderr = (expected * (1.0 - expected) / total as f64).sqrt();
        // Frames within one sequence are correlated; allow a wide margin.
        assert!(
            (empirical - expected).abs() < 12.0 * stderr,
            "empirical {empirical} vs expected {expected}"
        );
    }

    #[test]
    fn boundary_coverage_is_reduced() {
        // At index t < span-1 only starts 0..=t can cover, so the expected
        // coverage is 1-(1-p)^(t+1).
        let t = SeedTree::new(5);
        let (p, span) = (0.2, 5);
        let trials = 20000;
        let mut hits0 = 0usize;
        for k in 0..trials {
            let mask = sample_mask(32, p, span, &mut t.stream("mc", &[k])).unwrap();
            if mask.contains(0) {
                hits0 += 1;
            }
        }
        let expected = 1.0 - (1.0 - p).powi(1);
        let empirical = hits0 as f64 / trials as f64;
        let stderr = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!(
            (empirical - expected).abs() < 4.0 * stderr,
            "empirical {empirical} vs expected {expected}"
        );
    }

    #[test]
    fn invalid_params_are_usage_errors() {
        let mut rng = SeedTree::new(0).stream("mask", &[0]);
        assert!(sample_mask(10, -0.1, 5, &mut rng).is_err());
        assert!(sample_mask(10, 1.1, 5, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 0, &mut rng).is_err());
        assert!(expected_coverage(0.5, 0).is_err());
    }
}

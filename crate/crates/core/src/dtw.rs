//! Dynamic time warping of discharge cycles against a reference cycle.
//!
//! A cycle is synchronized in three moves: pick the reference (the battery's
//! first cycle), find the minimum-cost warping path between the two voltage
//! curves, then read the path as a function from reference position to cycle
//! position. The result is a length-`d` trajectory of cycle-side time indices;
//! the reference itself maps to the diagonal `1, 2, …, d`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{
    CycleError, DischargeCycle, DischargeSeries, ReferenceCycle, SynchronizedCycle,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtwError {
    #[error("warping path does not cover reference positions 1..={d} ending at ({d}, {t}): {reason}")]
    PathReferenceMismatch { d: usize, t: usize, reason: String },
    #[error("cycle {cycle_number}: {source}")]
    Alignment {
        cycle_number: u32,
        #[source]
        source: Box<DtwError>,
    },
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("no cycles to synchronize")]
    NoCycles,
}

/// Sequence of `(reference_index, cycle_index)` pairs, both 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpingPath {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl WarpingPath {
    /// Boundary, monotonicity and unit-step continuity for a `d × t` grid.
    pub fn is_valid_for(&self, d: usize, t: usize) -> bool {
        let (Some(&first), Some(&last)) = (self.pairs.first(), self.pairs.last()) else {
            return false;
        };
        if first != (1, 1) || last != (d, t) {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            let dr = b.0 as isize - a.0 as isize;
            let dc = b.1 as isize - a.1 as isize;
            (0..=1).contains(&dr) && (0..=1).contains(&dc) && dr + dc > 0
        })
    }
}

/// Minimum-cost alignment of two voltage sequences under `|a_l − b_h|` with
/// steps `(1,0)`, `(0,1)`, `(1,1)`.
///
/// When predecessors tie during backtracking the diagonal wins, then the
/// step that advanced the reference.
pub fn align_sequences(reference: &[f64], cycle: &[f64]) -> WarpingPath {
    let d = reference.len();
    let t = cycle.len();
    assert!(d > 0 && t > 0, "sequences must be non-empty");

    let mut acc = vec![0.0f64; d * t];
    let at = |i: usize, j: usize| i * t + j;
    for i in 0..d {
        for j in 0..t {
            let local = (reference[i] - cycle[j]).abs();
            let best_prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[at(0, j - 1)],
                (_, 0) => acc[at(i - 1, 0)],
                _ => acc[at(i - 1, j - 1)]
                    .min(acc[at(i - 1, j)])
                    .min(acc[at(i, j - 1)]),
            };
            acc[at(i, j)] = local + best_prev;
        }
    }

    let mut pairs = Vec::with_capacity(d + t);
    let (mut i, mut j) = (d - 1, t - 1);
    pairs.push((d, t));
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[at(i - 1, j - 1)];
            let up = acc[at(i - 1, j)];
            let left = acc[at(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        pairs.push((i + 1, j + 1));
    }
    pairs.reverse();

    WarpingPath {
        pairs,
        total_cost: acc[at(d - 1, t - 1)],
    }
}

pub fn dtw_align(reference: &ReferenceCycle, cycle: &DischargeCycle) -> WarpingPath {
    align_sequences(&reference.cycle().voltages(), &cycle.voltages())
}

/// Collapses a warping path to one cycle index per reference position,
/// keeping the last (largest) cycle index when several map to the same one.
pub fn synchronize_cycle(
    reference: &ReferenceCycle,
    cycle: &DischargeCycle,
    path: &WarpingPath,
) -> Result<SynchronizedCycle, DtwError> {
    let d = reference.len();
    let t = cycle.len();
    let mismatch = |reason: &str| DtwError::PathReferenceMismatch {
        d,
        t,
        reason: reason.to_string(),
    };
    if !path.is_valid_for(d, t) {
        return Err(mismatch("path is not a valid warping path for this pair"));
    }
    let mut warped = vec![0.0f64; d];
    for &(l, h) in &path.pairs {
        // pairs are monotone, so the last write per reference index wins
        warped[l - 1] = h as f64;
    }
    if warped.iter().any(|&h| h == 0.0) {
        return Err(mismatch("a reference position has no matched sample"));
    }
    Ok(SynchronizedCycle {
        cycle_number: cycle.cycle_number(),
        warped_indices: warped,
    })
}

/// Aligns and collapses in one call.
pub fn synchronize(
    reference: &ReferenceCycle,
    cycle: &DischargeCycle,
) -> Result<SynchronizedCycle, DtwError> {
    let path = dtw_align(reference, cycle);
    synchronize_cycle(reference, cycle, &path).map_err(|e| DtwError::Alignment {
        cycle_number: cycle.cycle_number(),
        source: Box::new(e),
    })
}

/// Synchronizes every cycle against `reference` and concatenates them in the
/// given order.
pub fn build_series(
    cycles: &[DischargeCycle],
    reference: &ReferenceCycle,
) -> Result<DischargeSeries, DtwError> {
    if cycles.is_empty() {
        return Err(DtwError::NoCycles);
    }
    let mut series = DischargeSeries::new(reference.len());
    for cycle in cycles {
        let sync = synchronize(reference, cycle)?;
        series.push(&sync)?;
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cycle(n: u32, v: &[f64]) -> DischargeCycle {
        DischargeCycle::from_voltages(n, v).unwrap()
    }

    /// Enumerates every monotone, continuous path from (0,0) to (d-1,t-1).
    fn brute_force_cost(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let here = (a[i] - b[j]).abs();
            if i + 1 == a.len() && j + 1 == b.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            here + best
        }
        go(a, b, 0, 0)
    }

    #[test]
    fn self_alignment_is_diagonal() {
        let v = [3.3, 3.2, 3.1, 2.9, 2.0];
        let p = align_sequences(&v, &v);
        assert_eq!(p.total_cost, 0.0);
        assert_eq!(p.pairs, (1..=5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn three_against_two() {
        let p = align_sequences(&[3.0, 2.0, 1.0], &[3.0, 1.0]);
        assert_eq!(p.total_cost, 1.0);
        assert_eq!(brute_force_cost(&[3.0, 2.0, 1.0], &[3.0, 1.0]), 1.0);
        assert_eq!(p.pairs, vec![(1, 1), (2, 1), (3, 2)]);

        let r = ReferenceCycle::new(cycle(1, &[3.0, 2.0, 1.0].map(|v| v + 1.0))).unwrap();
        let c = cycle(2, &[4.0, 2.0]);
        let path = dtw_align(&r, &c);
        let s = synchronize_cycle(&r, &c, &path).unwrap();
        assert_eq!(s.warped_indices, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn reference_synchronizes_to_identity() {
        let v: Vec<f64> = (0..16).map(|i| 3.3 - 0.08 * i as f64).collect();
        let r = ReferenceCycle::new(cycle(1, &v)).unwrap();
        let s = synchronize(&r, r.cycle()).unwrap();
        assert_eq!(s.warped_indices, (1..=16).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_cycle_ends_below_diagonal() {
        let v: Vec<f64> = (0..20).map(|i| 3.3 - 0.065 * i as f64).collect();
        let r = ReferenceCycle::new(cycle(1, &v)).unwrap();
        let short = cycle(2, &v[..15]);
        let s = synchronize(&r, &short).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(*s.warped_indices.last().unwrap(), 15.0);
        assert!(s.warped_indices.iter().enumerate().all(|(l, &h)| h <= (l + 1) as f64));
    }

    #[test]
    fn bad_path_is_rejected() {
        let r = ReferenceCycle::new(cycle(1, &[3.0, 2.5, 2.0])).unwrap();
        let c = cycle(2, &[3.0, 2.0]);
        let path = WarpingPath {
            pairs: vec![(1, 1), (2, 2)],
            total_cost: 0.0,
        };
        assert!(matches!(
            synchronize_cycle(&r, &c, &path),
            Err(DtwError::PathReferenceMismatch { .. })
        ));
    }

    #[test]
    fn series_concatenates_in_order() {
        let base: Vec<f64> = (0..6).map(|i| 3.3 - 0.2 * i as f64).collect();
        let r = ReferenceCycle::new(cycle(1, &base)).unwrap();
        let cycles = vec![
            cycle(1, &base),
            cycle(2, &base[..5]),
            cycle(3, &[3.3, 3.3, 3.1, 2.9, 2.7, 2.5, 2.3]),
        ];
        let series = build_series(&cycles, &r).unwrap();
        assert_eq!(series.len(), 18);
        assert_eq!(series.segment(1).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let second = synchronize(&r, &cycles[1]).unwrap();
        assert_eq!(series.segment(2).unwrap(), second.warped_indices.as_slice());
        assert!(matches!(build_series(&[], &r), Err(DtwError::NoCycles)));
    }

    proptest! {
        #[test]
        fn dp_matches_enumeration(
            a in prop::collection::vec(2.0f64..3.5, 1..=8),
            b in prop::collection::vec(2.0f64..3.5, 1..=8),
        ) {
            let p = align_sequences(&a, &b);
            let brute = brute_force_cost(&a, &b);
            prop_assert!((p.total_cost - brute).abs() <= 1e-12 * brute.max(1.0));
            prop_assert!(p.is_valid_for(a.len(), b.len()));
        }

        #[test]
        fn cost_symmetric_and_sync_monotone(
            a in prop::collection::vec(2.0f64..3.5, 2..60),
            b in prop::collection::vec(2.0f64..3.5, 1..60),
        ) {
            let ab = align_sequences(&a, &b);
            let ba = align_sequences(&b, &a);
            prop_assert!((ab.total_cost - ba.total_cost).abs() <= 1e-9);
            let r = ReferenceCycle::new(cycle(1, &a)).unwrap();
            let c = cycle(2, &b);
            let s = synchronize(&r, &c).unwrap();
            prop_assert_eq!(s.len(), a.len());
            prop_assert!(s.warped_indices.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*s.warped_indices.last().unwrap(), b.len() as f64);
        }

        #[test]
        fn self_cost_zero(a in prop::collection::vec(2.0f64..3.5, 1..80)) {
            let p = align_sequences(&a, &a);
            prop_assert_eq!(p.total_cost, 0.0);
            prop_assert!(p.pairs.iter().all(|&(x, y)| x == y));
        }
    }
}

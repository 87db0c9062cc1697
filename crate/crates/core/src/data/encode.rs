//! Delta encoding and normalization: the models see per-step increments,
//! standardized per axis over the whole corpus.

use super::{Corpus, Trajectory};
use crate::error::{Error, Result};

/// Increment form of a trajectory. Reconstruction is sequential:
/// p[i+1] = p[i] + increments[i] (+ residuals[i]), starting from `origin`.
///
/// A single f64 increment cannot always reproduce the next point bit-exactly
/// (when |increment| far exceeds |point|, the sum grid is coarser than the
/// point's ulp), so each increment carries the exact subtraction residual.
/// Models consume `increments` only; residuals are below physical relevance
/// (sub-femtometer) and generated trajectories leave them zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTrajectory {
    pub origin: [f64; 2],
    pub increments: Vec<[f64; 2]>,
    pub residuals: Vec<[f64; 2]>,
}

/// Knuth two-sum: s = fl(a + b) and the exact rounding error e, so that
/// s + e == a + b as real numbers.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let t = s - a;
    let e = (a - (s - t)) + (b - t);
    (s, e)
}

/// One exact reconstruction step: with (hi, lo) the exact two-float
/// difference to - from, returns `to` bit-exactly.
fn step(from: f64, hi: f64, lo: f64) -> f64 {
    let (s, e) = two_sum(from, hi);
    // e + lo is the representable gap between s and the true target.
    s + (e + lo)
}

/// Encode points as increments whose sequential re-addition reproduces
/// every point bit-exactly (signed zero normalizes to +0.0; addition cannot
/// produce -0.0 from a +0.0 start).
pub fn to_deltas(points: &[[f64; 2]]) -> Result<DeltaTrajectory> {
    if points.len() < 2 {
        return Err(Error::usage("to_deltas", format!("{} points, need at least 2", points.len())));
    }
    let origin = points[0];
    let mut increments = Vec::with_capacity(points.len() - 1);
    let mut residuals = Vec::with_capacity(points.len() - 1);
    for pair in points.windows(2) {
        let (dx, rx) = two_sum(pair[1][0], -pair[0][0]);
        let (dy, ry) = two_sum(pair[1][1], -pair[0][1]);
        increments.push([dx, dy]);
        residuals.push([rx, ry]);
    }
    Ok(DeltaTrajectory { origin, increments, residuals })
}

/// Rebuild absolute points by sequential addition from the origin. Missing
/// residuals (generated trajectories) count as zero.
pub fn from_deltas(deltas: &DeltaTrajectory) -> Vec<[f64; 2]> {
    let mut points = Vec::with_capacity(deltas.increments.len() + 1);
    let mut acc = deltas.origin;
    points.push(acc);
    for (i, d) in deltas.increments.iter().enumerate() {
        let r = deltas.residuals.get(i).copied().unwrap_or([0.0, 0.0]);
        acc = [step(acc[0], d[0], r[0]), step(acc[1], d[1], r[1])];
        points.push(acc);
    }
    points
}

/// Global per-axis standardization statistics over corpus increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Axes whose spread was zero; their std is replaced by 1.
    pub degenerate: [bool; 2],
}

impl NormStats {
    pub fn normalize_inc(&self, d: [f64; 2]) -> [f64; 2] {
        [(d[0] - self.mean[0]) / self.std[0], (d[1] - self.mean[1]) / self.std[1]]
    }

    pub fn denormalize_inc(&self, d: [f64; 2]) -> [f64; 2] {
        [d[0] * self.std[0] + self.mean[0], d[1] * self.std[1] + self.mean[1]]
    }

    /// Normalize a flat [s, 2] buffer in place.
    pub fn normalize_flat(&self, flat: &mut [f64]) {
        for pair in flat.chunks_mut(2) {
            pair[0] = (pair[0] - self.mean[0]) / self.std[0];
            pair[1] = (pair[1] - self.mean[1]) / self.std[1];
        }
    }

    /// Denormalize a flat [s, 2] buffer in place.
    pub fn denormalize_flat(&self, flat: &mut [f64]) {
        for pair in flat.chunks_mut(2) {
            pair[0] = pair[0] * self.std[0] + self.mean[0];
            pair[1] = pair[1] * self.std[1] + self.mean[1];
        }
    }
}

/// Fit per-axis mean/std over all increments of all trajectories. An axis
/// with zero spread gets std 1 and a degenerate flag instead of dividing by
/// zero.
pub fn fit_normalization(trajs: &[DeltaTrajectory]) -> Result<NormStats> {
    let n: usize = trajs.iter().map(|t| t.increments.len()).sum();
    if n == 0 {
        return Err(Error::Data("cannot fit normalization on an empty corpus".into()));
    }
    let mut mean = [0.0f64; 2];
    for t in trajs {
        for d in &t.increments {
            mean[0] += d[0];
            mean[1] += d[1];
        }
    }
    mean[0] /= n as f64;
    mean[1] /= n as f64;
    let mut var = [0.0f64; 2];
    for t in trajs {
        for d in &t.increments {
            var[0] += (d[0] - mean[0]) * (d[0] - mean[0]);
            var[1] += (d[1] - mean[1]) * (d[1] - mean[1]);
        }
    }
    var[0] /= n as f64;
    var[1] /= n as f64;
    let mut std = [var[0].sqrt(), var[1].sqrt()];
    let mut degenerate = [false; 2];
    for axis in 0..2 {
        if std[axis] == 0.0 {
            std[axis] = 1.0;
            degenerate[axis] = true;
        }
    }
    Ok(NormStats { mean, std, degenerate })
}

/// One model sample: a category index and normalized increments, flattened
/// row-major [s, 2].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub category: usize,
    pub deltas: Vec<f64>,
    pub origin: [f64; 2],
}

/// Delta-encode and standardize a corpus. All trajectories must share one
/// point count (the fixed-window pipeline guarantees 15).
pub fn prepare_training_examples(corpus: &Corpus) -> Result<(Vec<TrainingExample>, NormStats)> {
    if corpus.items.is_empty() {
        return Err(Error::Data("corpus has no trajectories".into()));
    }
    let len = corpus.items[0].trajectory.len();
    let mut deltas = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let t: &Trajectory = &item.trajectory;
        if t.len() != len {
            return Err(Error::Data(format!(
                "trajectory {} has {} points, corpus uses {len}",
                item.traj_id,
                t.len()
            )));
        }
        t.validate()?;
        deltas.push(to_deltas(&t.points)?);
    }
    let stats = fit_normalization(&deltas)?;
    let examples = corpus
        .items
        .iter()
        .zip(&deltas)
        .map(|(item, d)| {
            let mut flat = Vec::with_capacity(d.increments.len() * 2);
            for inc in &d.increments {
                let n = stats.normalize_inc(*inc);
                flat.push(n[0]);
                flat.push(n[1]);
            }
            TrainingExample { category: item.label.index(), deltas: flat, origin: d.origin }
        })
        .collect();
    Ok((examples, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn constant_trajectory_gives_all_zero_deltas() {
        let points = vec![[2.5, -1.0]; 6];
        let d = to_deltas(&points).unwrap();
        assert_eq!(d.origin, [2.5, -1.0]);
        assert!(d.increments.iter().all(|i| *i == [0.0, 0.0]));
        assert_eq!(from_deltas(&d), points);
    }

    #[test]
    fn straight_line_gives_constant_increments() {
        let points: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 1.5, i as f64 * -0.25]).collect();
        let d = to_deltas(&points).unwrap();
        for inc in &d.increments {
            assert_eq!(*inc, [1.5, -0.25]);
        }
    }

    #[test]
    fn fifteen_points_give_fourteen_increments() {
        let points: Vec<[f64; 2]> = (0..15).map(|i| [i as f64, (i * i) as f64 * 0.01]).collect();
        assert_eq!(to_deltas(&points).unwrap().increments.len(), 14);
    }

    #[test]
    fn single_point_is_rejected() {
        assert!(to_deltas(&[[0.0, 0.0]]).is_err());
        assert!(to_deltas(&[]).is_err());
    }

    proptest! {
        #[test]
        fn delta_round_trip_is_bit_exact(
            raw in prop::collection::vec((-1.0e9..1.0e9f64, -1.0e9..1.0e9f64), 2..40)
        ) {
            let points: Vec<[f64; 2]> = raw.iter().map(|&(x, y)| [x, y]).collect();
            let d = to_deltas(&points).unwrap();
            let back = from_deltas(&d);
            prop_assert_eq!(back, points);
        }
    }

    #[test]
    fn degenerate_axis_gets_unit_std_and_flag() {
        // x increments vary (1,2,3,4); y increments are all zero.
        let points = [[0.0, 7.0], [1.0, 7.0], [3.0, 7.0], [6.0, 7.0], [10.0, 7.0]];
        let d = to_deltas(&points).unwrap();
        let stats = fit_normalization(&[d]).unwrap();
        assert_eq!(stats.mean, [2.5, 0.0]);
        assert!(stats.degenerate[1]);
        assert_eq!(stats.std[1], 1.0);
        assert!(!stats.degenerate[0]);
        assert!(stats.std[0] > 1.0);
    }

    #[test]
    fn normalized_corpus_is_standard_per_axis() {
        let mut rng = SeededRng::new(3);
        let trajs: Vec<DeltaTrajectory> = (0..20)
            .map(|_| {
                let points: Vec<[f64; 2]> = (0..15)
                    .scan([0.0, 0.0], |acc, _| {
                        acc[0] += rng.uniform(8.0, 14.0);
                        acc[1] += rng.uniform(-0.6, 0.6);
                        Some(*acc)
                    })
                    .collect();
                to_deltas(&points).unwrap()
            })
            .collect();
        let stats = fit_normalization(&trajs).unwrap();
        let mut all = Vec::new();
        for t in &trajs {
            for d in &t.increments {
                all.push(stats.normalize_inc(*d));
            }
        }
        for axis in 0..2 {
            let n = all.len() as f64;
            let mean: f64 = all.iter().map(|d| d[axis]).sum::<f64>() / n;
            let var: f64 = all.iter().map(|d| (d[axis] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "axis {axis} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "axis {axis} std {}", var.sqrt());
        }
    }

    #[test]
    fn denormalize_inverts_normalize_within_tolerance() {
        let stats = NormStats { mean: [11.8, -0.02], std: [0.35, 0.18], degenerate: [false; 2] };
        let mut rng = SeededRng::new(4);
        for _ in 0..200 {
            let d = [rng.uniform(8.0, 14.0), rng.uniform(-1.0, 1.0)];
            let back = stats.denormalize_inc(stats.normalize_inc(d));
            assert!((back[0] - d[0]).abs() < 1e-12);
            assert!((back[1] - d[1]).abs() < 1e-12);
        }
        let mut flat = vec![10.0, 0.5, 12.0, -0.5];
        let orig = flat.clone();
        stats.normalize_flat(&mut flat);
        assert!((flat[0] - (10.0 - 11.8) / 0.35).abs() < 1e-15);
        stats.denormalize_flat(&mut flat);
        for (a, b) in flat.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_is_exact_for_hostile_point_pairs() {
        // Sign flips and magnitude jumps where plain re-addition of a single
        // f64 difference cannot land on the target bit pattern.
        let cases = [
            (0.1, 0.30000000000000004),
            (-1000.0, 999.9999999999999),
            (5.0e3, 5.0e3),
            (0.0, -0.0),
            (123.456, 123.456 + f64::EPSILON * 64.0),
            (0.58, 0.08123456789012345),
            (1.0e9, 1.0e-9),
        ];
        for (a, b) in cases {
            let points = [[a, -b], [b, a]];
            let d = to_deltas(&points).unwrap();
            let back = from_deltas(&d);
            assert_eq!(back, points, "round trip from {a} to {b}");
            // Bit patterns match too, except that addition normalizes -0.0
            // to +0.0 (the one value pair where == is weaker than bits).
            for (got, want) in back.iter().flatten().zip(points.iter().flatten()) {
                if *want != 0.0 {
                    assert_eq!(got.to_bits(), want.to_bits(), "bits of {want}");
                }
            }
        }
    }

    #[test]
    fn two_sum_error_term_is_exact() {
        // Catastrophic cancellation: 0.1 + 0.2 rounds; s + e must carry the
        // lost low bits so that subtracting recovers them.
        let (s, e) = two_sum(0.1, 0.2);
        assert_eq!(s, 0.30000000000000004);
        assert!(e != 0.0);
        // -0.2 + (s + e) is exactly 0.1 as reals; step must round to it.
        assert_eq!(step(-0.2, s, e), 0.1);
    }

    #[test]
    fn missing_residuals_reconstruct_within_float_rounding() {
        // Generated trajectories have no residuals; reconstruction is then
        // plain correctly-rounded addition.
        let d = DeltaTrajectory {
            origin: [10.0, 1.0],
            increments: vec![[11.7, -0.4]; 14],
            residuals: Vec::new(),
        };
        let back = from_deltas(&d);
        assert_eq!(back.len(), 15);
        for (i, p) in back.iter().enumerate() {
            assert!((p[0] - (10.0 + 11.7 * i as f64)).abs() < 1e-9);
            assert!((p[1] - (1.0 - 0.4 * i as f64)).abs() < 1e-9);
        }
    }
}

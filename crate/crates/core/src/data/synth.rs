//! License-free synthetic stand-in for recorded highway tracks.
//!
//! Each track follows a logistic lateral lane-change profile at constant
//! longitudinal speed. The logistic time constant is tied to the intended
//! aggressiveness tier, and the most aggressive tier adds an overshoot past
//! the target lane before settling. Tier time constants are spaced so the
//! fixed-window speed-ratio clusters sit symmetrically around their class
//! mean: the mu +/- sigma labeling rule then recovers the intended tier.
//! Velocities are the analytic derivatives of the position profile.

use super::{
    ConditionLabel, Direction, Track, TrackPoint, TrackTable, VehicleClass, RAW_HZ,
};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Per-tier lateral dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TierProfile {
    /// Logistic time constant range, seconds.
    pub tau_range: (f64, f64),
    /// Overshoot amplitude past the target lane center, meters.
    pub overshoot: f64,
}

/// Synthesis parameters. Defaults produce a corpus whose tiers are
/// recoverable by the labeling rule and whose fixed windows always fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    /// Tracks per (direction, class, tier) category.
    pub per_category: usize,
    /// Lane center spacing, meters; the boundary sits at half this.
    pub lane_width: f64,
    /// Frames per track at 25 Hz.
    pub track_frames: usize,
    /// Crossing frame drawn uniformly from this inclusive range.
    pub cbt_frame_range: (u64, u64),
    /// (mean, half-spread) of car longitudinal speed, m/s.
    pub car_speed: (f64, f64),
    /// (mean, half-spread) of truck longitudinal speed, m/s.
    pub truck_speed: (f64, f64),
    /// Lateral dynamics per tier, indexed by `Aggressiveness::index`.
    pub tiers: [TierProfile; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            per_category: 100,
            lane_width: 3.5,
            track_frames: 400,
            cbt_frame_range: (180, 220),
            car_speed: (30.0, 0.3),
            truck_speed: (23.0, 0.2),
            tiers: [
                TierProfile { tau_range: (2.40, 2.56), overshoot: 0.0 },
                TierProfile { tau_range: (1.17, 1.23), overshoot: 0.0 },
                TierProfile { tau_range: (0.78, 0.82), overshoot: 0.7 },
            ],
        }
    }
}

/// What each synthesized track really is; lets tests close the loop against
/// the extraction pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub vehicle_id: u64,
    pub label: ConditionLabel,
    /// First frame on the new lane, by the same rule `detect_cbt` applies.
    pub cbt_frame: u64,
    pub tau: f64,
    pub speed: f64,
}

/// Normalized lateral shape: logistic transition plus an optional overshoot
/// bump centered two time constants after the crossing.
fn lateral_shape(u: f64, overshoot_frac: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s + overshoot_frac * (-2.0 * (u - 2.0) * (u - 2.0)).exp()
}

fn lateral_shape_deriv(u: f64, overshoot_frac: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 - s) + overshoot_frac * (-4.0 * (u - 2.0)) * (-2.0 * (u - 2.0) * (u - 2.0)).exp()
}

/// Generate raw tracks plus ground truth. Alternating vehicles are stored
/// in driving direction 2 (point-mirrored), so ingestion must canonicalize
/// before extraction, exactly as with recorded data.
pub fn synth_corpus(spec: &SynthSpec, rng: &mut SeededRng) -> Result<(TrackTable, Vec<GroundTruth>)> {
    if spec.per_category == 0 {
        return Err(Error::usage("synth_corpus", "per_category must be positive"));
    }
    if spec.track_frames < 2 {
        return Err(Error::usage("synth_corpus", "track_frames must be at least 2"));
    }
    let (lo, hi) = spec.cbt_frame_range;
    if lo > hi || hi as usize >= spec.track_frames {
        return Err(Error::usage(
            "synth_corpus",
            format!("crossing range [{lo}, {hi}] must fit inside 0..{}", spec.track_frames),
        ));
    }

    let boundary = spec.lane_width / 2.0;
    let mut tracks = Vec::with_capacity(12 * spec.per_category);
    let mut truths = Vec::with_capacity(12 * spec.per_category);
    let mut vehicle_id: u64 = 1;

    for label in ConditionLabel::all() {
        let tier = spec.tiers[label.aggressiveness.index()];
        let (speed_mean, speed_spread) = match label.class {
            VehicleClass::Car => spec.car_speed,
            VehicleClass::Truck => spec.truck_speed,
        };
        for _ in 0..spec.per_category {
            let tc_frame = lo + rng.index((hi - lo + 1) as usize) as u64;
            let tau = rng.uniform(tier.tau_range.0, tier.tau_range.1);
            let speed = speed_mean + rng.uniform(-speed_spread, speed_spread);
            let x0 = rng.uniform(0.0, 50.0);
            let overshoot_frac = tier.overshoot / spec.lane_width;
            let tc = tc_frame as f64 / RAW_HZ;

            let mut frames = Vec::with_capacity(spec.track_frames);
            let mut cbt = None;
            for i in 0..spec.track_frames {
                let t = i as f64 / RAW_HZ;
                let u = (t - tc) / tau;
                let shape = lateral_shape(u, overshoot_frac);
                let dshape = lateral_shape_deriv(u, overshoot_frac) / tau;
                let (y, vy) = match label.direction {
                    Direction::Left => (spec.lane_width * shape, spec.lane_width * dshape),
                    Direction::Right => {
                        (spec.lane_width * (1.0 - shape), -spec.lane_width * dshape)
                    }
                };
                let lane_id = if y >= boundary { 2 } else { 1 };
                if let (None, Some(prev)) = (cbt, frames.last().map(|p: &TrackPoint| p.lane_id)) {
                    if lane_id != prev {
                        cbt = Some(i as u64);
                    }
                }
                frames.push(TrackPoint {
                    frame: i as u64,
                    x: x0 + speed * t,
                    y,
                    vx: speed,
                    vy,
                    lane_id,
                });
            }
            let cbt_frame = cbt.ok_or_else(|| {
                Error::Data(format!(
                    "synthesized track {vehicle_id} never crosses the lane boundary"
                ))
            })?;

            // Odd ids drive the opposite carriageway: store the point mirror.
            let driving_direction = if vehicle_id % 2 == 0 { 1 } else { 2 };
            if driving_direction == 2 {
                for p in &mut frames {
                    p.x = -p.x;
                    p.y = -p.y;
                    p.vx = -p.vx;
                    p.vy = -p.vy;
                }
            }

            tracks.push(Track {
                id: vehicle_id,
                class: label.class,
                driving_direction,
                canonical: false,
                frames,
            });
            truths.push(GroundTruth { vehicle_id, label, cbt_frame, tau, speed });
            vehicle_id += 1;
        }
    }
    Ok((TrackTable { tracks }, truths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        canonicalize_frame, compute_speed_ratio, detect_cbt, extract_fixed_window,
        fit_speed_stats, label_aggressiveness, Aggressiveness,
    };

    fn small_spec(per_category: usize) -> SynthSpec {
        SynthSpec { per_category, ..SynthSpec::default() }
    }

    #[test]
    fn counts_match_the_spec_exactly() {
        let mut rng = SeededRng::new(5);
        let (table, truths) = synth_corpus(&small_spec(5), &mut rng).unwrap();
        assert_eq!(table.tracks.len(), 60);
        assert_eq!(truths.len(), 60);
        let mut per_cat = [0usize; 12];
        for t in &truths {
            per_cat[t.label.index()] += 1;
        }
        assert!(per_cat.iter().all(|&c| c == 5));
        // Vehicle ids are unique and aligned between tracks and truths.
        for (track, truth) in table.tracks.iter().zip(&truths) {
            assert_eq!(track.id, truth.vehicle_id);
            assert_eq!(track.frames.len(), 400);
        }
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let (a, ta) = synth_corpus(&small_spec(3), &mut SeededRng::new(9)).unwrap();
        let (b, tb) = synth_corpus(&small_spec(3), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = synth_corpus(&small_spec(3), &mut SeededRng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_spec_is_rejected() {
        let mut rng = SeededRng::new(5);
        assert!(synth_corpus(&small_spec(0), &mut rng).is_err());
        let bad = SynthSpec { cbt_frame_range: (300, 500), ..SynthSpec::default() };
        assert!(synth_corpus(&bad, &mut rng).is_err());
    }

    #[test]
    fn detect_cbt_recovers_every_ground_truth_crossing() {
        let mut rng = SeededRng::new(6);
        let (mut table, truths) = synth_corpus(&small_spec(4), &mut rng).unwrap();
        canonicalize_frame(&mut table).unwrap();
        for (track, truth) in table.tracks.iter().zip(&truths) {
            let events = detect_cbt(track).unwrap();
            assert_eq!(events.len(), 1, "vehicle {}", track.id);
            assert_eq!(events[0].frame, truth.cbt_frame);
            assert_eq!(events[0].direction, truth.label.direction);
        }
    }

    #[test]
    fn tier_ratio_clusters_are_ordered_and_recoverable() {
        let mut rng = SeededRng::new(7);
        let (mut table, truths) = synth_corpus(&small_spec(40), &mut rng).unwrap();
        canonicalize_frame(&mut table).unwrap();

        let mut ratios = Vec::new(); // (class, tier, ratio)
        for (track, truth) in table.tracks.iter().zip(&truths) {
            let traj = extract_fixed_window(track, truth.cbt_frame, 75).unwrap();
            let ratio = compute_speed_ratio(&traj).unwrap();
            ratios.push((truth.label.class, truth.label.aggressiveness, ratio));
        }

        // Tier means must be strictly ordered within each class.
        for class in [VehicleClass::Car, VehicleClass::Truck] {
            let mean_of = |tier: Aggressiveness| -> f64 {
                let vs: Vec<f64> = ratios
                    .iter()
                    .filter(|(c, a, _)| *c == class && *a == tier)
                    .map(|(_, _, r)| *r)
                    .collect();
                vs.iter().sum::<f64>() / vs.len() as f64
            };
            let (low, normal, over) = (
                mean_of(Aggressiveness::Low),
                mean_of(Aggressiveness::Normal),
                mean_of(Aggressiveness::Over),
            );
            assert!(
                low < normal && normal < over,
                "{}: tier means not ordered: {low} {normal} {over}",
                class.name()
            );
        }

        // The labeling rule recovers the intended tier for nearly all tracks.
        let samples: Vec<(VehicleClass, f64)> = ratios.iter().map(|(c, _, r)| (*c, *r)).collect();
        let stats = fit_speed_stats(&samples).unwrap();
        let mut hits = 0usize;
        for (class, tier, ratio) in &ratios {
            let labeled = label_aggressiveness(*ratio, stats.for_class(*class).unwrap());
            if labeled == *tier {
                hits += 1;
            }
        }
        let rate = hits as f64 / ratios.len() as f64;
        assert!(rate >= 0.98, "tier recovery rate {rate}");
    }
}

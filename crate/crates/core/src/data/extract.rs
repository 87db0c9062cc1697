//! Lane-change detection, window extraction, speed-ratio statistics and
//! aggressiveness labeling.

use super::{
    Aggressiveness, ConditionLabel, Corpus, Direction, ExtractionMethod, LabeledTrajectory,
    Track, TrackTable, Trajectory, VehicleClass, DOWNSAMPLE_FACTOR, RAW_HZ, STABLE_SPAN,
    STABLE_VY,
};
use crate::error::{Error, Result};

/// A detected lane-boundary crossing: the first frame holding the new lane
/// id, plus the lateral direction of the transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CbtEvent {
    pub frame: u64,
    pub direction: Direction,
}

/// A trajectory that could not be extracted; bookkeeping, not a fault.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub vehicle_id: u64,
    pub cbt_frame: u64,
    pub reason: String,
}

/// Scan one canonical track for lane-id transitions. The crossing frame is
/// the first frame with the new lane id; the direction comes from the sign
/// of the lateral displacement across the transition (+y = left).
pub fn detect_cbt(track: &Track) -> Result<Vec<CbtEvent>> {
    require_canonical(track, "detect_cbt")?;
    let mut events = Vec::new();
    for i in 1..track.frames.len() {
        let prev = &track.frames[i - 1];
        let cur = &track.frames[i];
        if cur.lane_id != prev.lane_id {
            let direction = if cur.y - prev.y > 0.0 { Direction::Left } else { Direction::Right };
            events.push(CbtEvent { frame: cur.frame, direction });
        }
    }
    Ok(events)
}

/// Cut `2 * half_window` frames centered on the crossing: `half_window`
/// before the CBT frame and `half_window` starting at it, so the crossing
/// sits at index `half_window`. Tracks that do not cover the whole window
/// are rejected.
pub fn extract_fixed_window(
    track: &Track,
    cbt_frame: u64,
    half_window: usize,
) -> std::result::Result<Trajectory, Rejection> {
    if !track.canonical {
        return Err(Rejection {
            vehicle_id: track.id,
            cbt_frame,
            reason: "track not canonicalized".into(),
        });
    }
    let start = cbt_frame as i64 - half_window as i64;
    let end = cbt_frame as i64 + half_window as i64 - 1;
    if start < track.first_frame() as i64 || end > track.last_frame() as i64 {
        return Err(Rejection {
            vehicle_id: track.id,
            cbt_frame,
            reason: format!(
                "window [{start}, {end}] exceeds track coverage [{}, {}]",
                track.first_frame(),
                track.last_frame()
            ),
        });
    }
    Ok(slice_trajectory(track, start as u64, end as u64, cbt_frame, false))
}

/// Variable-length window: walk outward from the crossing until the mean
/// |vy| over a 25-frame moving interval drops below 0.2 m/s. The start
/// anchor is the latest frame at or before the CBT whose trailing interval
/// is stable; the end anchor the earliest frame at or after it whose
/// leading interval is stable. Hitting a track edge first clamps the window
/// and sets the `clamped` flag.
pub fn extract_dynamic_window(track: &Track, cbt_frame: u64) -> Result<Trajectory> {
    require_canonical(track, "extract_dynamic_window")?;
    let first = track.first_frame();
    let last = track.last_frame();
    if track.frame_index(cbt_frame).is_none() {
        return Err(Error::usage(
            "extract_dynamic_window",
            format!("CBT frame {cbt_frame} outside track [{first}, {last}]"),
        ));
    }
    let mean_abs_vy = |from: u64, to: u64| -> f64 {
        let a = track.frame_index(from).expect("range checked") ;
        let b = track.frame_index(to).expect("range checked");
        let span = &track.frames[a..=b];
        span.iter().map(|p| p.vy.abs()).sum::<f64>() / span.len() as f64
    };

    let span = STABLE_SPAN as u64;
    let mut start = None;
    let mut f = cbt_frame;
    while f >= first + span - 1 {
        if mean_abs_vy(f - (span - 1), f) < STABLE_VY {
            start = Some(f);
            break;
        }
        if f == first + span - 1 {
            break;
        }
        f -= 1;
    }
    let mut end = None;
    let mut f = cbt_frame;
    while f + span - 1 <= last {
        if mean_abs_vy(f, f + span - 1) < STABLE_VY {
            end = Some(f);
            break;
        }
        f += 1;
    }

    let clamped = start.is_none() || end.is_none();
    let start = start.unwrap_or(first);
    let end = end.unwrap_or(last);
    Ok(slice_trajectory(track, start, end, cbt_frame, clamped))
}

fn slice_trajectory(track: &Track, start: u64, end: u64, cbt_frame: u64, clamped: bool) -> Trajectory {
    let a = track.frame_index(start).expect("caller checked coverage");
    let b = track.frame_index(end).expect("caller checked coverage");
    let span = &track.frames[a..=b];
    Trajectory {
        points: span.iter().map(|p| [p.x, p.y]).collect(),
        velocities: Some(span.iter().map(|p| [p.vx, p.vy]).collect()),
        frame_rate_hz: RAW_HZ,
        vehicle_id: track.id,
        cbt_frame,
        cbt_index: (cbt_frame - start) as usize,
        clamped,
    }
}

fn require_canonical(track: &Track, op: &'static str) -> Result<()> {
    if track.canonical {
        Ok(())
    } else {
        Err(Error::usage(op, format!("track {} is not in the canonical frame", track.id)))
    }
}

/// mean(|vy|) / mean(|vx|) over the trajectory's frames.
pub fn compute_speed_ratio(traj: &Trajectory) -> Result<f64> {
    let vel = traj.velocities.as_ref().ok_or_else(|| {
        Error::usage("compute_speed_ratio", "trajectory carries no velocities")
    })?;
    if vel.is_empty() {
        return Err(Error::usage("compute_speed_ratio", "empty trajectory"));
    }
    let n = vel.len() as f64;
    let mean_vx = vel.iter().map(|v| v[0].abs()).sum::<f64>() / n;
    let mean_vy = vel.iter().map(|v| v[1].abs()).sum::<f64>() / n;
    if mean_vx == 0.0 {
        return Err(Error::Data(format!(
            "vehicle {}: zero longitudinal motion, speed ratio undefined",
            traj.vehicle_id
        )));
    }
    Ok(mean_vy / mean_vx)
}

/// Mean and standard deviation (population) of one vehicle class's ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit statistics on an empty sample".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt(), n: values.len() })
    }
}

/// Speed-ratio statistics per vehicle class. Classes absent from the corpus
/// stay `None`; labeling a trajectory of such a class is an error.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpeedRatioStats {
    pub car: Option<MeanStd>,
    pub truck: Option<MeanStd>,
}

impl SpeedRatioStats {
    pub fn for_class(&self, class: VehicleClass) -> Result<&MeanStd> {
        let slot = match class {
            VehicleClass::Car => &self.car,
            VehicleClass::Truck => &self.truck,
        };
        slot.as_ref().ok_or_else(|| {
            Error::Data(format!("no speed-ratio statistics fitted for class {}", class.name()))
        })
    }
}

/// Fit per-class statistics from (class, ratio) pairs.
pub fn fit_speed_stats(samples: &[(VehicleClass, f64)]) -> Result<SpeedRatioStats> {
    let of = |class: VehicleClass| -> Result<Option<MeanStd>> {
        let values: Vec<f64> =
            samples.iter().filter(|(c, _)| *c == class).map(|(_, r)| *r).collect();
        if values.is_empty() {
            Ok(None)
        } else {
            Ok(Some(MeanStd::fit(&values)?))
        }
    };
    Ok(SpeedRatioStats { car: of(VehicleClass::Car)?, truck: of(VehicleClass::Truck)? })
}

/// Tier assignment: over above mu + sigma, low below mu - sigma, normal in
/// the closed band between (boundaries are strict inequalities, so exact
/// boundary values fall to normal).
pub fn label_aggressiveness(ratio: f64, stats: &MeanStd) -> Aggressiveness {
    if ratio > stats.mean + stats.std {
        Aggressiveness::Over
    } else if ratio < stats.mean - stats.std {
        Aggressiveness::Low
    } else {
        Aggressiveness::Normal
    }
}

/// Run the whole pipeline over canonical tracks: detect crossings, cut a
/// window per crossing with the chosen method, compute the speed ratio on
/// the full-rate window, downsample to the model rate, fit per-class ratio
/// statistics over everything kept, then label. Windows that cannot be cut
/// go to the rejection list, not into the corpus.
pub fn build_corpus(
    table: &TrackTable,
    method: ExtractionMethod,
) -> Result<(Corpus, Vec<Rejection>)> {
    let mut rejections = Vec::new();
    let mut kept: Vec<(VehicleClass, Direction, f64, Trajectory)> = Vec::new();
    for track in &table.tracks {
        for event in detect_cbt(track)? {
            let reject = |reason: String| Rejection {
                vehicle_id: track.id,
                cbt_frame: event.frame,
                reason,
            };
            let window = match method {
                ExtractionMethod::Fixed150 => extract_fixed_window(track, event.frame, 75),
                ExtractionMethod::Fixed300 => extract_fixed_window(track, event.frame, 150),
                ExtractionMethod::Dynamic => {
                    extract_dynamic_window(track, event.frame).map_err(|e| reject(e.to_string()))
                }
            };
            let window = match window {
                Ok(w) => w,
                Err(r) => {
                    rejections.push(r);
                    continue;
                }
            };
            let ratio = match compute_speed_ratio(&window) {
                Ok(r) => r,
                Err(e) => {
                    rejections.push(reject(e.to_string()));
                    continue;
                }
            };
            // Only the 150-frame windows feed the models and get thinned to
            // 15 points; the longer and variable windows stay at full rate.
            let traj = if method == ExtractionMethod::Fixed150 {
                match downsample(&window, DOWNSAMPLE_FACTOR) {
                    Ok(t) => t,
                    Err(e) => {
                        rejections.push(reject(e.to_string()));
                        continue;
                    }
                }
            } else {
                window
            };
            kept.push((track.class, event.direction, ratio, traj));
        }
    }

    let samples: Vec<(VehicleClass, f64)> = kept.iter().map(|(c, _, r, _)| (*c, *r)).collect();
    let stats = fit_speed_stats(&samples)?;
    let mut items = Vec::with_capacity(kept.len());
    for (i, (class, direction, ratio, trajectory)) in kept.into_iter().enumerate() {
        let aggressiveness = label_aggressiveness(ratio, stats.for_class(class)?);
        items.push(LabeledTrajectory {
            traj_id: i as u64 + 1,
            label: ConditionLabel { direction, class, aggressiveness },
            speed_ratio: ratio,
            trajectory,
        });
    }
    Ok((Corpus { method, stats, items }, rejections))
}

/// Keep every `factor`-th point starting at index 0; the 150-frame fixed
/// window becomes 15 points at 2.5 Hz.
pub fn downsample(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::usage("downsample", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(traj.clone());
    }
    if traj.points.len() < factor {
        return Err(Error::usage(
            "downsample",
            format!("{} points cannot be downsampled by {factor}", traj.points.len()),
        ));
    }
    let keep = |i: usize| i % factor == 0;
    let points: Vec<[f64; 2]> =
        traj.points.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, p)| *p).collect();
    let velocities = traj.velocities.as_ref().map(|vel| {
        vel.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, v)| *v).collect()
    });
    if points.len() < 2 {
        return Err(Error::usage(
            "downsample",
            format!("downsampling by {factor} leaves fewer than 2 points"),
        ));
    }
    Ok(Trajectory {
        points,
        velocities,
        frame_rate_hz: traj.frame_rate_hz / factor as f64,
        cbt_index: traj.cbt_index / factor,
        ..*traj
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrackPoint;
    use crate::tensor::SeededRng;

    /// Track with analytic lateral profile; lane boundary at y = 1.75.
    fn track_from(ys: Vec<f64>, vys: Vec<f64>) -> Track {
        let frames = ys
            .iter()
            .zip(&vys)
            .enumerate()
            .map(|(i, (&y, &vy))| TrackPoint {
                frame: i as u64,
                x: 30.0 * i as f64 / RAW_HZ,
                y,
                vx: 30.0,
                vy,
                lane_id: if y >= 1.75 { 2 } else { 1 },
            })
            .collect();
        Track { id: 9, class: VehicleClass::Car, driving_direction: 1, canonical: true, frames }
    }

    fn logistic_track(n: usize, tc: f64, tau: f64) -> Track {
        let mut ys = Vec::with_capacity(n);
        let mut vys = Vec::with_capacity(n);
        for i in 0..n {
            let u = (i as f64 / RAW_HZ - tc) / tau;
            let s = 1.0 / (1.0 + (-u).exp());
            ys.push(3.5 * s);
            vys.push(3.5 * s * (1.0 - s) / tau);
        }
        track_from(ys, vys)
    }

    #[test]
    fn constant_lane_yields_no_events() {
        let track = track_from(vec![0.0; 50], vec![0.0; 50]);
        assert!(detect_cbt(&track).unwrap().is_empty());
    }

    #[test]
    fn single_left_transition_is_detected_at_the_crossing_frame() {
        // y crosses 1.75 between frames 199 and 200.
        let n = 400;
        let ys: Vec<f64> = (0..n).map(|i| if i < 200 { 1.0 } else { 2.5 }).collect();
        let track = track_from(ys, vec![0.5; n]);
        let events = detect_cbt(&track).unwrap();
        assert_eq!(events, vec![CbtEvent { frame: 200, direction: Direction::Left }]);
    }

    #[test]
    fn double_change_yields_two_events_in_frame_order() {
        let n = 300;
        let ys: Vec<f64> = (0..n)
            .map(|i| match i {
                0..=99 => 1.0,
                100..=199 => 2.5,
                _ => 1.0,
            })
            .collect();
        let track = track_from(ys, vec![0.0; n]);
        let events = detect_cbt(&track).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0], CbtEvent { frame: 100, direction: Direction::Left });
        assert_eq!(events[1], CbtEvent { frame: 200, direction: Direction::Right });

        // Brute-force oracle: every adjacent pair with differing lane ids.
        let oracle: Vec<u64> = (1..track.frames.len())
            .filter(|&i| track.frames[i].lane_id != track.frames[i - 1].lane_id)
            .map(|i| track.frames[i].frame)
            .collect();
        assert_eq!(events.iter().map(|e| e.frame).collect::<Vec<_>>(), oracle);
    }

    #[test]
    fn detect_cbt_requires_canonical_tracks() {
        let mut track = track_from(vec![0.0; 30], vec![0.0; 30]);
        track.canonical = false;
        assert!(detect_cbt(&track).is_err());
    }

    #[test]
    fn fixed_window_is_centered_on_the_crossing() {
        let track = logistic_track(301, 4.0, 0.8);
        let cbt = detect_cbt(&track).unwrap()[0].frame;
        assert_eq!(cbt, 100);
        let traj = extract_fixed_window(&track, cbt, 75).unwrap();
        assert_eq!(traj.len(), 150);
        assert_eq!(traj.cbt_index, 75);
        // Frames 25..=174 map to these exact coordinates.
        assert_eq!(traj.points[0], [track.frames[25].x, track.frames[25].y]);
        assert_eq!(traj.points[149], [track.frames[174].x, track.frames[174].y]);
        assert_eq!(traj.points[75][1], track.frames[100].y);
        assert!(!traj.clamped);
        traj.validate().unwrap();
    }

    #[test]
    fn fixed_window_underflow_is_rejected_not_padded() {
        let track = logistic_track(301, 1.2, 0.8);
        let cbt = detect_cbt(&track).unwrap()[0].frame;
        assert_eq!(cbt, 30);
        let rejection = extract_fixed_window(&track, cbt, 75).unwrap_err();
        assert_eq!(rejection.vehicle_id, 9);
        assert!(rejection.reason.contains("coverage"), "{}", rejection.reason);
    }

    #[test]
    fn double_width_window_has_300_frames() {
        let track = logistic_track(500, 8.0, 0.8);
        let cbt = detect_cbt(&track).unwrap()[0].frame;
        let traj = extract_fixed_window(&track, cbt, 150).unwrap();
        assert_eq!(traj.len(), 300);
        assert_eq!(traj.cbt_index, 150);
    }

    #[test]
    fn dynamic_window_matches_exhaustive_scan_on_a_sigmoid() {
        let track = logistic_track(400, 8.0, 0.9);
        let cbt = detect_cbt(&track).unwrap()[0].frame;
        let traj = extract_dynamic_window(&track, cbt).unwrap();
        assert!(!traj.clamped);

        // Oracle: test every candidate anchor over the full track.
        let mean = |a: usize, b: usize| -> f64 {
            track.frames[a..=b].iter().map(|p| p.vy.abs()).sum::<f64>() / (b - a + 1) as f64
        };
        let c = cbt as usize;
        let start = (24..=c).rev().find(|&f| mean(f - 24, f) < STABLE_VY).unwrap();
        let end = (c..track.frames.len() - 24).find(|&f| mean(f, f + 24) < STABLE_VY).unwrap();
        assert_eq!(traj.points.len(), end - start + 1);
        assert_eq!(traj.points[0][1], track.frames[start].y);
        assert_eq!(traj.cbt_index, c - start);
        // The window must bracket the turbulent middle.
        assert!(start < c && end > c);
    }

    #[test]
    fn dynamic_window_collapses_around_an_isolated_spike() {
        let n = 200;
        let mut vys = vec![0.0; n];
        vys[100] = 10.0; // one violent frame at the crossing
        let mut ys = vec![0.0; n];
        for y in ys.iter_mut().skip(100) {
            *y = 2.5;
        }
        let track = track_from(ys, vys);
        let traj = extract_dynamic_window(&track, 100).unwrap();
        // Trailing window at 100 contains the spike (mean 0.4); at 99 it
        // does not. Leading window at 100 contains it; at 101 it does not.
        assert_eq!(traj.points.len(), 3);
        assert_eq!(traj.cbt_index, 1);
        assert!(!traj.clamped);
    }

    #[test]
    fn always_turbulent_track_clamps_to_edges_with_flag() {
        let n = 120;
        let track = track_from(vec![0.0; n], vec![1.0; n]);
        let traj = extract_dynamic_window(&track, 60).unwrap();
        assert!(traj.clamped);
        assert_eq!(traj.points.len(), n);
    }

    #[test]
    fn speed_ratio_of_pure_longitudinal_motion_is_zero() {
        let track = track_from(vec![0.0; 30], vec![0.0; 30]);
        let traj = extract_dynamic_window(&track, 15).unwrap();
        assert_eq!(compute_speed_ratio(&traj).unwrap(), 0.0);
    }

    #[test]
    fn speed_ratio_of_unit_lateral_over_25_longitudinal_is_0_04() {
        let mut traj = Trajectory {
            points: vec![[0.0, 0.0]; 10],
            velocities: Some(vec![[25.0, 1.0]; 10]),
            frame_rate_hz: RAW_HZ,
            vehicle_id: 1,
            cbt_frame: 5,
            cbt_index: 5,
            clamped: false,
        };
        assert_eq!(compute_speed_ratio(&traj).unwrap(), 0.04);
        // Signs do not matter: the means are over absolute values.
        traj.velocities = Some(vec![[-25.0, -1.0]; 10]);
        assert_eq!(compute_speed_ratio(&traj).unwrap(), 0.04);
    }

    #[test]
    fn speed_ratio_matches_per_frame_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let vel: Vec<[f64; 2]> =
            (0..40).map(|_| [rng.uniform(20.0, 35.0), rng.uniform(-2.0, 2.0)]).collect();
        let traj = Trajectory {
            points: vec![[0.0, 0.0]; 40],
            velocities: Some(vel.clone()),
            frame_rate_hz: RAW_HZ,
            vehicle_id: 1,
            cbt_frame: 0,
            cbt_index: 0,
            clamped: false,
        };
        let mut sy = 0.0;
        let mut sx = 0.0;
        for v in &vel {
            sx += v[0].abs();
            sy += v[1].abs();
        }
        assert_eq!(compute_speed_ratio(&traj).unwrap(), (sy / 40.0) / (sx / 40.0));
    }

    #[test]
    fn zero_longitudinal_motion_is_a_data_error() {
        let traj = Trajectory {
            points: vec![[0.0, 0.0]; 5],
            velocities: Some(vec![[0.0, 1.0]; 5]),
            frame_rate_hz: RAW_HZ,
            vehicle_id: 1,
            cbt_frame: 0,
            cbt_index: 0,
            clamped: false,
        };
        assert!(matches!(compute_speed_ratio(&traj), Err(Error::Data(_))));
    }

    #[test]
    fn labeling_boundaries_fall_to_normal() {
        let stats = MeanStd { mean: 0.02, std: 0.005, n: 100 };
        assert_eq!(label_aggressiveness(0.02, &stats), Aggressiveness::Normal);
        assert_eq!(label_aggressiveness(0.025, &stats), Aggressiveness::Normal);
        assert_eq!(label_aggressiveness(0.015, &stats), Aggressiveness::Normal);
        assert_eq!(label_aggressiveness(0.0250001, &stats), Aggressiveness::Over);
        assert_eq!(label_aggressiveness(0.0149999, &stats), Aggressiveness::Low);
    }

    #[test]
    fn gaussian_population_tails_label_near_one_sigma_fractions() {
        let mut rng = SeededRng::new(20447);
        let (mu, sigma) = (0.02, 0.004);
        let draws: Vec<f64> = (0..100_000).map(|_| mu + sigma * rng.normal()).collect();
        let stats = MeanStd::fit(&draws).unwrap();
        let mut counts = [0usize; 3];
        for &r in &draws {
            counts[label_aggressiveness(r, &stats).index()] += 1;
        }
        let over = counts[2] as f64 / draws.len() as f64;
        let low = counts[0] as f64 / draws.len() as f64;
        assert!((over - 0.1587).abs() < 0.02, "over tail {over}");
        assert!((low - 0.1587).abs() < 0.02, "low tail {low}");
        assert_eq!(counts.iter().sum::<usize>(), draws.len());
    }

    #[test]
    fn fit_speed_stats_separates_classes() {
        let samples = vec![
            (VehicleClass::Car, 0.01),
            (VehicleClass::Car, 0.03),
            (VehicleClass::Truck, 0.05),
        ];
        let stats = fit_speed_stats(&samples).unwrap();
        let car = stats.for_class(VehicleClass::Car).unwrap();
        assert!((car.mean - 0.02).abs() < 1e-15);
        assert!((car.std - 0.01).abs() < 1e-15);
        assert_eq!(car.n, 2);
        let truck = stats.for_class(VehicleClass::Truck).unwrap();
        assert_eq!(truck.n, 1);
        assert_eq!(truck.std, 0.0);

        let empty = fit_speed_stats(&samples[..2]).unwrap();
        assert!(empty.for_class(VehicleClass::Truck).is_err());
    }

    #[test]
    fn downsample_keeps_every_tenth_index() {
        let track = logistic_track(301, 4.0, 0.8);
        let traj = extract_fixed_window(&track, 100, 75).unwrap();
        let down = downsample(&traj, 10).unwrap();
        assert_eq!(down.len(), 15);
        assert_eq!(down.frame_rate_hz, 2.5);
        for (i, p) in down.points.iter().enumerate() {
            assert_eq!(*p, traj.points[i * 10]);
        }
        assert_eq!(down.velocities.as_ref().unwrap().len(), 15);
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let track = logistic_track(301, 4.0, 0.8);
        let traj = extract_fixed_window(&track, 100, 75).unwrap();
        assert_eq!(downsample(&traj, 1).unwrap(), traj);
    }

    #[test]
    fn build_corpus_rejects_short_tracks_and_labels_the_rest() {
        // Two crossings: one fits the fixed window, one sits too close to
        // the track start.
        let good = logistic_track(301, 4.0, 0.8);
        let mut early = logistic_track(301, 1.2, 0.8);
        early.id = 10;
        let table = TrackTable { tracks: vec![good, early] };
        let (corpus, rejections) = build_corpus(&table, ExtractionMethod::Fixed150).unwrap();
        assert_eq!(corpus.items.len(), 1);
        assert_eq!(rejections.len(), 1);
        assert_eq!(rejections[0].vehicle_id, 10);
        let item = &corpus.items[0];
        assert_eq!(item.traj_id, 1);
        assert_eq!(item.trajectory.len(), 15);
        assert_eq!(item.trajectory.frame_rate_hz, 2.5);
        assert_eq!(item.label.direction, Direction::Left);
        assert_eq!(item.label.class, VehicleClass::Car);
        // A single kept sample defines the class mean, and the boundary
        // inequalities are strict, so it labels as normal.
        assert_eq!(item.label.aggressiveness, Aggressiveness::Normal);
        // The ratio comes from the full-rate window, not the downsampled one.
        let full = extract_fixed_window(&table.tracks[0], 100, 75).unwrap();
        assert_eq!(item.speed_ratio, compute_speed_ratio(&full).unwrap());
    }

    #[test]
    fn build_corpus_dynamic_windows_scale_with_the_transition_time() {
        let fast = logistic_track(400, 8.0, 0.5);
        let mut slow = logistic_track(400, 8.0, 2.0);
        slow.id = 11;
        let table = TrackTable { tracks: vec![fast, slow] };
        let (corpus, rejections) = build_corpus(&table, ExtractionMethod::Dynamic).unwrap();
        assert!(rejections.is_empty(), "{rejections:?}");
        assert_eq!(corpus.items.len(), 2);
        assert_eq!(corpus.method, ExtractionMethod::Dynamic);
        assert!(corpus.items[0].trajectory.len() < corpus.items[1].trajectory.len());
        // Dynamic windows are not thinned; they stay at the recording rate,
        // and so do the long fixed windows.
        assert_eq!(corpus.items[0].trajectory.frame_rate_hz, RAW_HZ);
        let (corpus300, rej300) = build_corpus(&table, ExtractionMethod::Fixed300).unwrap();
        assert!(rej300.is_empty(), "{rej300:?}");
        assert_eq!(corpus300.items[0].trajectory.len(), 300);
        assert_eq!(corpus300.items[0].trajectory.frame_rate_hz, RAW_HZ);

        let mut raw = logistic_track(301, 4.0, 0.8);
        raw.canonical = false;
        assert!(build_corpus(&TrackTable { tracks: vec![raw] }, ExtractionMethod::Dynamic).is_err());
    }

    #[test]
    fn downsample_rejects_too_short_inputs() {
        let traj = Trajectory {
            points: vec![[0.0, 0.0]; 5],
            velocities: None,
            frame_rate_hz: RAW_HZ,
            vehicle_id: 1,
            cbt_frame: 0,
            cbt_index: 0,
            clamped: false,
        };
        assert!(downsample(&traj, 10).is_err());
        assert!(downsample(&traj, 0).is_err());
        // Factor 5 keeps only index 0, below the 2-point minimum.
        assert!(downsample(&traj, 5).is_err());
        assert_eq!(downsample(&traj, 4).unwrap().len(), 2);
    }
}

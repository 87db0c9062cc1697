//! Track ingestion, lane-change extraction, labeling, delta encoding and the
//! synthetic corpus generator.
//!
//! The pipeline runs: ingest -> canonicalize -> detect_cbt -> extract window
//! -> fit speed-ratio stats -> label aggressiveness -> downsample -> delta
//! encode -> normalize. Raw tracks use road coordinates; everything after
//! `canonicalize_frame` is in the canonical frame (travel = +x, driver's
//! left = +y).

mod encode;
mod extract;
mod ingest;
mod io;
mod synth;

pub use encode::{
    fit_normalization, from_deltas, prepare_training_examples, to_deltas, DeltaTrajectory,
    NormStats, TrainingExample,
};
pub use extract::{
    build_corpus, compute_speed_ratio, detect_cbt, downsample, extract_dynamic_window,
    extract_fixed_window, fit_speed_stats, label_aggressiveness, CbtEvent, MeanStd, Rejection,
    SpeedRatioStats,
};
pub use ingest::{canonicalize_frame, ingest_tracks, write_tracks};
pub use io::{
    parse_kv, read_corpus, read_ground_truth, write_atomic, write_corpus, write_ground_truth,
    write_rejections, CORPUS_FILE, MANIFEST_FILE, REJECTIONS_FILE,
};
pub use synth::{synth_corpus, GroundTruth, SynthSpec, TierProfile};

use crate::error::{Error, Result};

/// Frames per second of the raw recordings.
pub const RAW_HZ: f64 = 25.0;

/// Lateral-velocity stability threshold for the dynamic window, m/s.
pub const STABLE_VY: f64 = 0.2;

/// Moving-interval length used by the dynamic window, frames (1 s).
pub const STABLE_SPAN: usize = 25;

/// Downsampling factor from the raw 25 Hz to the 2.5 Hz model rate.
pub const DOWNSAMPLE_FACTOR: usize = 10;

// ---- condition vocabulary ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VehicleClass {
    Car,
    Truck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggressiveness {
    Low,
    Normal,
    Over,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(Error::usage("direction", format!("unknown direction {other:?}"))),
        }
    }
}

impl VehicleClass {
    pub fn index(self) -> usize {
        match self {
            VehicleClass::Car => 0,
            VehicleClass::Truck => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "car" => Ok(VehicleClass::Car),
            "truck" => Ok(VehicleClass::Truck),
            other => Err(Error::usage("vehicle class", format!("unknown class {other:?}"))),
        }
    }
}

impl Aggressiveness {
    pub fn index(self) -> usize {
        match self {
            Aggressiveness::Low => 0,
            Aggressiveness::Normal => 1,
            Aggressiveness::Over => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggressiveness::Low => "low",
            Aggressiveness::Normal => "normal",
            Aggressiveness::Over => "over",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Aggressiveness::Low),
            "normal" => Ok(Aggressiveness::Normal),
            "over" => Ok(Aggressiveness::Over),
            other => Err(Error::usage("aggressiveness", format!("unknown tier {other:?}"))),
        }
    }
}

const DIRECTIONS: [Direction; 2] = [Direction::Left, Direction::Right];
const CLASSES: [VehicleClass; 2] = [VehicleClass::Car, VehicleClass::Truck];
const TIERS: [Aggressiveness; 3] = [Aggressiveness::Low, Aggressiveness::Normal, Aggressiveness::Over];

/// One of the 12 condition categories. `index` is stable:
/// direction * 6 + class * 3 + aggressiveness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConditionLabel {
    pub direction: Direction,
    pub class: VehicleClass,
    pub aggressiveness: Aggressiveness,
}

impl ConditionLabel {
    pub fn index(&self) -> usize {
        self.direction.index() * 6 + self.class.index() * 3 + self.aggressiveness.index()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= 12 {
            return Err(Error::usage("condition label", format!("category index {i} out of 0..12")));
        }
        Ok(ConditionLabel {
            direction: DIRECTIONS[i / 6],
            class: CLASSES[(i / 3) % 2],
            aggressiveness: TIERS[i % 3],
        })
    }

    /// Symbolic form, e.g. "car/left/normal".
    pub fn name(&self) -> String {
        format!(
            "{}/{}/{}",
            self.class.name(),
            self.direction.name(),
            self.aggressiveness.name()
        )
    }

    /// Parse either the symbolic class/direction/aggressiveness form or a
    /// bare category index.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i);
        }
        let parts: Vec<&str> = s.split('/').collect();
        let parsed = if parts.len() == 3 {
            (|| {
                Ok::<_, Error>(ConditionLabel {
                    class: VehicleClass::parse(parts[0])?,
                    direction: Direction::parse(parts[1])?,
                    aggressiveness: Aggressiveness::parse(parts[2])?,
                })
            })()
        } else {
            Err(Error::usage("condition label", "expected class/direction/aggressiveness"))
        };
        parsed.map_err(|_| {
            let valid: Vec<String> = Self::all().map(|l| l.name()).collect();
            Error::usage(
                "condition label",
                format!("unknown category {s:?}; valid: {}", valid.join(", ")),
            )
        })
    }

    /// All 12 categories in index order.
    pub fn all() -> impl Iterator<Item = ConditionLabel> {
        (0..12).map(|i| ConditionLabel::from_index(i).expect("index in range"))
    }
}

// ---- raw tracks ----------------------------------------------------------------

/// One frame of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane_id: i64,
}

/// All frames of one vehicle, frame-sorted and contiguous at 25 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub class: VehicleClass,
    pub driving_direction: u8,
    pub canonical: bool,
    pub frames: Vec<TrackPoint>,
}

impl Track {
    pub fn first_frame(&self) -> u64 {
        self.frames.first().map(|p| p.frame).unwrap_or(0)
    }

    pub fn last_frame(&self) -> u64 {
        self.frames.last().map(|p| p.frame).unwrap_or(0)
    }

    /// Index of an absolute frame number inside `frames`, if covered.
    pub fn frame_index(&self, frame: u64) -> Option<usize> {
        if self.frames.is_empty() || frame < self.first_frame() || frame > self.last_frame() {
            None
        } else {
            Some((frame - self.first_frame()) as usize)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackTable {
    pub tracks: Vec<Track>,
}

// ---- extracted trajectories ------------------------------------------------------

/// A lane-change trajectory in the canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
    /// Per-point (vx, vy); present when extracted from tracks, absent on
    /// generated trajectories.
    pub velocities: Option<Vec<[f64; 2]>>,
    pub frame_rate_hz: f64,
    pub vehicle_id: u64,
    pub cbt_frame: u64,
    /// Index of the boundary-crossing point within `points`.
    pub cbt_index: usize,
    /// Dynamic extraction hit a track edge before lateral motion settled.
    pub clamped: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Data(format!(
                "trajectory of vehicle {} has {} points, need at least 2",
                self.vehicle_id,
                self.points.len()
            )));
        }
        if self.points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Data(format!(
                "trajectory of vehicle {} has non-finite coordinates",
                self.vehicle_id
            )));
        }
        Ok(())
    }
}

// ---- labeled corpus ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractionMethod {
    Fixed150,
    Fixed300,
    Dynamic,
}

impl ExtractionMethod {
    pub fn name(self) -> &'static str {
        match self {
            ExtractionMethod::Fixed150 => "fixed150",
            ExtractionMethod::Fixed300 => "fixed300",
            ExtractionMethod::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed150" => Ok(ExtractionMethod::Fixed150),
            "fixed300" => Ok(ExtractionMethod::Fixed300),
            "dynamic" => Ok(ExtractionMethod::Dynamic),
            other => Err(Error::usage(
                "extraction method",
                format!("unknown method {other:?}; valid: fixed150, fixed300, dynamic"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrajectory {
    pub traj_id: u64,
    pub label: ConditionLabel,
    pub speed_ratio: f64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub method: ExtractionMethod,
    pub stats: SpeedRatioStats,
    pub items: Vec<LabeledTrajectory>,
}

impl Corpus {
    /// Items belonging to one category, in corpus order.
    pub fn slice(&self, label: ConditionLabel) -> Vec<&LabeledTrajectory> {
        self.items.iter().filter(|t| t.label == label).collect()
    }
}

// ---- manifest --------------------------------------------------------------------

/// Per (direction, class) group statistics mirrored by the manifest file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    /// Counts per aggressiveness tier, indexed by `Aggressiveness::index`.
    pub tier_counts: [usize; 3],
    pub ratio_mean: f64,
    pub ratio_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub method: ExtractionMethod,
    pub total: usize,
    /// Indexed `[direction][class]`.
    pub groups: [[GroupStats; 2]; 2],
}

/// Per-group counts, tier buckets and ratio statistics.
pub fn corpus_stats(corpus: &Corpus) -> CorpusManifest {
    let mut groups = [[GroupStats::default(); 2]; 2];
    let mut sums = [[(0.0f64, 0.0f64); 2]; 2]; // (sum, sum of squares)
    for item in &corpus.items {
        let g = &mut groups[item.label.direction.index()][item.label.class.index()];
        g.count += 1;
        g.tier_counts[item.label.aggressiveness.index()] += 1;
        let s = &mut sums[item.label.direction.index()][item.label.class.index()];
        s.0 += item.speed_ratio;
        s.1 += item.speed_ratio * item.speed_ratio;
    }
    for d in 0..2 {
        for c in 0..2 {
            let g = &mut groups[d][c];
            if g.count > 0 {
                let n = g.count as f64;
                g.ratio_mean = sums[d][c].0 / n;
                g.ratio_std = (sums[d][c].1 / n - g.ratio_mean * g.ratio_mean).max(0.0).sqrt();
            }
        }
    }
    CorpusManifest {
        method: corpus.method,
        total: corpus.items.len(),
        groups,
    }
}

//! Corpus persistence: trajectory table, key=value manifest, rejection log
//! and the synthetic ground-truth sidecar. All writes are atomic
//! (temp file + rename) and float formatting round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{
    ConditionLabel, Corpus, ExtractionMethod, GroundTruth, LabeledTrajectory, MeanStd, Rejection,
    SpeedRatioStats, Trajectory,
};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REJECTIONS_FILE: &str = "rejections.csv";

/// Write via a temp file in the same directory, then rename into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::usage("write_atomic", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write `corpus.csv`, `manifest.txt` and `rejections.csv` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, rejections: &[Rejection]) -> Result<()> {
    let mut table = String::from("traj_id,category_index,point_index,x,y\n");
    for item in &corpus.items {
        for (i, p) in item.trajectory.points.iter().enumerate() {
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                item.traj_id,
                item.label.index(),
                i,
                p[0],
                p[1]
            ));
        }
    }
    write_atomic(&dir.join(CORPUS_FILE), table.as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), render_manifest(corpus, rejections.len()).as_bytes())?;
    write_rejections(&dir.join(REJECTIONS_FILE), rejections)
}

fn render_manifest(corpus: &Corpus, rejection_count: usize) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("method", corpus.method.name().into());
    kv("total", corpus.items.len().to_string());
    if let Some(first) = corpus.items.first() {
        kv("points_per_traj", first.trajectory.len().to_string());
        kv("frame_rate_hz", first.trajectory.frame_rate_hz.to_string());
    }
    kv("rejections", rejection_count.to_string());
    for (name, stats) in [("car", &corpus.stats.car), ("truck", &corpus.stats.truck)] {
        if let Some(s) = stats {
            kv(&format!("stats.{name}.mean"), s.mean.to_string());
            kv(&format!("stats.{name}.std"), s.std.to_string());
            kv(&format!("stats.{name}.n"), s.n.to_string());
        }
    }
    let manifest = super::corpus_stats(corpus);
    for d in super::DIRECTIONS {
        for c in super::CLASSES {
            let g = manifest.groups[d.index()][c.index()];
            let prefix = format!("group.{}.{}", d.name(), c.name());
            kv(&format!("{prefix}.count"), g.count.to_string());
            for tier in super::TIERS {
                kv(
                    &format!("{prefix}.{}", tier.name()),
                    g.tier_counts[tier.index()].to_string(),
                );
            }
            kv(&format!("{prefix}.ratio_mean"), g.ratio_mean.to_string());
            kv(&format!("{prefix}.ratio_std"), g.ratio_std.to_string());
        }
    }
    for item in &corpus.items {
        let p = format!("traj.{}", item.traj_id);
        kv(&format!("{p}.category"), item.label.index().to_string());
        kv(&format!("{p}.vehicle"), item.trajectory.vehicle_id.to_string());
        kv(&format!("{p}.cbt_frame"), item.trajectory.cbt_frame.to_string());
        kv(&format!("{p}.cbt_index"), item.trajectory.cbt_index.to_string());
        kv(&format!("{p}.ratio"), item.speed_ratio.to_string());
        kv(&format!("{p}.clamped"), item.trajectory.clamped.to_string());
    }
    out
}

/// Parse flat `key = value` text. Blank lines and '#' comments are skipped.
pub fn parse_kv(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{source} line {}: expected key = value, got {line:?}", i + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn kv_parse<T: FromStr>(map: &BTreeMap<String, String>, key: &str, source: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Format(format!("{source}: missing key {key:?}")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("{source}: key {key:?} has invalid value {raw:?}")))
}

/// Load a corpus written by `write_corpus`. Velocities are not persisted;
/// loaded trajectories carry the stored speed ratio instead.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest_path.display())))?;
    let source = manifest_path.display().to_string();
    let map = parse_kv(&text, &source)?;
    let method = ExtractionMethod::parse(&kv_parse::<String>(&map, "method", &source)?)?;
    let frame_rate_hz: f64 =
        if map.contains_key("frame_rate_hz") { kv_parse(&map, "frame_rate_hz", &source)? } else { 0.0 };
    let read_stats = |name: &str| -> Result<Option<MeanStd>> {
        if map.contains_key(&format!("stats.{name}.mean")) {
            Ok(Some(MeanStd {
                mean: kv_parse(&map, &format!("stats.{name}.mean"), &source)?,
                std: kv_parse(&map, &format!("stats.{name}.std"), &source)?,
                n: kv_parse(&map, &format!("stats.{name}.n"), &source)?,
            }))
        } else {
            Ok(None)
        }
    };
    let stats = SpeedRatioStats { car: read_stats("car")?, truck: read_stats("truck")? };

    let corpus_path = dir.join(CORPUS_FILE);
    let file = fs::File::open(&corpus_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", corpus_path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    // Rows arrive grouped by trajectory in corpus order.
    let mut order: Vec<u64> = Vec::new();
    let mut points: BTreeMap<u64, (usize, Vec<[f64; 2]>)> = BTreeMap::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| Error::Format(format!("{}: malformed row: {e}", corpus_path.display())))?;
        let f = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| {
                Error::Format(format!("{}: row with missing fields", corpus_path.display()))
            })
        };
        let traj_id: u64 = f(0)?.parse().map_err(|_| bad_field(&corpus_path, "traj_id"))?;
        let category: usize = f(1)?.parse().map_err(|_| bad_field(&corpus_path, "category_index"))?;
        let index: usize = f(2)?.parse().map_err(|_| bad_field(&corpus_path, "point_index"))?;
        let x: f64 = f(3)?.parse().map_err(|_| bad_field(&corpus_path, "x"))?;
        let y: f64 = f(4)?.parse().map_err(|_| bad_field(&corpus_path, "y"))?;
        let entry = points.entry(traj_id).or_insert_with(|| {
            order.push(traj_id);
            (category, Vec::new())
        });
        if entry.1.len() != index {
            return Err(Error::Format(format!(
                "{}: trajectory {traj_id} point {index} out of order",
                corpus_path.display()
            )));
        }
        entry.1.push([x, y]);
    }

    let mut items = Vec::with_capacity(order.len());
    for traj_id in order {
        let (category, pts) = points.remove(&traj_id).expect("collected above");
        let p = format!("traj.{traj_id}");
        let label = ConditionLabel::from_index(category)?;
        let trajectory = Trajectory {
            points: pts,
            velocities: None,
            frame_rate_hz,
            vehicle_id: kv_parse(&map, &format!("{p}.vehicle"), &source)?,
            cbt_frame: kv_parse(&map, &format!("{p}.cbt_frame"), &source)?,
            cbt_index: kv_parse(&map, &format!("{p}.cbt_index"), &source)?,
            clamped: kv_parse(&map, &format!("{p}.clamped"), &source)?,
        };
        let manifest_category: usize = kv_parse(&map, &format!("{p}.category"), &source)?;
        if manifest_category != category {
            return Err(Error::Format(format!(
                "{source}: trajectory {traj_id} category disagrees with corpus table"
            )));
        }
        items.push(LabeledTrajectory {
            traj_id,
            label,
            speed_ratio: kv_parse(&map, &format!("{p}.ratio"), &source)?,
            trajectory,
        });
    }
    Ok(Corpus { method, stats, items })
}

fn bad_field(path: &Path, field: &str) -> Error {
    Error::Format(format!("{}: invalid {field} value", path.display()))
}

/// Rejection log: one quoted-CSV row per rejection.
pub fn write_rejections(path: &Path, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["vehicle_id", "cbt_frame", "reason"])
        .map_err(|e| Error::Format(format!("rejection log: {e}")))?;
    for r in rejections {
        w.write_record([r.vehicle_id.to_string(), r.cbt_frame.to_string(), r.reason.clone()])
            .map_err(|e| Error::Format(format!("rejection log: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("rejection log: {e}")))?;
    write_atomic(path, &bytes)
}

/// Ground-truth sidecar for synthesized corpora.
pub fn write_ground_truth(path: &Path, truths: &[GroundTruth]) -> Result<()> {
    let mut out = String::from("vehicle_id,category_index,cbt_frame,tau,speed\n");
    for t in truths {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.vehicle_id,
            t.label.index(),
            t.cbt_frame,
            t.tau,
            t.speed
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| Error::Format(format!("{}: malformed row: {e}", path.display())))?;
        let f = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Format(format!("{}: row with missing fields", path.display())))
        };
        out.push(GroundTruth {
            vehicle_id: f(0)?.parse().map_err(|_| bad_field(path, "vehicle_id"))?,
            label: ConditionLabel::from_index(
                f(1)?.parse().map_err(|_| bad_field(path, "category_index"))?,
            )?,
            cbt_frame: f(2)?.parse().map_err(|_| bad_field(path, "cbt_frame"))?,
            tau: f(3)?.parse().map_err(|_| bad_field(path, "tau"))?,
            speed: f(4)?.parse().map_err(|_| bad_field(path, "speed"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Aggressiveness, Direction, VehicleClass};

    fn sample_corpus() -> Corpus {
        let traj = |id: u64, shift: f64| Trajectory {
            points: (0..15).map(|i| [i as f64 * 12.0 + shift, 0.1 * i as f64]).collect(),
            velocities: None,
            frame_rate_hz: 2.5,
            vehicle_id: id * 10,
            cbt_frame: 200,
            cbt_index: 7,
            clamped: id == 2,
        };
        Corpus {
            method: ExtractionMethod::Fixed150,
            stats: SpeedRatioStats {
                car: Some(MeanStd { mean: 0.0165, std: 0.005, n: 2 }),
                truck: Some(MeanStd { mean: 0.0215, std: 0.0065, n: 1 }),
            },
            items: vec![
                LabeledTrajectory {
                    traj_id: 0,
                    label: ConditionLabel::from_index(0).unwrap(),
                    speed_ratio: 0.0103,
                    trajectory: traj(1, 0.25),
                },
                LabeledTrajectory {
                    traj_id: 1,
                    label: ConditionLabel::from_index(7).unwrap(),
                    speed_ratio: 0.0221,
                    trajectory: traj(2, -3.0),
                },
                LabeledTrajectory {
                    traj_id: 2,
                    label: ConditionLabel::from_index(0).unwrap(),
                    speed_ratio: 0.0168,
                    trajectory: traj(3, 1.0 / 3.0),
                },
            ],
        }
    }

    #[test]
    fn corpus_round_trip_preserves_everything_but_velocities() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sample_corpus();
        let rejections = vec![Rejection {
            vehicle_id: 99,
            cbt_frame: 31,
            reason: "window [−44, 105] exceeds track coverage [0, 80]".into(),
        }];
        write_corpus(dir.path(), &corpus, &rejections).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn rewriting_a_corpus_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sample_corpus();
        write_corpus(dir.path(), &corpus, &[]).unwrap();
        let first = fs::read(dir.path().join(CORPUS_FILE)).unwrap();
        let first_manifest = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        write_corpus(dir.path(), &corpus, &[]).unwrap();
        assert_eq!(fs::read(dir.path().join(CORPUS_FILE)).unwrap(), first);
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first_manifest);
    }

    #[test]
    fn rejection_reasons_survive_commas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REJECTIONS_FILE);
        write_rejections(
            &path,
            &[Rejection { vehicle_id: 7, cbt_frame: 3, reason: "a, b, and c".into() }],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rec = rdr.records().next().unwrap().unwrap();
        assert_eq!(rec.get(0), Some("7"));
        assert_eq!(rec.get(2), Some("a, b, and c"));
    }

    #[test]
    fn ground_truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let truths = vec![
            GroundTruth {
                vehicle_id: 1,
                label: ConditionLabel {
                    direction: Direction::Left,
                    class: VehicleClass::Car,
                    aggressiveness: Aggressiveness::Over,
                },
                cbt_frame: 201,
                tau: 0.8125,
                speed: 30.25,
            },
            GroundTruth {
                vehicle_id: 2,
                label: ConditionLabel::from_index(9).unwrap(),
                cbt_frame: 190,
                tau: 2.5,
                speed: 22.8,
            },
        ];
        write_ground_truth(&path, &truths).unwrap();
        assert_eq!(read_ground_truth(&path).unwrap(), truths);
        assert_eq!(truths[1].label.class, VehicleClass::Truck);
    }

    #[test]
    fn manifest_group_counts_sum_to_total() {
        let corpus = sample_corpus();
        let manifest = crate::data::corpus_stats(&corpus);
        let group_sum: usize =
            manifest.groups.iter().flatten().map(|g| g.count).sum();
        assert_eq!(group_sum, manifest.total);
        for g in manifest.groups.iter().flatten() {
            assert_eq!(g.tier_counts.iter().sum::<usize>(), g.count);
        }
    }

    #[test]
    fn atomic_write_replaces_and_creates_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/deep/file.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert!(!path.with_file_name("file.txt.tmp").exists());
    }

    #[test]
    fn unparseable_manifest_lines_are_format_errors() {
        let err = parse_kv("method fixed150\n", "m").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let ok = parse_kv("# comment\n\nmethod = fixed150\n", "m").unwrap();
        assert_eq!(ok.get("method").map(String::as_str), Some("fixed150"));
    }
}

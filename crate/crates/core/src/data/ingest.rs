//! Delimited-text track reading/writing and the canonical-frame transform.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use super::{Track, TrackPoint, TrackTable, VehicleClass};
use crate::error::{Error, Result};

const COLUMNS: [&str; 9] = [
    "frame",
    "id",
    "x",
    "y",
    "xVelocity",
    "yVelocity",
    "laneId",
    "drivingDirection",
    "vehicleClass",
];

/// Read a comma-delimited track table. Rows are grouped by vehicle id and
/// frame-sorted; each vehicle's frames must be strictly increasing and
/// contiguous once sorted.
pub fn ingest_tracks(path: &Path) -> Result<TrackTable> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open track file {}: {e}", path.display())))?;
    ingest_from_reader(file, &path.display().to_string())
}

/// `ingest_tracks` over any reader; `source` names the input in diagnostics.
pub fn ingest_from_reader(reader: impl Read, source: &str) -> Result<TrackTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{source}: cannot read header: {e}")))?
        .clone();
    let mut col = [0usize; 9];
    for (i, name) in COLUMNS.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Format(format!("{source}: missing required column {name:?}")))?;
    }

    struct Partial {
        class: VehicleClass,
        direction: u8,
        rows: Vec<TrackPoint>,
    }
    let mut by_id: BTreeMap<u64, Partial> = BTreeMap::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Format(format!("{source}: malformed row: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| -> Result<&str> {
            record.get(col[i]).ok_or_else(|| {
                Error::Format(format!("{source} line {line}: missing column {:?}", COLUMNS[i]))
            })
        };
        fn parse<T: FromStr>(raw: &str, name: &str, line: u64, source: &str) -> Result<T> {
            raw.parse().map_err(|_| {
                Error::Format(format!(
                    "{source} line {line}: column {name:?}: invalid value {raw:?}"
                ))
            })
        }

        let frame: u64 = parse(get(0)?, COLUMNS[0], line, source)?;
        let id: u64 = parse(get(1)?, COLUMNS[1], line, source)?;
        let point = TrackPoint {
            frame,
            x: parse(get(2)?, COLUMNS[2], line, source)?,
            y: parse(get(3)?, COLUMNS[3], line, source)?,
            vx: parse(get(4)?, COLUMNS[4], line, source)?,
            vy: parse(get(5)?, COLUMNS[5], line, source)?,
            lane_id: parse(get(6)?, COLUMNS[6], line, source)?,
        };
        let direction: u8 = parse(get(7)?, COLUMNS[7], line, source)?;
        let class = VehicleClass::parse(get(8)?).map_err(|_| {
            Error::Format(format!(
                "{source} line {line}: column \"vehicleClass\": invalid value {:?}",
                get(8).unwrap_or("")
            ))
        })?;

        let entry = by_id.entry(id).or_insert_with(|| Partial {
            class,
            direction,
            rows: Vec::new(),
        });
        if entry.class != class || entry.direction != direction {
            return Err(Error::Data(format!(
                "{source} line {line}: vehicle {id} changes class or driving direction mid-track"
            )));
        }
        entry.rows.push(point);
    }

    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, mut partial) in by_id {
        partial.rows.sort_by_key(|p| p.frame);
        for pair in partial.rows.windows(2) {
            if pair[1].frame == pair[0].frame {
                return Err(Error::Data(format!(
                    "{source}: vehicle {id} has duplicate frame {}",
                    pair[0].frame
                )));
            }
            if pair[1].frame != pair[0].frame + 1 {
                return Err(Error::Data(format!(
                    "{source}: vehicle {id} frames not contiguous: {} then {}",
                    pair[0].frame, pair[1].frame
                )));
            }
        }
        tracks.push(Track {
            id,
            class: partial.class,
            driving_direction: partial.direction,
            canonical: false,
            frames: partial.rows,
        });
    }
    Ok(TrackTable { tracks })
}

/// Rotate every track into the canonical frame: travel along +x, driver's
/// left along +y. Direction-1 tracks already face +x; direction-2 tracks are
/// point-mirrored (x, y, vx, vy all negated). Lane ids are labels and pass
/// through. Already-canonical tracks are left untouched.
pub fn canonicalize_frame(table: &mut TrackTable) -> Result<()> {
    for track in &mut table.tracks {
        if track.canonical {
            continue;
        }
        match track.driving_direction {
            1 => {}
            2 => {
                for p in &mut track.frames {
                    p.x = -p.x;
                    p.y = -p.y;
                    p.vx = -p.vx;
                    p.vy = -p.vy;
                }
            }
            other => {
                return Err(Error::Data(format!(
                    "vehicle {}: unknown driving direction code {other}",
                    track.id
                )))
            }
        }
        track.canonical = true;
    }
    Ok(())
}

/// Write a table in the same delimited format `ingest_tracks` reads.
/// Coordinates are written with round-trip-exact float formatting.
pub fn write_tracks(path: &Path, table: &TrackTable) -> Result<()> {
    let mut out = String::new();
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for track in &table.tracks {
        for p in &track.frames {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.frame,
                track.id,
                p.x,
                p.y,
                p.vx,
                p.vy,
                p.lane_id,
                track.driving_direction,
                track.class.name()
            ));
        }
    }
    super::write_atomic(path, out.as_bytes())
}

//! Evaluation: average displacement error, two-sided coverage against a
//! dataset, within-set dispersion, simple shape statistics for condition
//! checks, and Gaussian kernel density grids for visualizing how the sample
//! distribution evolves through denoising.
//!
//! All comparisons assume origin-aligned trajectories: generated
//! trajectories start at (0, 0) by construction and dataset slices go
//! through [`align_to_origin`] first. Alignment is explicit rather than
//! baked into the metric so the metric itself stays a plain mean of
//! pointwise distances.

use crate::data::{Aggressiveness, ConditionLabel, Direction, VehicleClass};
use crate::error::{Error, Result};

/// Coverage thresholds (meters) reported by the standard evaluation.
pub const COVERAGE_THRESHOLDS: [f64; 2] = [0.5, 1.0];

/// Lower bound applied to kernel bandwidths so degenerate point sets still
/// produce a finite density.
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// How many trajectories to generate for a category of a given size.
pub fn generation_count(dataset_size: usize) -> usize {
    dataset_size.max(50)
}

// ---- displacement error ------------------------------------------------------

/// Translate a trajectory so its first point sits at the origin.
pub fn align_to_origin(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let first = points.first().copied().unwrap_or([0.0, 0.0]);
    points.iter().map(|p| [p[0] - first[0], p[1] - first[1]]).collect()
}

/// Average displacement error: mean Euclidean distance over aligned point
/// pairs. Callers compare shapes by origin-aligning both sides first.
pub fn ade(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::usage(
            "ade",
            format!("trajectories have {} and {} points", a.len(), b.len()),
        ));
    }
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let dx = pa[0] - pb[0];
        let dy = pa[1] - pb[1];
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / a.len() as f64)
}

// ---- coverage -----------------------------------------------------------------

/// Two-sided coverage at a threshold. c1: fraction of dataset trajectories
/// with a generated neighbor strictly closer than the threshold (recall —
/// are all behaviors reproduced?). c2: the same with roles swapped
/// (precision — is everything generated realistic?). Exact double loop; no
/// approximate neighbor search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub c1: f64,
    pub c2: f64,
}

pub fn coverage(
    dataset: &[Vec<[f64; 2]>],
    generated: &[Vec<[f64; 2]>],
    threshold: f64,
) -> Result<Coverage> {
    if dataset.is_empty() || generated.is_empty() {
        return Err(Error::usage(
            "coverage",
            format!("{} dataset vs {} generated trajectories", dataset.len(), generated.len()),
        ));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::usage("coverage", format!("threshold {threshold} must be positive")));
    }
    let covered = |from: &[Vec<[f64; 2]>], against: &[Vec<[f64; 2]>]| -> Result<f64> {
        let mut hits = 0usize;
        for a in from {
            for b in against {
                if ade(a, b)? < threshold {
                    hits += 1;
                    break;
                }
            }
        }
        Ok(hits as f64 / from.len() as f64)
    };
    Ok(Coverage {
        c1: covered(dataset, generated)?,
        c2: covered(generated, dataset)?,
    })
}

/// Mean pairwise displacement error inside one set: how spread out the
/// samples are. Needs at least two trajectories.
pub fn mean_pairwise_ade(set: &[Vec<[f64; 2]>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::usage(
            "mean_pairwise_ade",
            format!("need at least 2 trajectories, got {}", set.len()),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            total += ade(&set[i], &set[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

// ---- shape statistics ----------------------------------------------------------

/// Net displacement from first to last point.
pub fn net_displacement(points: &[[f64; 2]]) -> Result<[f64; 2]> {
    if points.len() < 2 {
        return Err(Error::usage(
            "net_displacement",
            format!("need at least 2 points, got {}", points.len()),
        ));
    }
    let (first, last) = (points[0], points[points.len() - 1]);
    Ok([last[0] - first[0], last[1] - first[1]])
}

/// Total lateral motion over total longitudinal motion,
/// sum |dy| / sum |dx|. The generated-sample analog of the speed ratio used
/// to label aggressiveness.
pub fn lateral_activity_ratio(points: &[[f64; 2]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::usage(
            "lateral_activity_ratio",
            format!("need at least 2 points, got {}", points.len()),
        ));
    }
    let mut lat = 0.0;
    let mut lon = 0.0;
    for pair in points.windows(2) {
        lon += (pair[1][0] - pair[0][0]).abs();
        lat += (pair[1][1] - pair[0][1]).abs();
    }
    if lon == 0.0 {
        return Err(Error::Data("trajectory has no longitudinal motion".into()));
    }
    Ok(lat / lon)
}

/// Median of a sample (mean of the middle two for even counts).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("median", "empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

// ---- coverage report ------------------------------------------------------------

/// Category ordering used by the coverage report: vehicle class outermost,
/// then direction, then aggressiveness.
pub fn report_category_order() -> Vec<ConditionLabel> {
    let mut out = Vec::with_capacity(12);
    for class in [VehicleClass::Car, VehicleClass::Truck] {
        for direction in [Direction::Left, Direction::Right] {
            for aggressiveness in
                [Aggressiveness::Low, Aggressiveness::Normal, Aggressiveness::Over]
            {
                out.push(ConditionLabel { direction, class, aggressiveness });
            }
        }
    }
    out
}

/// One report line. `coverage` is `None` for categories with no dataset
/// members (rendered as not-applicable rather than dropped).
#[derive(Clone, Debug)]
pub struct CoverageRow {
    pub method: String,
    pub label: ConditionLabel,
    pub threshold: f64,
    pub coverage: Option<Coverage>,
    pub n_dataset: usize,
    pub n_generated: usize,
}

/// Render coverage rows as a delimited table, one line per
/// method x category x threshold.
pub fn render_coverage_report(rows: &[CoverageRow]) -> String {
    let mut out = String::from(
        "method,vehicle,direction,aggressiveness,threshold_m,c1,c2,n_dataset,n_generated\n",
    );
    for r in rows {
        let (c1, c2) = match r.coverage {
            Some(c) => (c.c1.to_string(), c.c2.to_string()),
            None => ("na".to_string(), "na".to_string()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.label.class.name(),
            r.label.direction.name(),
            r.label.aggressiveness.name(),
            r.threshold,
            c1,
            c2,
            r.n_dataset,
            r.n_generated,
        ));
    }
    out
}

// ---- kernel density --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridBounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

/// Density evaluated at cell centers of a regular grid. `density` is
/// row-major over y then x: density[iy * xs.len() + ix].
#[derive(Clone, Debug)]
pub struct KdeGrid {
    pub bounds: GridBounds,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: [f64; 2],
    /// Axes whose data spread was too small, where the bandwidth floor took
    /// over; callers may want to warn.
    pub floored: [bool; 2],
}

impl KdeGrid {
    pub fn peak(&self) -> f64 {
        self.density.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Riemann sum of the density over the grid (close to the probability
    /// mass inside the bounds).
    pub fn integral(&self) -> f64 {
        if self.xs.len() < 2 || self.ys.len() < 2 {
            return 0.0;
        }
        let dx = self.xs[1] - self.xs[0];
        let dy = self.ys[1] - self.ys[0];
        self.density.iter().sum::<f64>() * dx * dy
    }
}

/// Scott's factor n^(-1/6) times the per-axis standard deviation, floored.
fn scott_bandwidth(points: &[[f64; 2]]) -> ([f64; 2], [bool; 2]) {
    let n = points.len() as f64;
    let factor = n.powf(-1.0 / 6.0);
    let mut bw = [0.0; 2];
    let mut floored = [false; 2];
    for axis in 0..2 {
        let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
        let h = factor * var.sqrt();
        if h < BANDWIDTH_FLOOR {
            bw[axis] = BANDWIDTH_FLOOR;
            floored[axis] = true;
        } else {
            bw[axis] = h;
        }
    }
    (bw, floored)
}

/// Gaussian kernel density of a 2-d point cloud on a regular grid. With no
/// explicit bounds the grid covers the data padded by four bandwidths (so
/// nearly all mass lies inside). Pass common bounds to compare grids across
/// denoising steps.
pub fn kde_grid(
    points: &[[f64; 2]],
    resolution: usize,
    bounds: Option<GridBounds>,
) -> Result<KdeGrid> {
    if points.is_empty() {
        return Err(Error::usage("kde_grid", "no points"));
    }
    if resolution < 2 {
        return Err(Error::usage(
            "kde_grid",
            format!("resolution {resolution} too small, need at least 2"),
        ));
    }
    let (bw, floored) = scott_bandwidth(points);
    let bounds = match bounds {
        Some(b) => {
            if !(b.x[0] < b.x[1] && b.y[0] < b.y[1]) {
                return Err(Error::usage(
                    "kde_grid",
                    format!("degenerate bounds x {:?} y {:?}", b.x, b.y),
                ));
            }
            b
        }
        None => {
            let mut x = [f64::INFINITY, f64::NEG_INFINITY];
            let mut y = [f64::INFINITY, f64::NEG_INFINITY];
            for p in points {
                x[0] = x[0].min(p[0]);
                x[1] = x[1].max(p[0]);
                y[0] = y[0].min(p[1]);
                y[1] = y[1].max(p[1]);
            }
            GridBounds {
                x: [x[0] - 4.0 * bw[0], x[1] + 4.0 * bw[0]],
                y: [y[0] - 4.0 * bw[1], y[1] + 4.0 * bw[1]],
            }
        }
    };
    let (w, h) = (resolution, resolution);
    let dx = (bounds.x[1] - bounds.x[0]) / w as f64;
    let dy = (bounds.y[1] - bounds.y[0]) / h as f64;
    let xs: Vec<f64> = (0..w).map(|i| bounds.x[0] + (i as f64 + 0.5) * dx).collect();
    let ys: Vec<f64> = (0..h).map(|i| bounds.y[0] + (i as f64 + 0.5) * dy).collect();
    let norm = 1.0 / (points.len() as f64 * 2.0 * std::f64::consts::PI * bw[0] * bw[1]);
    let mut density = vec![0.0; w * h];
    for p in points {
        for (iy, y) in ys.iter().enumerate() {
            let uy = (y - p[1]) / bw[1];
            let gy = (-0.5 * uy * uy).exp();
            for (ix, x) in xs.iter().enumerate() {
                let ux = (x - p[0]) / bw[0];
                density[iy * w + ix] += gy * (-0.5 * ux * ux).exp();
            }
        }
    }
    density.iter_mut().for_each(|d| *d *= norm);
    Ok(KdeGrid { bounds, xs, ys, density, bandwidth: bw, floored })
}

/// One snapshot grid as delimited text: an extents/resolution/bandwidth
/// header comment, the column header, then one line per cell. `step` is the
/// snapshot's ordinal in the requested ladder, `k` its diffusion step.
pub fn render_kde_grid(step: usize, k: usize, grid: &KdeGrid) -> String {
    let mut out = format!(
        "# x_min={} x_max={} y_min={} y_max={} resolution={} bandwidth_x={} bandwidth_y={}\n",
        grid.bounds.x[0],
        grid.bounds.x[1],
        grid.bounds.y[0],
        grid.bounds.y[1],
        grid.xs.len(),
        grid.bandwidth[0],
        grid.bandwidth[1],
    );
    out.push_str("step,k,x,y,density\n");
    let w = grid.xs.len();
    for (iy, y) in grid.ys.iter().enumerate() {
        for (ix, x) in grid.xs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", step, k, x, y, grid.density[iy * w + ix]));
        }
    }
    out
}

/// One line per point of generated trajectories, matching the corpus export
/// column layout.
pub fn render_trajectories(items: &[(usize, usize, Vec<[f64; 2]>)]) -> String {
    let mut out = String::from("traj_id,category_index,point_index,x,y\n");
    for (traj_id, category, points) in items {
        for (i, p) in points.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", traj_id, category, i, p[0], p[1]));
        }
    }
    out
}

//! One function per subcommand. Argument parsing stays in the binary; these
//! take already-typed inputs plus the effective `RunConfig`, do the work and
//! write artifacts. Every file goes through atomic writes, and each command
//! that produces artifacts drops a `<command>_config.txt` echo of the
//! configuration it ran with next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use transfusor::cvae::{sample_cvae, train_cvae, Cvae, CvaeConfig, CvaeTrainConfig};
use transfusor::data::{
    build_corpus, canonicalize_frame, corpus_stats, from_deltas, ingest_tracks, parse_kv,
    prepare_training_examples, read_corpus, synth_corpus, write_atomic, write_corpus,
    write_ground_truth, write_tracks, Aggressiveness, ConditionLabel, Corpus, DeltaTrajectory,
    Direction, NormStats, SynthSpec, VehicleClass,
};
use transfusor::diffusion::{
    sample, train_transfusor, ModelConfig, NoiseSchedule, SampleConfig, TrainConfig, Transfusor,
};
use transfusor::error::{Error, Result};
use transfusor::eval::{
    align_to_origin, coverage, generation_count, kde_grid, render_coverage_report,
    render_kde_grid, render_trajectories, report_category_order, CoverageRow,
    COVERAGE_THRESHOLDS,
};
use transfusor::tensor::SeededRng;

use crate::checkpoint::{
    corpus_fingerprint, cvae_checkpoint, cvae_from_checkpoint, load, save, transfusor_checkpoint,
    transfusor_from_checkpoint, Checkpoint, ModelKind, ScheduleParams,
};
use crate::config::RunConfig;

fn echo_config(
    out: &Path,
    cfg: &RunConfig,
    command: &str,
    extras: &[(String, String)],
) -> Result<()> {
    let path = out.join(format!("{command}_config.txt"));
    write_atomic(&path, cfg.render(command, extras).as_bytes())
}

// ---- extract / stats -------------------------------------------------------------

pub fn cmd_extract(tracks: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut table = ingest_tracks(tracks)?;
    canonicalize_frame(&mut table)?;
    let (corpus, rejections) = build_corpus(&table, cfg.method)?;
    write_corpus(out, &corpus, &rejections)?;
    echo_config(out, cfg, "extract", &[("tracks".into(), tracks.display().to_string())])?;
    println!(
        "extracted {} trajectories from {} tracks ({} windows rejected) into {}",
        corpus.items.len(),
        table.tracks.len(),
        rejections.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_stats(corpus_dir: &Path) -> Result<()> {
    let corpus = read_corpus(corpus_dir)?;
    let m = corpus_stats(&corpus);
    println!("method: {}", m.method.name());
    println!("trajectories: {}", m.total);
    println!(
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>11} {:>10}",
        "group", "count", "low", "normal", "over", "ratio_mean", "ratio_std"
    );
    for class in [VehicleClass::Car, VehicleClass::Truck] {
        for direction in [Direction::Left, Direction::Right] {
            let g = m.groups[direction.index()][class.index()];
            println!(
                "{:<12} {:>6} {:>6} {:>6} {:>6} {:>11.4} {:>10.4}",
                format!("{}/{}", class.name(), direction.name()),
                g.count,
                g.tier_counts[0],
                g.tier_counts[1],
                g.tier_counts[2],
                g.ratio_mean,
                g.ratio_std
            );
        }
    }
    Ok(())
}

// ---- train -----------------------------------------------------------------------

pub fn cmd_train(corpus_dir: &Path, kind: ModelKind, out: &Path, cfg: &RunConfig) -> Result<()> {
    let corpus = read_corpus(corpus_dir)?;
    let fingerprint = corpus_fingerprint(corpus_dir)?;
    let (examples, norm) = prepare_training_examples(&corpus)?;
    let seq_len = examples[0].deltas.len() / 2;
    echo_config(
        out,
        cfg,
        "train",
        &[
            ("corpus".into(), corpus_dir.display().to_string()),
            ("model".into(), kind.name().into()),
        ],
    )?;
    let ckpt_path = out.join(format!("{}.ckpt", kind.name()));
    let loss_path = out.join(format!("{}_loss.csv", kind.name()));
    let mut rng = SeededRng::new(cfg.seed);
    let mut log = String::from("epoch,loss\n");
    let mut save_err: Option<Error> = None;
    let every = cfg.checkpoint_every;

    let outcome: Result<Vec<f64>> = match kind {
        ModelKind::Transfusor => {
            let schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
            let sp = ScheduleParams {
                steps: cfg.steps,
                beta_start: cfg.beta_start,
                beta_end: cfg.beta_end,
            };
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                lr: cfg.learning_rate,
                p_uncond: cfg.p_uncond,
            };
            let mut model =
                Transfusor::new(ModelConfig { seq_len, ..ModelConfig::default() }, &mut rng)?;
            train_transfusor(&mut model, &schedule, &examples, &tc, &mut rng, |epoch, loss, m| {
                let _ = writeln!(log, "{},{loss}", epoch + 1);
                if every > 0 && (epoch + 1) % every == 0 && save_err.is_none() {
                    let cp = transfusor_checkpoint(m, &sp, &norm, cfg.seed, &fingerprint);
                    if let Err(e) = save(&ckpt_path, &cp) {
                        save_err = Some(e);
                    }
                }
            })
            .and_then(|losses| {
                let cp = transfusor_checkpoint(&model, &sp, &norm, cfg.seed, &fingerprint);
                save(&ckpt_path, &cp)?;
                Ok(losses)
            })
        }
        ModelKind::Cvae => {
            let tc = CvaeTrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                lr: cfg.learning_rate,
            };
            let mut model =
                Cvae::new(CvaeConfig { seq_len, ..CvaeConfig::default() }, &mut rng)?;
            train_cvae(&mut model, &examples, &tc, &mut rng, |epoch, loss, m| {
                let _ = writeln!(log, "{},{loss}", epoch + 1);
                if every > 0 && (epoch + 1) % every == 0 && save_err.is_none() {
                    let cp = cvae_checkpoint(m, &norm, cfg.seed, &fingerprint);
                    if let Err(e) = save(&ckpt_path, &cp) {
                        save_err = Some(e);
                    }
                }
            })
            .and_then(|losses| {
                save(&ckpt_path, &cvae_checkpoint(&model, &norm, cfg.seed, &fingerprint))?;
                Ok(losses)
            })
        }
    };

    // The per-epoch log is useful even when training aborted; an abort also
    // leaves the last periodic checkpoint in place rather than overwriting it.
    write_atomic(&loss_path, log.as_bytes())?;
    if let Some(e) = save_err {
        return Err(e);
    }
    let losses = outcome?;
    println!(
        "trained {} for {} epochs (final loss {:.6}); checkpoint {}",
        kind.name(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

// ---- generate --------------------------------------------------------------------

/// Denormalize a flat increment vector and integrate it from the origin.
fn rebuild(norm: &NormStats, flat: &[f64]) -> Vec<[f64; 2]> {
    let mut flat = flat.to_vec();
    norm.denormalize_flat(&mut flat);
    let increments = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    from_deltas(&DeltaTrajectory { origin: [0.0, 0.0], increments, residuals: Vec::new() })
}

fn trajectory_file(label: ConditionLabel, single: bool) -> String {
    if single {
        "trajectories.csv".into()
    } else {
        format!("trajectories_{}.csv", label.name().replace('/', "_"))
    }
}

pub fn cmd_generate(
    ckpt_path: &Path,
    category: Option<&str>,
    n: usize,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let cp = load(ckpt_path)?;
    let labels: Vec<ConditionLabel> = match category {
        Some(s) => vec![ConditionLabel::parse(s)?],
        None => ConditionLabel::all().collect(),
    };
    let single = category.is_some();
    echo_config(
        out,
        cfg,
        "generate",
        &[
            ("checkpoint".into(), ckpt_path.display().to_string()),
            ("category".into(), category.unwrap_or("all").into()),
            ("n".into(), n.to_string()),
        ],
    )?;
    let mut rng = SeededRng::new(cfg.seed);
    match cp.kind {
        ModelKind::Transfusor => {
            let (model, schedule, norm) = transfusor_from_checkpoint(&cp)?;
            let sc = SampleConfig { guidance: cfg.guidance, snapshots: Vec::new() };
            for label in &labels {
                let trajs: Vec<Vec<[f64; 2]>> = if n == 0 {
                    Vec::new()
                } else {
                    sample(&model, &schedule, Some(label.index()), n, &sc, &mut rng)?
                        .increments
                        .iter()
                        .map(|inc| rebuild(&norm, inc))
                        .collect()
                };
                write_trajectories(out, *label, single, &trajs)?;
            }
        }
        ModelKind::Cvae => {
            if cfg.guidance != 0.0 {
                return Err(Error::usage(
                    "generate",
                    "guidance only applies to the transfusor sampler",
                ));
            }
            let (model, norm) = cvae_from_checkpoint(&cp)?;
            for label in &labels {
                let trajs: Vec<Vec<[f64; 2]>> = if n == 0 {
                    Vec::new()
                } else {
                    sample_cvae(&model, label.index(), n, &mut rng)?
                        .iter()
                        .map(|inc| rebuild(&norm, inc))
                        .collect()
                };
                write_trajectories(out, *label, single, &trajs)?;
            }
        }
    }
    println!(
        "wrote {n} {} trajectories per category for {} categories into {}",
        cp.kind.name(),
        labels.len(),
        out.display()
    );
    Ok(())
}

fn write_trajectories(
    out: &Path,
    label: ConditionLabel,
    single: bool,
    trajs: &[Vec<[f64; 2]>],
) -> Result<()> {
    let items: Vec<(usize, usize, Vec<[f64; 2]>)> = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| (i + 1, label.index(), t.clone()))
        .collect();
    write_atomic(
        &out.join(trajectory_file(label, single)),
        render_trajectories(&items).as_bytes(),
    )
}

// ---- evaluate --------------------------------------------------------------------

fn check_fingerprint(cp: &Checkpoint, expected: &str, path: &Path) -> Result<()> {
    let found = cp.get("corpus_fingerprint")?;
    if found != expected {
        return Err(Error::Data(format!(
            "checkpoint {} was trained on a different corpus (fingerprint {found}, corpus has \
             {expected}); its normalization statistics do not apply to this data — evaluate \
             against the training corpus or retrain",
            path.display()
        )));
    }
    Ok(())
}

fn coverage_rows(
    method: &str,
    corpus: &Corpus,
    thresholds: &[f64],
    n_gen: Option<usize>,
    rng: &mut SeededRng,
    mut sampler: impl FnMut(ConditionLabel, usize, &mut SeededRng) -> Result<Vec<Vec<[f64; 2]>>>,
) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::new();
    for label in report_category_order() {
        let dataset: Vec<Vec<[f64; 2]>> = corpus
            .slice(label)
            .iter()
            .map(|t| align_to_origin(&t.trajectory.points))
            .collect();
        if dataset.is_empty() {
            for &threshold in thresholds {
                rows.push(CoverageRow {
                    method: method.into(),
                    label,
                    threshold,
                    coverage: None,
                    n_dataset: 0,
                    n_generated: 0,
                });
            }
            continue;
        }
        let n = n_gen.unwrap_or_else(|| generation_count(dataset.len()));
        let generated = sampler(label, n, rng)?;
        for &threshold in thresholds {
            rows.push(CoverageRow {
                method: method.into(),
                label,
                threshold,
                coverage: Some(coverage(&dataset, &generated, threshold)?),
                n_dataset: dataset.len(),
                n_generated: n,
            });
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    corpus_dir: &Path,
    transfusor_ckpt: Option<&Path>,
    cvae_ckpt: Option<&Path>,
    thresholds: Option<Vec<f64>>,
    n_gen: Option<usize>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    if transfusor_ckpt.is_none() && cvae_ckpt.is_none() {
        return Err(Error::usage(
            "evaluate",
            "need at least one checkpoint (--transfusor and/or --cvae)",
        ));
    }
    let corpus = read_corpus(corpus_dir)?;
    let fingerprint = corpus_fingerprint(corpus_dir)?;
    let thresholds = thresholds.unwrap_or_else(|| COVERAGE_THRESHOLDS.to_vec());
    let join = |ts: &[f64]| ts.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    echo_config(
        out,
        cfg,
        "evaluate",
        &[
            ("corpus".into(), corpus_dir.display().to_string()),
            (
                "transfusor".into(),
                transfusor_ckpt.map_or("-".into(), |p| p.display().to_string()),
            ),
            ("cvae".into(), cvae_ckpt.map_or("-".into(), |p| p.display().to_string())),
            ("thresholds".into(), join(&thresholds)),
            ("n_gen".into(), n_gen.map_or("auto".into(), |n| n.to_string())),
        ],
    )?;
    let mut written = Vec::new();
    if let Some(path) = transfusor_ckpt {
        let cp = load(path)?;
        check_fingerprint(&cp, &fingerprint, path)?;
        let (model, schedule, norm) = transfusor_from_checkpoint(&cp)?;
        let sc = SampleConfig { guidance: cfg.guidance, snapshots: Vec::new() };
        let mut rng = SeededRng::new(cfg.seed);
        let rows = coverage_rows(
            "transfusor",
            &corpus,
            &thresholds,
            n_gen,
            &mut rng,
            |label, n, rng| {
                Ok(sample(&model, &schedule, Some(label.index()), n, &sc, rng)?
                    .increments
                    .iter()
                    .map(|inc| rebuild(&norm, inc))
                    .collect())
            },
        )?;
        let file = out.join("coverage_transfusor.csv");
        write_atomic(&file, render_coverage_report(&rows).as_bytes())?;
        written.push(file);
    }
    if let Some(path) = cvae_ckpt {
        let cp = load(path)?;
        check_fingerprint(&cp, &fingerprint, path)?;
        let (model, norm) = cvae_from_checkpoint(&cp)?;
        let mut rng = SeededRng::new(cfg.seed);
        let rows =
            coverage_rows("cvae", &corpus, &thresholds, n_gen, &mut rng, |label, n, rng| {
                Ok(sample_cvae(&model, label.index(), n, rng)?
                    .iter()
                    .map(|inc| rebuild(&norm, inc))
                    .collect())
            })?;
        let file = out.join("coverage_cvae.csv");
        write_atomic(&file, render_coverage_report(&rows).as_bytes())?;
        written.push(file);
    }
    for file in &written {
        println!("wrote {}", file.display());
    }
    Ok(())
}

// ---- viz -------------------------------------------------------------------------

/// Six evenly spaced snapshot steps from pure noise down to the sample.
fn default_ladder(k_max: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=5).map(|i| k_max * (5 - i) / 5).collect();
    steps.dedup();
    steps
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_viz(
    ckpt_path: &Path,
    category: &str,
    steps: Option<Vec<usize>>,
    n: usize,
    resolution: usize,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let cp = load(ckpt_path)?;
    if cp.kind != ModelKind::Transfusor {
        return Err(Error::usage(
            "viz",
            "denoising snapshots need a transfusor checkpoint",
        ));
    }
    let (model, schedule, norm) = transfusor_from_checkpoint(&cp)?;
    let label = ConditionLabel::parse(category)?;
    let mut ladder = steps.unwrap_or_else(|| default_ladder(schedule.k_max()));
    ladder.sort_unstable_by(|a, b| b.cmp(a));
    ladder.dedup();
    let join = |ks: &[usize]| ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    echo_config(
        out,
        cfg,
        "viz",
        &[
            ("checkpoint".into(), ckpt_path.display().to_string()),
            ("category".into(), label.name()),
            ("viz_steps".into(), join(&ladder)),
            ("n".into(), n.to_string()),
            ("resolution".into(), resolution.to_string()),
        ],
    )?;
    let sc = SampleConfig { guidance: cfg.guidance, snapshots: ladder };
    let mut rng = SeededRng::new(cfg.seed);
    let output = sample(&model, &schedule, Some(label.index()), n, &sc, &mut rng)?;
    // One point cloud per snapshot: every point of every chain's trajectory.
    let clouds: Vec<(usize, Vec<[f64; 2]>)> = output
        .snapshots
        .iter()
        .map(|(k, chains)| {
            let mut cloud = Vec::new();
            for inc in chains {
                cloud.extend(rebuild(&norm, inc));
            }
            (*k, cloud)
        })
        .collect();
    // Shared bounds covering every step keep the grids comparable; the probe
    // grid over the pooled cloud picks them the same way a single grid would.
    let union: Vec<[f64; 2]> = clouds.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let bounds = kde_grid(&union, resolution, None)?.bounds;
    for (i, (k, cloud)) in clouds.iter().enumerate() {
        let grid = kde_grid(cloud, resolution, Some(bounds))?;
        if grid.floored.iter().any(|f| *f) {
            eprintln!(
                "warning: step {k} spread is below the bandwidth floor; density is near-degenerate"
            );
        }
        let file = out.join(format!("kde_step_{k:03}.csv"));
        write_atomic(&file, render_kde_grid(i, *k, &grid).as_bytes())?;
    }
    println!(
        "wrote {} density grids for {} into {}",
        clouds.len(),
        label.name(),
        out.display()
    );
    Ok(())
}

// ---- synth -----------------------------------------------------------------------

fn parse_spec_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::usage("synth", format!("spec {key} = {raw:?} failed to parse")))
}

fn apply_synth_spec(spec: &mut SynthSpec, map: &BTreeMap<String, String>) -> Result<()> {
    for (key, raw) in map {
        match key.as_str() {
            "per_category" => spec.per_category = parse_spec_value(key, raw)?,
            "lane_width" => spec.lane_width = parse_spec_value(key, raw)?,
            "track_frames" => spec.track_frames = parse_spec_value(key, raw)?,
            "cbt_frame_min" => spec.cbt_frame_range.0 = parse_spec_value(key, raw)?,
            "cbt_frame_max" => spec.cbt_frame_range.1 = parse_spec_value(key, raw)?,
            "car_speed_mean" => spec.car_speed.0 = parse_spec_value(key, raw)?,
            "car_speed_spread" => spec.car_speed.1 = parse_spec_value(key, raw)?,
            "truck_speed_mean" => spec.truck_speed.0 = parse_spec_value(key, raw)?,
            "truck_speed_spread" => spec.truck_speed.1 = parse_spec_value(key, raw)?,
            other => {
                let unknown = || {
                    Error::usage(
                        "synth",
                        format!(
                            "unknown spec key {other:?}; valid: per_category, lane_width, \
                             track_frames, cbt_frame_min, cbt_frame_max, car_speed_mean, \
                             car_speed_spread, truck_speed_mean, truck_speed_spread, and \
                             tier.<low|normal|over>.<tau_min|tau_max|overshoot>"
                        ),
                    )
                };
                let rest = other.strip_prefix("tier.").ok_or_else(unknown)?;
                let (tier, field) = rest.split_once('.').ok_or_else(unknown)?;
                let idx = Aggressiveness::parse(tier).map_err(|_| unknown())?.index();
                match field {
                    "tau_min" => spec.tiers[idx].tau_range.0 = parse_spec_value(key, raw)?,
                    "tau_max" => spec.tiers[idx].tau_range.1 = parse_spec_value(key, raw)?,
                    "overshoot" => spec.tiers[idx].overshoot = parse_spec_value(key, raw)?,
                    _ => return Err(unknown()),
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_synth(
    spec_path: Option<&Path>,
    per_category: Option<usize>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(path) = spec_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::usage("synth", format!("cannot open spec {}: {e}", path.display()))
        })?;
        apply_synth_spec(&mut spec, &parse_kv(&text, &path.display().to_string())?)?;
    }
    if let Some(pc) = per_category {
        spec.per_category = pc;
    }
    echo_config(
        out,
        cfg,
        "synth",
        &[
            (
                "spec".into(),
                spec_path.map_or("default".into(), |p| p.display().to_string()),
            ),
            ("per_category".into(), spec.per_category.to_string()),
        ],
    )?;
    let mut rng = SeededRng::new(cfg.seed);
    let (table, truths) = synth_corpus(&spec, &mut rng)?;
    write_tracks(&out.join("tracks.csv"), &table)?;
    write_ground_truth(&out.join("ground_truth.csv"), &truths)?;
    println!(
        "synthesized {} tracks ({} per category) into {}",
        table.tracks.len(),
        spec.per_category,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder_spans_noise_to_sample_without_repeats() {
        assert_eq!(default_ladder(100), vec![100, 80, 60, 40, 20, 0]);
        assert_eq!(default_ladder(2), vec![2, 1, 0]);
        assert_eq!(default_ladder(1), vec![1, 0]);
    }

    #[test]
    fn rebuild_denormalizes_then_integrates_from_the_origin() {
        let norm = NormStats { mean: [1.0, 2.0], std: [2.0, 4.0], degenerate: [false, false] };
        let points = rebuild(&norm, &[0.0, 0.0, 1.0, 0.5]);
        assert_eq!(points, vec![[0.0, 0.0], [1.0, 2.0], [4.0, 6.0]]);
    }

    #[test]
    fn synth_spec_keys_apply_and_unknown_keys_are_refused() {
        let mut spec = SynthSpec::default();
        let map = parse_kv(
            "per_category = 3\ntier.over.overshoot = 1.25\ncbt_frame_max = 500\n",
            "test",
        )
        .unwrap();
        apply_synth_spec(&mut spec, &map).unwrap();
        assert_eq!(spec.per_category, 3);
        assert_eq!(spec.tiers[2].overshoot, 1.25);
        assert_eq!(spec.cbt_frame_range.1, 500);

        for bad in ["per_cat = 1", "tier.mid.tau_min = 1", "tier.low.tau = 1"] {
            let map = parse_kv(bad, "test").unwrap();
            let err = apply_synth_spec(&mut spec, &map).unwrap_err().to_string();
            assert!(err.contains("tier.<low|normal|over>"), "{err}");
        }
    }

    #[test]
    fn generated_files_are_named_by_category() {
        let label = ConditionLabel::parse("truck/right/over").unwrap();
        assert_eq!(trajectory_file(label, true), "trajectories.csv");
        assert_eq!(trajectory_file(label, false), "trajectories_truck_right_over.csv");
    }
}

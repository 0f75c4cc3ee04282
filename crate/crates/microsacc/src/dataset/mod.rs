//! Labeled microsaccade dataset assembly.
//!
//! Per class: `B` base instances x `D` duration draws are rendered and
//! simulated once (left eye), calibrated for per-class event-count intervals,
//! then expanded into `R` count-resampled variants each; right-eye samples
//! are horizontal mirrors of the left-eye builds. Every sample owns a seed
//! derived from (global seed, class, instance, duration, resample), so builds
//! are deterministic and independent of worker count.

mod format;
mod manifest;

pub use format::{decode_stream, encode_stream, read_stream, write_stream};
pub use manifest::{
    hex_digest, DatasetManifest, SampleRecord, Split, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dvs::{EventStream, SimulatorConfig};
use crate::error::{Error, Result};
use crate::scene::{make_trajectory, render_sequence, ClassSpec, EyeScene, CLASS_COUNT};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Left = 0,
    Right = 1,
}

impl Eye {
    pub fn dir_name(self) -> &'static str {
        match self {
            Eye::Left => "left",
            Eye::Right => "right",
        }
    }
}

/// One ROI-cropped event sample with its label and generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub stream: EventStream,
    pub class_id: u8,
    pub eye: Eye,
    pub peak_amplitude_millideg: u32,
    pub duration_ns: u64,
    /// Event count before count-resampling (post-ROI).
    pub raw_event_count: u64,
    /// Event count after count-resampling; equals `stream.len()`.
    pub resampled_event_count: u64,
    /// Per-sample seed; also the file stem on disk.
    pub seed: u64,
}

/// Dataset assembly parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Base instances per class per eye (B).
    pub base_instances: usize,
    /// Duration draws per instance (D).
    pub durations_per_instance: usize,
    /// Count-resampled variants per simulated sequence (R).
    pub resamples_per_sequence: usize,
    /// Centered ROI as a fraction of sensor width.
    pub roi_width_ratio: f64,
    /// Centered ROI as a fraction of sensor height.
    pub roi_height_ratio: f64,
    /// Apply event-count overlap resampling.
    pub resample_counts: bool,
    /// Regeneration attempts for zero-event draws.
    pub retry_budget: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            base_instances: 4,
            durations_per_instance: 5,
            resamples_per_sequence: 5,
            roi_width_ratio: 0.55,
            roi_height_ratio: 0.5,
            resample_counts: true,
            retry_budget: 3,
        }
    }
}

impl DatasetConfig {
    pub fn full_scale() -> Self {
        DatasetConfig {
            base_instances: 500,
            ..Self::default()
        }
    }

    /// Samples per class per eye: B * D * R.
    pub fn samples_per_class(&self) -> usize {
        self.base_instances * self.durations_per_instance * self.resamples_per_sequence
    }
}

/// Centered ROI rectangle (x0, y0, width, height) for a scene.
pub fn roi_rect(scene: &EyeScene, cfg: &DatasetConfig) -> (usize, usize, usize, usize) {
    let w = (scene.width as f64 * cfg.roi_width_ratio).round() as usize;
    let h = (scene.height as f64 * cfg.roi_height_ratio).round() as usize;
    ((scene.width - w) / 2, (scene.height - h) / 2, w, h)
}

/// Crop a stream to the ROI and rebase coordinates to the ROI origin.
/// Canonical order is preserved by the uniform coordinate shift.
fn crop_to_roi(stream: &EventStream, rect: (usize, usize, usize, usize)) -> EventStream {
    let (x0, y0, w, h) = rect;
    let events = stream
        .events
        .iter()
        .filter(|e| {
            (e.x as usize) >= x0
                && (e.x as usize) < x0 + w
                && (e.y as usize) >= y0
                && (e.y as usize) < y0 + h
        })
        .map(|e| crate::dvs::Event {
            t_ns: e.t_ns,
            x: e.x - x0 as u16,
            y: e.y - y0 as u16,
            polarity: e.polarity,
        })
        .collect();
    EventStream {
        width: w as u16,
        height: h as u16,
        events,
    }
}

/// Render, simulate, and ROI-crop one sample.
///
/// Zero-event draws are regenerated from the same trajectory stream up to
/// `retry_budget` times (near-zero amplitudes of the smallest class can fall
/// below the contrast threshold everywhere). Right-eye samples are mirrors of
/// the left-eye build for the same seed.
pub fn build_sample(
    classes: &[ClassSpec],
    class_id: u8,
    eye: Eye,
    scene: &EyeScene,
    sim: &SimulatorConfig,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<LabeledSample> {
    if eye == Eye::Right {
        return mirror_sample(&build_sample(
            classes,
            class_id,
            Eye::Left,
            scene,
            sim,
            cfg,
            seed,
        )?);
    }
    let rect = roi_rect(scene, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..=cfg.retry_budget {
        let trajectory = make_trajectory(classes, class_id, &mut rng)?;
        let frames = render_sequence(scene, &trajectory)?;
        let full = crate::dvs::simulate_events(&frames, sim, seeds::mix(seed, &[u64::from(attempt)]))?;
        let stream = crop_to_roi(&full, rect);
        if stream.is_empty() {
            continue;
        }
        let count = stream.len() as u64;
        return Ok(LabeledSample {
            stream,
            class_id,
            eye: Eye::Left,
            peak_amplitude_millideg: (trajectory.peak_amplitude_deg * 1000.0).round() as u32,
            duration_ns: trajectory.duration_ns(),
            raw_event_count: count,
            resampled_event_count: count,
            seed,
        });
    }
    Err(Error::Generation {
        seed,
        msg: format!(
            "class {class_id} produced zero events in {} attempts",
            cfg.retry_budget + 1
        ),
    })
}

/// Mirror a left-eye sample horizontally: `x' = width - 1 - x`, timestamps,
/// rows, and polarities unchanged; the stream is re-canonicalized.
pub fn mirror_sample(sample: &LabeledSample) -> Result<LabeledSample> {
    if sample.eye == Eye::Right {
        return Err(Error::domain("refusing to mirror a right-eye sample"));
    }
    let w = sample.stream.width;
    let mut stream = EventStream {
        width: w,
        height: sample.stream.height,
        events: sample
            .stream
            .events
            .iter()
            .map(|e| crate::dvs::Event {
                t_ns: e.t_ns,
                x: w - 1 - e.x,
                y: e.y,
                polarity: e.polarity,
            })
            .collect(),
    };
    stream.canonical_sort();
    Ok(LabeledSample {
        stream,
        eye: Eye::Right,
        ..sample.clone()
    })
}

/// Nearest-rank quantile at `p` over unsorted counts: `sorted[round((n-1)p)]`.
fn quantile(counts: &mut Vec<u64>, p: f64) -> u64 {
    counts.sort_unstable();
    let idx = ((counts.len() - 1) as f64 * p).round() as usize;
    counts[idx]
}

/// Per-class target-count interval `[q25(c-1 U c), q75(c U c+1)]` over
/// observed raw counts; adjacent intervals overlap by construction.
pub fn target_interval_for(class_id: u8, observed: &[Vec<u64>]) -> Result<(u64, u64)> {
    let c = class_id as usize;
    if c >= observed.len() {
        return Err(Error::domain(format!("class {class_id} missing from calibration")));
    }
    if observed.iter().any(|v| v.is_empty()) {
        return Err(Error::domain("calibration statistics must cover every class"));
    }
    let mut lo_pool: Vec<u64> = observed[c].clone();
    if c > 0 {
        lo_pool.extend_from_slice(&observed[c - 1]);
    }
    let mut hi_pool: Vec<u64> = observed[c].clone();
    if c + 1 < observed.len() {
        hi_pool.extend_from_slice(&observed[c + 1]);
    }
    let lo = quantile(&mut lo_pool, 0.25).max(1);
    let hi = quantile(&mut hi_pool, 0.75).max(lo);
    Ok((lo, hi))
}

/// Draw a target event count for `class_id` from its overlap interval.
pub fn target_count_for<R: Rng>(
    class_id: u8,
    observed: &[Vec<u64>],
    rng: &mut R,
) -> Result<u64> {
    let (lo, hi) = target_interval_for(class_id, observed)?;
    Ok(if hi > lo { rng.random_range(lo..=hi) } else { lo })
}

/// Uniformly subsample the stream to `target_count` events (without
/// replacement); a target at or above the current count leaves the sample
/// unchanged. Surviving events keep their timestamps and coordinates.
pub fn resample_counts<R: Rng>(
    sample: &LabeledSample,
    target_count: u64,
    rng: &mut R,
) -> Result<LabeledSample> {
    if target_count < 1 {
        return Err(Error::domain("target count must be >= 1"));
    }
    let n = sample.stream.len() as u64;
    if target_count >= n {
        return Ok(sample.clone());
    }
    let mut idx: Vec<usize> =
        rand::seq::index::sample(rng, n as usize, target_count as usize).into_vec();
    idx.sort_unstable();
    let events = idx.iter().map(|&i| sample.stream.events[i]).collect();
    Ok(LabeledSample {
        stream: EventStream {
            width: sample.stream.width,
            height: sample.stream.height,
            events,
        },
        resampled_event_count: target_count,
        ..sample.clone()
    })
}

fn sample_rel_path(eye: Eye, class_id: u8, seed: u64) -> String {
    format!("{}/{}/{seed:016x}.evms", eye.dir_name(), class_id)
}

/// Build the full dataset under `out_dir` and return its manifest (also
/// written to `out_dir/manifest.json`, last, as the completion marker).
///
/// Deterministic for fixed seed regardless of `workers` (0 = rayon default).
pub fn build_dataset(
    classes: &[ClassSpec],
    scene: &EyeScene,
    sim: &SimulatorConfig,
    cfg: &DatasetConfig,
    out_dir: &Path,
    workers: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    crate::scene::validate_class_table(classes)?;
    scene.validate()?;
    sim.validate()?;
    if cfg.base_instances == 0 || cfg.durations_per_instance == 0 || cfg.resamples_per_sequence == 0
    {
        return Err(Error::domain("B, D, R must all be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;

    // Phase 1: render + simulate the B*D left-eye raw sequences per class.
    let jobs: Vec<(u8, usize, usize)> = (0..classes.len() as u8)
        .flat_map(|c| {
            (0..cfg.base_instances).flat_map(move |b| {
                (0..cfg.durations_per_instance).map(move |d| (c, b, d))
            })
        })
        .collect();
    let raw: Vec<((u8, usize, usize), LabeledSample)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, b, d)| {
                let job_seed = seeds::mix(seed, &[1, u64::from(c), b as u64, d as u64]);
                build_sample(classes, c, Eye::Left, scene, sim, cfg, job_seed)
                    .map(|s| ((c, b, d), s))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Phase 2: per-class raw-count calibration.
    let mut observed: Vec<Vec<u64>> = vec![Vec::new(); classes.len()];
    for ((c, _, _), s) in &raw {
        observed[*c as usize].push(s.raw_event_count);
    }

    // Phase 3: expand each sequence into R count-resampled variants plus
    // their right-eye mirrors, and write sample files.
    struct Keyed {
        key: (u8, usize, usize, usize, u8),
        record: SampleRecord,
    }
    let expanded: Vec<Keyed> = pool.install(|| {
        raw.par_iter()
            .flat_map_iter(|((c, b, d), raw_sample)| {
                (0..cfg.resamples_per_sequence).map(move |r| (*c, *b, *d, r, raw_sample))
            })
            .map(|(c, b, d, r, raw_sample)| {
                let sub_seed =
                    seeds::mix(seed, &[2, u64::from(c), b as u64, d as u64, r as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                let mut left = if cfg.resample_counts {
                    let target = target_count_for(c, &observed, &mut rng)?;
                    resample_counts(raw_sample, target, &mut rng)?
                } else {
                    raw_sample.clone()
                };
                left.seed = sub_seed;
                let right = mirror_sample(&left)?;
                let mut out = Vec::with_capacity(2);
                for s in [&left, &right] {
                    let rel = sample_rel_path(s.eye, s.class_id, s.seed);
                    let path = out_dir.join(&rel);
                    let bytes = encode_stream(s)?;
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                    out.push(Keyed {
                        key: (c, b, d, r, s.eye as u8),
                        record: SampleRecord {
                            path: rel,
                            class_id: s.class_id,
                            eye: s.eye,
                            peak_amplitude_millideg: s.peak_amplitude_millideg,
                            duration_ns: s.duration_ns,
                            raw_event_count: s.raw_event_count,
                            resampled_event_count: s.resampled_event_count,
                            seed: s.seed,
                            digest: hex_digest(&bytes),
                            split: Split::Unassigned,
                        },
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<Vec<Keyed>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let mut expanded = expanded;
    expanded.sort_by_key(|k| (k.key.4, k.key.0, k.key.1, k.key.2, k.key.3));
    let rect = roi_rect(scene, cfg);
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        sensor_width: scene.width as u16,
        sensor_height: scene.height as u16,
        roi_width: rect.2 as u16,
        roi_height: rect.3 as u16,
        roi_x0: rect.0 as u16,
        roi_y0: rect.1 as u16,
        classes: classes.to_vec(),
        resample_enabled: cfg.resample_counts,
        global_seed: seed,
        base_instances: cfg.base_instances,
        durations_per_instance: cfg.durations_per_instance,
        resamples_per_sequence: cfg.resamples_per_sequence,
        records: expanded.into_iter().map(|k| k.record).collect(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Assign stratified train/val/test splits in place.
///
/// Per (class, eye) cell: `test_count / (classes * eyes)` samples go to test,
/// `floor(val_fraction * cell_size)` to validation, the rest to train.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    val_fraction: f64,
    test_count: usize,
    seed: u64,
) -> Result<()> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::domain("val_fraction must lie in [0, 1)"));
    }
    let cells = CLASS_COUNT * 2;
    if test_count % cells != 0 {
        return Err(Error::domain(format!(
            "test count {test_count} not divisible by {cells} (class, eye) cells"
        )));
    }
    let test_per_cell = test_count / cells;
    for class_id in 0..CLASS_COUNT as u8 {
        for eye in [Eye::Left, Eye::Right] {
            let mut idx: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.class_id == class_id && r.eye == eye)
                .map(|(i, _)| i)
                .collect();
            let val_per_cell = (val_fraction * idx.len() as f64).floor() as usize;
            if idx.len() < test_per_cell + val_per_cell {
                return Err(Error::domain(format!(
                    "cell (class {class_id}, {:?}) has {} samples, needs {}",
                    eye,
                    idx.len(),
                    test_per_cell + val_per_cell
                )));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::mix(seed, &[3, u64::from(class_id), eye as u64]));
            // Fisher-Yates with the cell's own stream.
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            for (k, &i) in idx.iter().enumerate() {
                manifest.records[i].split = if k < test_per_cell {
                    Split::Test
                } else if k < test_per_cell + val_per_cell {
                    Split::Val
                } else {
                    Split::Train
                };
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dvs::{Event, Polarity};

    fn tiny_scene() -> EyeScene {
        EyeScene {
            width: 60,
            height: 44,
            supersampling: 2,
            ..EyeScene::desk()
        }
    }

    fn no_noise_sim() -> SimulatorConfig {
        SimulatorConfig {
            threshold_mismatch_sigma: 0.0,
            noise_rate_hz: 0.0,
            ..SimulatorConfig::default()
        }
    }

    fn synthetic_sample(n: usize) -> LabeledSample {
        let mut stream = EventStream::new(440, 300);
        stream.events = (0..n)
            .map(|i| Event {
                t_ns: (i * 997) as u64,
                x: (i % 440) as u16,
                y: (i % 300) as u16,
                polarity: if i % 2 == 0 { Polarity::Pos } else { Polarity::Neg },
            })
            .collect();
        stream.canonical_sort();
        LabeledSample {
            stream,
            class_id: 2,
            eye: Eye::Left,
            peak_amplitude_millideg: 1000,
            duration_ns: 1_000_000,
            raw_event_count: n as u64,
            resampled_event_count: n as u64,
            seed: 7,
        }
    }

    #[test]
    fn roi_ratios_match_published_geometry() {
        let cfg = DatasetConfig::default();
        let full = EyeScene::full_scale();
        assert_eq!(roi_rect(&full, &cfg), (180, 150, 440, 300));
        let desk = EyeScene::desk();
        assert_eq!(roi_rect(&desk, &cfg), (45, 37, 110, 75));
    }

    #[test]
    fn mirror_maps_x_and_is_involutive() {
        let s = synthetic_sample(50);
        let m = mirror_sample(&s).unwrap();
        assert_eq!(m.eye, Eye::Right);
        assert_eq!(m.stream.len(), s.stream.len());
        // x = 10 in a 440-wide ROI lands at 429.
        let src = s.stream.events.iter().find(|e| e.x == 10).unwrap();
        assert!(m
            .stream
            .events
            .iter()
            .any(|e| e.x == 429 && e.t_ns == src.t_ns && e.y == src.y));
        assert!(mirror_sample(&m).is_err(), "no double flips");
        // Involution on the event multiset via a manual un-flip.
        let mut back = m.clone();
        back.eye = Eye::Left;
        let back = mirror_sample(&back).unwrap();
        assert_eq!(back.stream.events, s.stream.events);
    }

    #[test]
    fn resample_identity_and_sortedness() {
        let s = synthetic_sample(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = resample_counts(&s, 100, &mut rng).unwrap();
        assert_eq!(same.stream, s.stream);
        let bigger = resample_counts(&s, 10_000, &mut rng).unwrap();
        assert_eq!(bigger.stream, s.stream);
        let sub = resample_counts(&s, 37, &mut rng).unwrap();
        assert_eq!(sub.stream.len(), 37);
        assert_eq!(sub.resampled_event_count, 37);
        assert_eq!(sub.raw_event_count, 100);
        assert!(sub.stream.is_canonically_sorted());
        assert!(resample_counts(&s, 0, &mut rng).is_err());
    }

    #[test]
    fn single_survivor_is_uniform() {
        let s = synthetic_sample(20);
        let trials = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = vec![0u32; 20];
        for _ in 0..trials {
            let one = resample_counts(&s, 1, &mut rng).unwrap();
            let survivor = one.stream.events[0];
            let idx = s
                .stream
                .events
                .iter()
                .position(|e| e == &survivor)
                .unwrap();
            hits[idx] += 1;
        }
        let p = 1.0 / 20.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let expected = trials as f64 * p;
        for (i, &h) in hits.iter().enumerate() {
            assert!(
                (f64::from(h) - expected).abs() <= 3.0 * sigma,
                "event {i} hit {h} times (expected {expected:.0} +/- {:.0})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn target_intervals_overlap_adjacent_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Increasing counts by class with spread.
        let observed: Vec<Vec<u64>> = (0..7)
            .map(|c| {
                (0..100)
                    .map(|_| rng.random_range(100 + 200 * c..300 + 200 * c) as u64)
                    .collect()
            })
            .collect();
        let intervals: Vec<(u64, u64)> = (0..7u8)
            .map(|c| target_interval_for(c, &observed).unwrap())
            .collect();
        for pair in intervals.windows(2) {
            assert!(
                pair[0].1 >= pair[1].0,
                "intervals {:?} and {:?} must intersect",
                pair[0],
                pair[1]
            );
        }
        // Degenerate calibration: all counts equal N.
        let degenerate: Vec<Vec<u64>> = (0..7).map(|_| vec![500; 10]).collect();
        assert_eq!(target_count_for(3, &degenerate, &mut rng).unwrap(), 500);
        // Missing class data is a domain error.
        let mut empty = degenerate.clone();
        empty[6].clear();
        assert!(target_count_for(3, &empty, &mut rng).is_err());
    }

    #[test]
    fn build_sample_is_deterministic_and_cropped() {
        let classes = crate::scene::class_table();
        let scene = tiny_scene();
        let cfg = DatasetConfig::default();
        let a = build_sample(&classes, 6, Eye::Left, &scene, &no_noise_sim(), &cfg, 42).unwrap();
        let b = build_sample(&classes, 6, Eye::Left, &scene, &no_noise_sim(), &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert!(!a.stream.is_empty());
        let (_, _, w, h) = roi_rect(&scene, &cfg);
        assert_eq!((a.stream.width as usize, a.stream.height as usize), (w, h));
        a.stream.validate_bounds().unwrap();
        assert_eq!(encode_stream(&a).unwrap(), encode_stream(&b).unwrap());
    }

    #[test]
    fn right_eye_build_mirrors_left() {
        let classes = crate::scene::class_table();
        let scene = tiny_scene();
        let cfg = DatasetConfig::default();
        let left = build_sample(&classes, 4, Eye::Left, &scene, &no_noise_sim(), &cfg, 9).unwrap();
        let right = build_sample(&classes, 4, Eye::Right, &scene, &no_noise_sim(), &cfg, 9).unwrap();
        assert_eq!(right, mirror_sample(&left).unwrap());
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let mut records = Vec::new();
        for class_id in 0..7u8 {
            for eye in [Eye::Left, Eye::Right] {
                for k in 0..100usize {
                    records.push(SampleRecord {
                        path: format!("{}/{}/{k}.evms", eye.dir_name(), class_id),
                        class_id,
                        eye,
                        peak_amplitude_millideg: 0,
                        duration_ns: 0,
                        raw_event_count: 10,
                        resampled_event_count: 10,
                        seed: k as u64,
                        digest: String::new(),
                        split: Split::Unassigned,
                    });
                }
            }
        }
        let mut manifest = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            sensor_width: 200,
            sensor_height: 150,
            roi_width: 110,
            roi_height: 75,
            roi_x0: 45,
            roi_y0: 37,
            classes: crate::scene::class_table(),
            resample_enabled: true,
            global_seed: 0,
            base_instances: 4,
            durations_per_instance: 5,
            resamples_per_sequence: 5,
            records,
        };
        split_dataset(&mut manifest, 0.2, 140, 7).unwrap();
        for eye in [Eye::Left, Eye::Right] {
            let val = manifest.records_for(eye, Split::Val).count();
            let test = manifest.records_for(eye, Split::Test).count();
            let train = manifest.records_for(eye, Split::Train).count();
            assert_eq!(val, 140);
            assert_eq!(test, 70);
            assert_eq!(train, 490);
        }
        // Balance within each split.
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut per_cell = std::collections::HashMap::new();
            for r in manifest.records.iter().filter(|r| r.split == split) {
                *per_cell.entry((r.class_id, r.eye)).or_insert(0usize) += 1;
            }
            let counts: Vec<usize> = per_cell.values().copied().collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{split:?} unbalanced");
        }
        assert!(split_dataset(&mut manifest, 0.2, 100, 7).is_err());
    }
}

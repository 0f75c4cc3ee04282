//! Frame-to-event conversion emulating a dynamic vision sensor.
//!
//! Per pixel, a log-intensity memory is compared against the linearly
//! interpolated log signal between consecutive frames; every departure of at
//! least one (mismatch-perturbed) contrast threshold emits an event at the
//! interpolated crossing time and advances the memory by exactly one
//! threshold step. A refractory period suppresses events until it elapses,
//! and optional shot noise is appended as a per-pixel Poisson process with
//! balanced polarity.
//!
//! All randomness is drawn from per-pixel streams seeded from (seed, pixel),
//! so output is a deterministic function of (frames, config, seed) regardless
//! of parallelism. [`reference::brute_force_reference`] is the direct scalar
//! implementation used as the testing oracle; both must produce identical
//! event sequences.

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::FrameSequence;
use crate::seeds;

/// Event polarity; encoded 0 = brightness decrease, 1 = increase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Neg = 0,
    Pos = 1,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Neg => -1,
            Polarity::Pos => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Polarity::Neg),
            1 => Some(Polarity::Pos),
            _ => None,
        }
    }
}

/// One DVS event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_ns: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    /// Total order: (t, y, x, polarity).
    pub fn canonical_key(&self) -> (u64, u16, u16, Polarity) {
        (self.t_ns, self.y, self.x, self.polarity)
    }
}

/// A sensor-sized stream of events in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sort into the canonical (t, y, x, polarity) order.
    pub fn canonical_sort(&mut self) {
        self.events.sort_unstable_by_key(Event::canonical_key);
    }

    pub fn is_canonically_sorted(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| w[0].canonical_key() <= w[1].canonical_key())
    }

    /// Check that all coordinates fall inside the sensor.
    pub fn validate_bounds(&self) -> Result<()> {
        for e in &self.events {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::domain(format!(
                    "event at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// DVS model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    /// Log-intensity threshold for ON (brightening) events.
    pub theta_on: f64,
    /// Log-intensity threshold for OFF (darkening) events.
    pub theta_off: f64,
    /// Relative std-dev of per-pixel threshold mismatch (0 disables).
    pub threshold_mismatch_sigma: f64,
    /// Minimum spacing between events at one pixel.
    pub refractory_ns: u64,
    /// Shot-noise rate, events per pixel per second (0 disables).
    pub noise_rate_hz: f64,
    /// Intensity floor inside the log: L = ln(I + log_eps).
    pub log_eps: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            theta_on: 0.2,
            theta_off: 0.2,
            threshold_mismatch_sigma: 0.03,
            refractory_ns: 1_000,
            noise_rate_hz: 0.0,
            log_eps: 0.02,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_on <= 0.0 || self.theta_off <= 0.0 {
            return Err(Error::domain("contrast thresholds must be positive"));
        }
        if self.threshold_mismatch_sigma < 0.0 || self.noise_rate_hz < 0.0 {
            return Err(Error::domain("mismatch sigma and noise rate must be >= 0"));
        }
        if self.log_eps <= 0.0 {
            return Err(Error::domain("log_eps must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel RNG stream; pixel index is mixed into the stream seed.
fn pixel_rng(seed: u64, pixel_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::mix(seed, &[0x70_69_78, pixel_index]))
}

/// Validate sequence preconditions shared by both simulator implementations.
fn check_frames(frames: &FrameSequence) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::domain("need at least 2 frames to simulate events"));
    }
    if frames.timestamps_ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("frame timestamps must be strictly increasing"));
    }
    for f in &frames.frames {
        if f.dim() != frames.frames[0].dim() {
            return Err(Error::domain("all frames must share one shape"));
        }
        if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("frame intensities must lie in [0, 1]"));
        }
    }
    Ok(())
}

/// First time in `[t_a, t_b]` at which the linear signal from `(t_a, l_a)` to
/// `(t_b, l_b)` satisfies `l >= target` (`upward`) or `l <= target`. The
/// returned time is clamped into the segment so endpoint crossings stay
/// representable despite rounding.
fn first_reach(t_a: f64, t_b: f64, l_a: f64, l_b: f64, target: f64, upward: bool) -> Option<f64> {
    let cross = |t: f64| t.clamp(t_a, t_b);
    if upward {
        if l_a >= target {
            Some(t_a)
        } else if l_b >= target && l_b > l_a {
            Some(cross(t_a + (t_b - t_a) * ((target - l_a) / (l_b - l_a))))
        } else {
            None
        }
    } else if l_a <= target {
        Some(t_a)
    } else if l_b <= target && l_b < l_a {
        Some(cross(t_a + (t_b - t_a) * ((target - l_a) / (l_b - l_a))))
    } else {
        None
    }
}

/// Walk one pixel's log signal across all frame segments, emitting threshold
/// crossings.
///
/// The reference level is represented as `l0 + p*theta_on - n*theta_off` with
/// integer step counters rather than a mutated float, so no rounding error
/// accumulates across events; in particular a sequence returning exactly to
/// its first frame sees its final crossing target equal `l0` bit-exactly when
/// the thresholds match.
struct PixelWalker {
    th_on: f64,
    th_off: f64,
    refractory: f64,
    l0: f64,
    pos_steps: i64,
    neg_steps: i64,
    last_event_t: f64,
}

impl PixelWalker {
    fn new(th_on: f64, th_off: f64, refractory_ns: u64, l0: f64) -> Self {
        PixelWalker {
            th_on,
            th_off,
            refractory: refractory_ns as f64,
            l0,
            pos_steps: 0,
            neg_steps: 0,
            last_event_t: f64::NEG_INFINITY,
        }
    }

    fn offset(&self, pos: i64, neg: i64) -> f64 {
        if self.th_on == self.th_off {
            (pos - neg) as f64 * self.th_on
        } else {
            pos as f64 * self.th_on - neg as f64 * self.th_off
        }
    }

    /// Process one linear segment, appending (time_ns, polarity) events.
    fn segment(&mut self, t_a: f64, t_b: f64, l_a: f64, l_b: f64, out: &mut Vec<(f64, Polarity)>) {
        loop {
            let allowed = self.last_event_t + self.refractory;
            let up_target = self.l0 + self.offset(self.pos_steps + 1, self.neg_steps);
            let dn_target = self.l0 + self.offset(self.pos_steps, self.neg_steps + 1);
            let lin = |t: f64| l_a + (l_b - l_a) * ((t - t_a) / (t_b - t_a));

            // A crossing is valid as computed; only a refractory-delayed
            // emission must re-check that the signal is still past the target.
            let up = first_reach(t_a, t_b, l_a, l_b, up_target, true).and_then(|tc| {
                let t = tc.max(allowed);
                if t > t_b {
                    None
                } else if t > tc && lin(t) < up_target {
                    None
                } else {
                    Some(t)
                }
            });
            let dn = first_reach(t_a, t_b, l_a, l_b, dn_target, false).and_then(|tc| {
                let t = tc.max(allowed);
                if t > t_b {
                    None
                } else if t > tc && lin(t) > dn_target {
                    None
                } else {
                    Some(t)
                }
            });

            let (t_emit, pol) = match (up, dn) {
                (Some(u), Some(d)) if u <= d => (u, Polarity::Pos),
                (Some(_), Some(d)) => (d, Polarity::Neg),
                (Some(u), None) => (u, Polarity::Pos),
                (None, Some(d)) => (d, Polarity::Neg),
                (None, None) => break,
            };
            match pol {
                Polarity::Pos => self.pos_steps += 1,
                Polarity::Neg => self.neg_steps += 1,
            }
            self.last_event_t = t_emit;
            out.push((t_emit, pol));
        }
    }
}

/// Simulate one pixel (threshold walk plus noise), pushing events into `out`.
///
/// RNG draw order per pixel: ON mismatch, OFF mismatch (when sigma > 0), then
/// alternating (gap, polarity) noise draws (when noise is enabled).
fn simulate_pixel(
    x: u16,
    y: u16,
    trace: impl Iterator<Item = f64>,
    timestamps: &[f64],
    config: &SimulatorConfig,
    rng: Option<&mut ChaCha8Rng>,
    skip_walk: bool,
    out: &mut Vec<Event>,
) {
    let mut th_on = config.theta_on;
    let mut th_off = config.theta_off;
    let mut rng = rng;
    if config.threshold_mismatch_sigma > 0.0 {
        let rng = rng.as_deref_mut().expect("rng required when sigma > 0");
        let z_on: f64 = StandardNormal.sample(rng);
        let z_off: f64 = StandardNormal.sample(rng);
        th_on *= (1.0 + config.threshold_mismatch_sigma * z_on).max(0.01);
        th_off *= (1.0 + config.threshold_mismatch_sigma * z_off).max(0.01);
    }

    if !skip_walk {
        let mut log_trace = trace.map(|i| (i + config.log_eps).ln());
        let l0 = log_trace.next().expect("at least one frame");
        let mut walker = PixelWalker::new(th_on, th_off, config.refractory_ns, l0);
        let mut crossings: Vec<(f64, Polarity)> = Vec::new();
        let mut l_prev = l0;
        for (seg, l_cur) in log_trace.enumerate() {
            walker.segment(
                timestamps[seg],
                timestamps[seg + 1],
                l_prev,
                l_cur,
                &mut crossings,
            );
            l_prev = l_cur;
        }
        out.extend(crossings.into_iter().map(|(t, polarity)| Event {
            t_ns: t.round() as u64,
            x,
            y,
            polarity,
        }));
    }

    if config.noise_rate_hz > 0.0 {
        let rng = rng.as_deref_mut().expect("rng required when noise > 0");
        let rate_per_ns = config.noise_rate_hz * 1e-9;
        let t_end = *timestamps.last().expect("nonempty timestamps");
        let mut t = timestamps[0];
        loop {
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / rate_per_ns;
            if t > t_end {
                break;
            }
            let polarity = if rng.random_bool(0.5) {
                Polarity::Pos
            } else {
                Polarity::Neg
            };
            out.push(Event {
                t_ns: t.round() as u64,
                x,
                y,
                polarity,
            });
        }
    }
}

/// Convert a frame sequence into an event stream.
///
/// Rows are processed in parallel; unchanged pixels are skipped when that
/// cannot be observed in the output. The result is identical to
/// [`reference::brute_force_reference`] for the same `(frames, config, seed)`.
pub fn simulate_events(
    frames: &FrameSequence,
    config: &SimulatorConfig,
    seed: u64,
) -> Result<EventStream> {
    config.validate()?;
    check_frames(frames)?;
    let (h, w) = frames.frames[0].dim();
    let timestamps: Vec<f64> = frames.timestamps_ns.iter().map(|&t| t as f64).collect();
    let needs_rng = config.threshold_mismatch_sigma > 0.0 || config.noise_rate_hz > 0.0;

    let mut events: Vec<Event> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut row_events = Vec::new();
            for x in 0..w {
                let changed = frames
                    .frames
                    .windows(2)
                    .any(|f| f[0][[y, x]] != f[1][[y, x]]);
                if !changed && config.noise_rate_hz == 0.0 {
                    continue;
                }
                let mut rng = needs_rng.then(|| pixel_rng(seed, (y * w + x) as u64));
                simulate_pixel(
                    x as u16,
                    y as u16,
                    frames.frames.iter().map(|f| f[[y, x]]),
                    &timestamps,
                    config,
                    rng.as_mut(),
                    !changed,
                    &mut row_events,
                );
            }
            row_events
        })
        .collect();

    events.sort_unstable_by_key(Event::canonical_key);
    Ok(EventStream {
        width: w as u16,
        height: h as u16,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::reference::brute_force_reference;
    use super::*;
    use crate::scene::FrameSequence;
    use ndarray::Array2;
    use rand::Rng;

    fn two_frame_seq(w: usize, h: usize, i0: f64, i1: f64, px: (usize, usize)) -> FrameSequence {
        let a = Array2::from_elem((h, w), i0);
        let mut b = a.clone();
        b[[px.1, px.0]] = i1;
        FrameSequence {
            frames: vec![a, b],
            timestamps_ns: vec![0, 1_000_000],
        }
    }

    fn no_noise_cfg() -> SimulatorConfig {
        SimulatorConfig {
            threshold_mismatch_sigma: 0.0,
            refractory_ns: 0,
            noise_rate_hz: 0.0,
            ..SimulatorConfig::default()
        }
    }

    #[test]
    fn exact_double_threshold_step_gives_two_events() {
        let cfg = no_noise_cfg();
        // Choose i1 so the log step is 2 * theta_on; the 1e-12 pad keeps the
        // second crossing reachable despite the exp/ln round trip.
        let i0 = 0.2f64;
        let l0 = (i0 + cfg.log_eps).ln();
        let i1 = (l0 + 2.0 * cfg.theta_on + 1e-12).exp() - cfg.log_eps;
        let seq = two_frame_seq(4, 4, i0, i1, (1, 2));
        let stream = simulate_events(&seq, &cfg, 9).unwrap();
        assert_eq!(stream.len(), 2);
        for e in &stream.events {
            assert_eq!((e.x, e.y, e.polarity), (1, 2, Polarity::Pos));
        }
        // Crossings at 1/2 and 1 of the segment (equality fires).
        assert_eq!(stream.events[0].t_ns, 500_000);
        assert_eq!(stream.events[1].t_ns, 1_000_000);
    }

    #[test]
    fn identical_frames_and_zero_noise_give_empty_stream() {
        let a = Array2::from_elem((8, 8), 0.4);
        let seq = FrameSequence {
            frames: vec![a.clone(), a.clone(), a],
            timestamps_ns: vec![0, 500_000, 1_000_000],
        };
        let stream = simulate_events(&seq, &no_noise_cfg(), 3).unwrap();
        assert!(stream.is_empty());
    }

    #[test]
    fn returning_sequence_balances_polarities_per_pixel() {
        // frames[0] == frames[last], equal thresholds, no refractory/mismatch:
        // every pixel must emit equally many ON and OFF events.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let base: Array2<f64> = Array2::from_shape_fn((6, 6), |_| rng.random());
        let mid: Array2<f64> = Array2::from_shape_fn((6, 6), |_| rng.random());
        let seq = FrameSequence {
            frames: vec![base.clone(), mid, base],
            timestamps_ns: vec![0, 300_000, 600_000],
        };
        let stream = simulate_events(&seq, &no_noise_cfg(), 5).unwrap();
        let mut balance = std::collections::HashMap::new();
        for e in &stream.events {
            *balance.entry((e.x, e.y)).or_insert(0i64) += i64::from(e.polarity.sign());
        }
        for (&px, &b) in &balance {
            assert_eq!(b, 0, "pixel {px:?} unbalanced");
        }
    }

    #[test]
    fn refractory_longer_than_sequence_caps_events_per_pixel() {
        let mut cfg = no_noise_cfg();
        cfg.refractory_ns = 10_000_000; // longer than the whole sequence
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random()))
            .collect();
        let seq = FrameSequence {
            frames,
            timestamps_ns: vec![0, 100_000, 200_000, 300_000, 400_000],
        };
        let stream = simulate_events(&seq, &cfg, 17).unwrap();
        let mut counts = std::collections::HashMap::new();
        for e in &stream.events {
            *counts.entry((e.x, e.y)).or_insert(0u32) += 1;
        }
        assert!(counts.values().all(|&c| c <= 1));
    }

    #[test]
    fn doubling_thresholds_never_increases_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for case in 0..20 {
            let frames: Vec<Array2<f64>> = (0..4)
                .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random()))
                .collect();
            let seq = FrameSequence {
                frames,
                timestamps_ns: vec![0, 150_000, 300_000, 450_000],
            };
            let mut cfg = no_noise_cfg();
            cfg.theta_on = rng.random_range(0.05..0.3);
            cfg.theta_off = rng.random_range(0.05..0.3);
            let n1 = simulate_events(&seq, &cfg, case).unwrap().len();
            cfg.theta_on *= 2.0;
            cfg.theta_off *= 2.0;
            let n2 = simulate_events(&seq, &cfg, case).unwrap().len();
            assert!(n2 <= n1, "case {case}: {n2} > {n1}");
        }
    }

    #[test]
    fn output_is_canonically_sorted_with_noise() {
        let mut cfg = SimulatorConfig::default();
        cfg.noise_rate_hz = 5_000.0;
        let seq = two_frame_seq(16, 16, 0.3, 0.8, (5, 5));
        let stream = simulate_events(&seq, &cfg, 77).unwrap();
        assert!(stream.is_canonically_sorted());
        assert!(!stream.is_empty());
    }

    #[test]
    fn too_few_frames_is_domain_error() {
        let seq = FrameSequence {
            frames: vec![Array2::from_elem((4, 4), 0.5)],
            timestamps_ns: vec![0],
        };
        assert!(simulate_events(&seq, &SimulatorConfig::default(), 0).is_err());
    }

    #[test]
    fn non_monotone_timestamps_is_domain_error() {
        let a = Array2::from_elem((4, 4), 0.5);
        let seq = FrameSequence {
            frames: vec![a.clone(), a.clone(), a],
            timestamps_ns: vec![0, 200_000, 100_000],
        };
        assert!(simulate_events(&seq, &SimulatorConfig::default(), 0).is_err());
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for case in 0..25u64 {
            let frames: Vec<Array2<f64>> = (0..5)
                .map(|_| Array2::from_shape_fn((16, 16), |_| rng.random()))
                .collect();
            let seq = FrameSequence {
                frames,
                timestamps_ns: vec![0, 80_000, 160_000, 240_000, 320_000],
            };
            let cfg = SimulatorConfig {
                theta_on: rng.random_range(0.05..0.4),
                theta_off: rng.random_range(0.05..0.4),
                threshold_mismatch_sigma: [0.0, 0.03, 0.1][case as usize % 3],
                refractory_ns: [0, 1_000, 60_000][(case as usize / 3) % 3],
                noise_rate_hz: if case % 2 == 0 { 0.0 } else { 2_000.0 },
                log_eps: 0.02,
            };
            let fast = simulate_events(&seq, &cfg, case).unwrap();
            let slow = brute_force_reference(&seq, &cfg, case).unwrap();
            assert_eq!(fast, slow, "case {case}");
        }
    }
}

//! Brute-force DVS reference simulator.
//!
//! The most direct per-pixel scalar implementation of the event-generation
//! contract: one sequential loop over pixels, every segment walked with plain
//! arithmetic, no skipping, no parallelism. Used as the oracle the optimized
//! simulator is checked against; for equal `(frames, config, seed)` the two
//! must produce byte-identical event sequences.

use rand_distr::{Distribution, StandardNormal};

use super::{check_frames, pixel_rng, Event, EventStream, Polarity, SimulatorConfig};
use crate::error::Result;
use crate::scene::FrameSequence;

pub fn brute_force_reference(
    frames: &FrameSequence,
    config: &SimulatorConfig,
    seed: u64,
) -> Result<EventStream> {
    config.validate()?;
    check_frames(frames)?;
    let (h, w) = frames.frames[0].dim();
    let ts: Vec<f64> = frames.timestamps_ns.iter().map(|&t| t as f64).collect();
    let n = frames.len();
    let mut events: Vec<Event> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            let mut rng = pixel_rng(seed, (y * w + x) as u64);

            let mut th_on = config.theta_on;
            let mut th_off = config.theta_off;
            if config.threshold_mismatch_sigma > 0.0 {
                let z_on: f64 = StandardNormal.sample(&mut rng);
                let z_off: f64 = StandardNormal.sample(&mut rng);
                th_on *= (1.0 + config.threshold_mismatch_sigma * z_on).max(0.01);
                th_off *= (1.0 + config.threshold_mismatch_sigma * z_off).max(0.01);
            }

            // Threshold-crossing walk over every segment. The reference level
            // is l0 + pos*th_on - neg*th_off with integer counters, matching
            // the optimized simulator's arithmetic bit for bit.
            let l0 = (frames.frames[0][[y, x]] + config.log_eps).ln();
            let (mut pos_steps, mut neg_steps) = (0i64, 0i64);
            let offset = |pos: i64, neg: i64| {
                if th_on == th_off {
                    (pos - neg) as f64 * th_on
                } else {
                    pos as f64 * th_on - neg as f64 * th_off
                }
            };
            let mut last_event_t = f64::NEG_INFINITY;
            let refractory = config.refractory_ns as f64;
            for seg in 0..n - 1 {
                let (t_a, t_b) = (ts[seg], ts[seg + 1]);
                let l_a = (frames.frames[seg][[y, x]] + config.log_eps).ln();
                let l_b = (frames.frames[seg + 1][[y, x]] + config.log_eps).ln();
                loop {
                    let allowed = last_event_t + refractory;
                    let up_target = l0 + offset(pos_steps + 1, neg_steps);
                    let dn_target = l0 + offset(pos_steps, neg_steps + 1);
                    let lin = |t: f64| l_a + (l_b - l_a) * ((t - t_a) / (t_b - t_a));

                    let up_cross = if l_a >= up_target {
                        Some(t_a)
                    } else if l_b >= up_target && l_b > l_a {
                        Some(
                            (t_a + (t_b - t_a) * ((up_target - l_a) / (l_b - l_a)))
                                .clamp(t_a, t_b),
                        )
                    } else {
                        None
                    };
                    let dn_cross = if l_a <= dn_target {
                        Some(t_a)
                    } else if l_b <= dn_target && l_b < l_a {
                        Some(
                            (t_a + (t_b - t_a) * ((dn_target - l_a) / (l_b - l_a)))
                                .clamp(t_a, t_b),
                        )
                    } else {
                        None
                    };
                    let up = up_cross.and_then(|tc| {
                        let t = tc.max(allowed);
                        if t > t_b || (t > tc && lin(t) < up_target) {
                            None
                        } else {
                            Some(t)
                        }
                    });
                    let dn = dn_cross.and_then(|tc| {
                        let t = tc.max(allowed);
                        if t > t_b || (t > tc && lin(t) > dn_target) {
                            None
                        } else {
                            Some(t)
                        }
                    });

                    let (t_emit, polarity) = match (up, dn) {
                        (Some(u), Some(d)) if u <= d => (u, Polarity::Pos),
                        (Some(_), Some(d)) => (d, Polarity::Neg),
                        (Some(u), None) => (u, Polarity::Pos),
                        (None, Some(d)) => (d, Polarity::Neg),
                        (None, None) => break,
                    };
                    match polarity {
                        Polarity::Pos => pos_steps += 1,
                        Polarity::Neg => neg_steps += 1,
                    }
                    last_event_t = t_emit;
                    events.push(Event {
                        t_ns: t_emit.round() as u64,
                        x: x as u16,
                        y: y as u16,
                        polarity,
                    });
                }
            }

            // Poisson shot noise with balanced polarity.
            if config.noise_rate_hz > 0.0 {
                let rate_per_ns = config.noise_rate_hz * 1e-9;
                let t_end = ts[n - 1];
                let mut t = ts[0];
                loop {
                    let u: f64 = rand::Rng::random(&mut rng);
                    t += -(1.0 - u).ln() / rate_per_ns;
                    if t > t_end {
                        break;
                    }
                    let polarity = if rand::Rng::random_bool(&mut rng, 0.5) {
                        Polarity::Pos
                    } else {
                        Polarity::Neg
                    };
                    events.push(Event {
                        t_ns: t.round() as u64,
                        x: x as u16,
                        y: y as u16,
                        polarity,
                    });
                }
            }
        }
    }

    events.sort_unstable_by_key(Event::canonical_key);
    Ok(EventStream {
        width: w as u16,
        height: h as u16,
        events,
    })
}

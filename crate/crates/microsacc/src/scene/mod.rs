//! Parametric eye scenes and microsaccade trajectories.
//!
//! A trajectory is one out-and-back horizontal rotation of the eyeball:
//! a raised-cosine ramp from rest to the peak amplitude and a mirror-symmetric
//! return, so angular velocity is zero at both endpoints and at the peak.
//! Seven classes parameterize peak amplitude, duration, and frame count.

mod render;

pub use render::{render_frame, write_pgm, Frame};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of angular-displacement classes.
pub const CLASS_COUNT: usize = 7;

/// Static description of one angular-displacement class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: u8,
    /// Nominal peak amplitude label, degrees.
    pub nominal_amplitude_deg: f64,
    /// Frames rendered per sequence; odd so the peak lies on a frame.
    pub frame_count: usize,
    /// Peak amplitude draw range `[lo, hi)`, degrees.
    pub amplitude_range_deg: (f64, f64),
    /// Duration draw range `[lo, hi]`, milliseconds.
    pub duration_range_ms: (f64, f64),
}

/// The standard seven-class table: 0.5 deg through 2.0 deg in 0.25 deg steps,
/// with frame counts 7..=19 and overlapping duration ranges.
pub fn class_table() -> Vec<ClassSpec> {
    let rows: [(f64, usize, (f64, f64), (f64, f64)); CLASS_COUNT] = [
        (0.50, 7, (0.000, 0.625), (0.25, 0.75)),
        (0.75, 9, (0.625, 0.875), (0.50, 1.00)),
        (1.00, 11, (0.875, 1.125), (0.75, 1.25)),
        (1.25, 13, (1.125, 1.375), (1.00, 1.50)),
        (1.50, 15, (1.375, 1.625), (1.25, 1.75)),
        (1.75, 17, (1.625, 1.875), (1.50, 2.00)),
        (2.00, 19, (1.875, 2.125), (1.75, 2.25)),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(nominal, frames, amp, dur))| ClassSpec {
            class_id: i as u8,
            nominal_amplitude_deg: nominal,
            frame_count: frames,
            amplitude_range_deg: amp,
            duration_range_ms: dur,
        })
        .collect()
}

/// Validate a class table: ids contiguous, odd frame counts, well-formed
/// ranges, and overlapping adjacent duration ranges.
pub fn validate_class_table(classes: &[ClassSpec]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::domain("class table is empty"));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.class_id as usize != i {
            return Err(Error::domain(format!(
                "class ids must be contiguous from 0; slot {i} holds id {}",
                c.class_id
            )));
        }
        if c.frame_count % 2 == 0 || c.frame_count < 3 {
            return Err(Error::domain(format!(
                "class {i}: frame_count must be odd and >= 3, got {}",
                c.frame_count
            )));
        }
        if c.amplitude_range_deg.0 > c.amplitude_range_deg.1
            || c.duration_range_ms.0 > c.duration_range_ms.1
            || c.duration_range_ms.0 <= 0.0
        {
            return Err(Error::domain(format!("class {i}: malformed ranges")));
        }
    }
    for w in classes.windows(2) {
        if w[0].duration_range_ms.1 <= w[1].duration_range_ms.0 {
            return Err(Error::domain(format!(
                "duration ranges of classes {} and {} do not overlap",
                w[0].class_id, w[1].class_id
            )));
        }
    }
    Ok(())
}

/// One out-and-back horizontal rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub class_id: u8,
    pub peak_amplitude_deg: f64,
    pub duration_ms: f64,
    /// +1 rightward first, -1 leftward first.
    pub direction: i8,
    pub frame_count: usize,
}

impl Trajectory {
    pub fn duration_ns(&self) -> u64 {
        (self.duration_ms * 1e6).round() as u64
    }
}

/// Draw a trajectory for `class_id` from `classes`.
///
/// Amplitude is uniform in the class amplitude range, duration uniform in the
/// duration range, direction a fair coin; draw order is fixed so a seeded rng
/// reproduces the trajectory exactly.
pub fn make_trajectory<R: Rng>(
    classes: &[ClassSpec],
    class_id: u8,
    rng: &mut R,
) -> Result<Trajectory> {
    let spec = classes
        .get(class_id as usize)
        .ok_or_else(|| Error::domain(format!("invalid class id {class_id}")))?;
    let (alo, ahi) = spec.amplitude_range_deg;
    let peak_amplitude_deg = if ahi > alo {
        rng.random_range(alo..ahi)
    } else {
        alo
    };
    let (dlo, dhi) = spec.duration_range_ms;
    let duration_ms = if dhi > dlo {
        rng.random_range(dlo..dhi)
    } else {
        dlo
    };
    let direction = if rng.random_bool(0.5) { 1 } else { -1 };
    Ok(Trajectory {
        class_id,
        peak_amplitude_deg,
        duration_ms,
        direction,
        frame_count: spec.frame_count,
    })
}

/// Angular position at time `t_ms` along the out-and-back profile.
///
/// Raised cosine: `a(t) = dir * A * (1 - cos(2 pi t / d)) / 2`, which is zero
/// at both endpoints, peaks at `t = d/2`, and has zero velocity at rest and at
/// the peak.
pub fn angle_at(trajectory: &Trajectory, t_ms: f64) -> Result<f64> {
    let d = trajectory.duration_ms;
    if !(0.0..=d).contains(&t_ms) {
        return Err(Error::domain(format!(
            "t = {t_ms} ms outside trajectory duration [0, {d}]"
        )));
    }
    // Endpoints are exactly zero by definition (returns to origin).
    if t_ms == 0.0 || t_ms == d {
        return Ok(0.0);
    }
    let phase = t_ms / d;
    let a = trajectory.peak_amplitude_deg * f64::from(trajectory.direction);
    Ok(a * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos()))
}

/// Geometry and shading constants for the procedural eye scene.
///
/// The eyeball is a sphere with concentric iris and pupil caps around the
/// gaze axis, viewed by a fixed pinhole camera on the optical axis. All
/// lengths in millimeters, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeScene {
    pub width: usize,
    pub height: usize,
    /// Box-filter supersampling factor per axis (>= 1).
    pub supersampling: usize,
    pub eyeball_radius_mm: f64,
    pub iris_radius_mm: f64,
    pub pupil_radius_mm: f64,
    pub sclera_intensity: f64,
    pub iris_intensity: f64,
    pub pupil_intensity: f64,
    pub background_intensity: f64,
    pub focal_length_mm: f64,
    /// Camera-to-eyeball-center distance.
    pub camera_distance_mm: f64,
    /// Physical width of the image plane; sets the pixel pitch.
    pub sensor_width_mm: f64,
}

impl EyeScene {
    /// Desk-scale scene: 200x150 with 4x supersampling.
    pub fn desk() -> Self {
        EyeScene {
            width: 200,
            height: 150,
            supersampling: 4,
            eyeball_radius_mm: 12.0,
            iris_radius_mm: 5.5,
            pupil_radius_mm: 2.0,
            sclera_intensity: 0.85,
            iris_intensity: 0.35,
            pupil_intensity: 0.05,
            background_intensity: 0.30,
            focal_length_mm: 35.0,
            camera_distance_mm: 50.0,
            sensor_width_mm: 28.0,
        }
    }

    /// Full-scale scene: 800x600, same optics.
    pub fn full_scale() -> Self {
        EyeScene {
            width: 800,
            height: 600,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("scene dimensions must be nonzero"));
        }
        if self.supersampling == 0 {
            return Err(Error::domain("supersampling factor must be >= 1"));
        }
        if !(self.pupil_radius_mm < self.iris_radius_mm
            && self.iris_radius_mm < self.eyeball_radius_mm)
        {
            return Err(Error::domain(
                "require pupil radius < iris radius < eyeball radius",
            ));
        }
        for (name, v) in [
            ("sclera", self.sclera_intensity),
            ("iris", self.iris_intensity),
            ("pupil", self.pupil_intensity),
            ("background", self.background_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} intensity outside [0,1]")));
            }
        }
        if self.focal_length_mm <= 0.0
            || self.sensor_width_mm <= 0.0
            || self.camera_distance_mm <= self.eyeball_radius_mm
        {
            return Err(Error::domain("camera must sit outside the eyeball"));
        }
        Ok(())
    }
}

/// A rendered sequence: frames plus uniformly spaced nanosecond timestamps
/// over `[0, duration]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub timestamps_ns: Vec<u64>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Render all frames of `trajectory`: frame `i` at
/// `angle_at(i * duration / (frame_count - 1))`.
pub fn render_sequence(scene: &EyeScene, trajectory: &Trajectory) -> Result<FrameSequence> {
    scene.validate()?;
    let n = trajectory.frame_count;
    if n < 2 {
        return Err(Error::domain("trajectory needs at least 2 frames"));
    }
    let duration_ns = trajectory.duration_ns();
    let mut frames = Vec::with_capacity(n);
    let mut timestamps_ns = Vec::with_capacity(n);
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        let t_ms = frac * trajectory.duration_ms;
        // Clamp the final sample onto the duration endpoint exactly.
        let t_ms = if i == n - 1 { trajectory.duration_ms } else { t_ms };
        let angle = angle_at(trajectory, t_ms)?;
        frames.push(render_frame(scene, angle));
        timestamps_ns.push((frac * duration_ns as f64).round() as u64);
    }
    Ok(FrameSequence {
        frames,
        timestamps_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_matches_published_rows() {
        let t = class_table();
        assert_eq!(t.len(), 7);
        assert_eq!(t[0].frame_count, 7);
        assert_eq!(t[0].amplitude_range_deg, (0.000, 0.625));
        assert_eq!(t[0].duration_range_ms, (0.25, 0.75));
        assert_eq!(t[6].frame_count, 19);
        assert_eq!(t[6].amplitude_range_deg, (1.875, 2.125));
        assert_eq!(t[6].duration_range_ms, (1.75, 2.25));
        validate_class_table(&t).unwrap();
    }

    #[test]
    fn adjacent_duration_ranges_overlap() {
        let t = class_table();
        for w in t.windows(2) {
            assert!(w[0].duration_range_ms.1 > w[1].duration_range_ms.0);
        }
    }

    #[test]
    fn trajectory_draw_respects_class_ranges() {
        let classes = class_table();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for class_id in 0..7u8 {
            for _ in 0..200 {
                let tr = make_trajectory(&classes, class_id, &mut rng).unwrap();
                let spec = &classes[class_id as usize];
                assert!(tr.peak_amplitude_deg >= spec.amplitude_range_deg.0);
                assert!(tr.peak_amplitude_deg < spec.amplitude_range_deg.1.max(
                    spec.amplitude_range_deg.0 + f64::EPSILON
                ));
                assert!(tr.duration_ms >= spec.duration_range_ms.0);
                assert!(tr.duration_ms <= spec.duration_range_ms.1);
                assert_eq!(tr.frame_count, spec.frame_count);
                assert!(tr.direction == 1 || tr.direction == -1);
            }
        }
    }

    #[test]
    fn trajectory_is_deterministic_under_fixed_seed() {
        let classes = class_table();
        let a = make_trajectory(&classes, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = make_trajectory(&classes, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_class_id_is_domain_error() {
        let classes = class_table();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_trajectory(&classes, 7, &mut rng).is_err());
    }

    #[test]
    fn angle_profile_boundaries_and_symmetry() {
        let tr = Trajectory {
            class_id: 3,
            peak_amplitude_deg: 1.2,
            duration_ms: 1.3,
            direction: -1,
            frame_count: 13,
        };
        assert_eq!(angle_at(&tr, 0.0).unwrap(), 0.0);
        assert_eq!(angle_at(&tr, tr.duration_ms).unwrap(), 0.0);
        let peak = angle_at(&tr, tr.duration_ms / 2.0).unwrap();
        assert!((peak - (-1.2)).abs() < 1e-12);
        let q1 = angle_at(&tr, tr.duration_ms / 4.0).unwrap();
        let q3 = angle_at(&tr, 3.0 * tr.duration_ms / 4.0).unwrap();
        assert!((q1.abs() - q3.abs()).abs() < 1e-12);
        // bounded by the peak everywhere
        for i in 0..=100 {
            let t = tr.duration_ms * i as f64 / 100.0;
            assert!(angle_at(&tr, t).unwrap().abs() <= 1.2 + 1e-12);
        }
        assert!(angle_at(&tr, -0.1).is_err());
        assert!(angle_at(&tr, tr.duration_ms + 0.1).is_err());
    }

    #[test]
    fn sequence_endpoints_are_identical_frames() {
        let classes = class_table();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = make_trajectory(&classes, 2, &mut rng).unwrap();
        assert_eq!(tr.frame_count, 11);
        let mut scene = EyeScene::desk();
        scene.width = 64;
        scene.height = 48;
        scene.supersampling = 2;
        let seq = render_sequence(&scene, &tr).unwrap();
        assert_eq!(seq.len(), 11);
        assert_eq!(seq.frames[0], seq.frames[10]);
        assert_eq!(seq.timestamps_ns[0], 0);
        assert_eq!(*seq.timestamps_ns.last().unwrap(), tr.duration_ns());
        for w in seq.timestamps_ns.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}

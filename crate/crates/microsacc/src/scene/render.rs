//! Ray-cast renderer for the procedural eye scene.
//!
//! Pinhole camera on the optical axis, eyeball sphere with concentric iris
//! and pupil caps around the gaze axis. Each pixel is supersampled on a
//! regular grid and the subsample *category counts* (pupil/iris/sclera/
//! background) are averaged, which makes the box filter exact and keeps the
//! output bit-identical under horizontal mirroring of the rotation angle.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::EyeScene;
use crate::error::{Error, Result};

/// Grayscale intensity grid, row-major, values in `[0, 1]`.
pub type Frame = ndarray::Array2<f64>;

#[derive(Clone, Copy)]
struct Caster {
    pitch: f64,
    focal: f64,
    dist: f64,
    radius: f64,
    cc_minus_r2: f64,
    cos_iris: f64,
    cos_pupil: f64,
    gaze_x: f64,
    gaze_z: f64,
    half_w: f64,
    half_h: f64,
}

impl Caster {
    fn new(scene: &EyeScene, angle_deg: f64) -> Self {
        let r = scene.eyeball_radius_mm;
        let theta = angle_deg.to_radians();
        let cap_cos = |cap_radius: f64| (1.0 - (cap_radius / r).powi(2)).sqrt();
        Caster {
            pitch: scene.sensor_width_mm / scene.width as f64,
            focal: scene.focal_length_mm,
            dist: scene.camera_distance_mm,
            radius: r,
            cc_minus_r2: scene.camera_distance_mm * scene.camera_distance_mm - r * r,
            cos_iris: cap_cos(scene.iris_radius_mm),
            cos_pupil: cap_cos(scene.pupil_radius_mm),
            // Positive angle turns the gaze axis toward +x (image right).
            gaze_x: theta.sin(),
            gaze_z: -theta.cos(),
            half_w: scene.width as f64 / 2.0,
            half_h: scene.height as f64 / 2.0,
        }
    }

    /// Classify the ray through image-plane point (x_rel, y_rel) pixels from
    /// center: 0 background, 1 sclera, 2 iris, 3 pupil.
    #[inline]
    fn classify(&self, x_rel: f64, y_rel: f64) -> usize {
        let dx = x_rel * self.pitch;
        let dy = y_rel * self.pitch;
        let dz = self.focal;
        // |o + t*d - C|^2 = R^2 with o at the origin, C = (0, 0, dist).
        let a = dx * dx + dy * dy + dz * dz;
        let b = dz * self.dist; // d . C
        let disc = b * b - a * self.cc_minus_r2;
        if disc < 0.0 {
            return 0;
        }
        let t = (b - disc.sqrt()) / a;
        // Unit surface normal components relevant to the gaze test.
        let ux = t * dx / self.radius;
        let uz = (t * dz - self.dist) / self.radius;
        let c = ux * self.gaze_x + uz * self.gaze_z;
        if c >= self.cos_pupil {
            3
        } else if c >= self.cos_iris {
            2
        } else {
            1
        }
    }
}

/// Render one frame of the eye rotated by `angle_deg` about the vertical axis
/// through the eyeball center. Deterministic; supersampled box-filter AA.
pub fn render_frame(scene: &EyeScene, angle_deg: f64) -> Frame {
    let caster = Caster::new(scene, angle_deg);
    let ss = scene.supersampling;
    let inv_area = 1.0 / (ss * ss) as f64;
    let shades = [
        scene.background_intensity,
        scene.sclera_intensity,
        scene.iris_intensity,
        scene.pupil_intensity,
    ];
    let w = scene.width;
    let mut data = vec![0.0f64; w * scene.height];
    data.par_chunks_mut(w).enumerate().for_each(|(iy, row)| {
        for (ix, out) in row.iter_mut().enumerate() {
            let mut counts = [0u32; 4];
            for sy in 0..ss {
                // Subpixel offsets symmetric about the pixel center so that
                // mirrored pixels see exactly negated ray coordinates.
                let dy_off = (2 * sy + 1) as f64 / (2 * ss) as f64 - 0.5;
                let y_rel = (iy as f64 - caster.half_h + 0.5) + dy_off;
                for sx in 0..ss {
                    let dx_off = (2 * sx + 1) as f64 / (2 * ss) as f64 - 0.5;
                    let x_rel = (ix as f64 - caster.half_w + 0.5) + dx_off;
                    counts[caster.classify(x_rel, y_rel)] += 1;
                }
            }
            *out = (f64::from(counts[0]) * shades[0]
                + f64::from(counts[1]) * shades[1]
                + f64::from(counts[2]) * shades[2]
                + f64::from(counts[3]) * shades[3])
                * inv_area;
        }
    });
    Frame::from_shape_vec((scene.height, w), data).expect("shape matches buffer")
}

/// Write a frame as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.dim();
    let mut buf = Vec::with_capacity(w * h + 32);
    write!(buf, "P5\n{w} {h}\n255\n").expect("in-memory write");
    buf.extend(
        frame
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::EyeScene;

    fn mirror_h(frame: &Frame) -> Frame {
        let (h, w) = frame.dim();
        Frame::from_shape_fn((h, w), |(y, x)| frame[[y, w - 1 - x]])
    }

    /// Pupil-darkness-weighted centroid x over the central half window. The
    /// pupil disc is small enough that its centroid tracks the projected cap
    /// center (the surrounding iris would drag it by foreshortening).
    fn pupil_centroid_x(scene: &EyeScene, frame: &Frame) -> f64 {
        let (h, w) = frame.dim();
        let (mut num, mut den) = (0.0, 0.0);
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                let wgt = (scene.iris_intensity - frame[[y, x]]).max(0.0);
                num += wgt * x as f64;
                den += wgt;
            }
        }
        num / den
    }

    #[test]
    fn render_is_deterministic() {
        let scene = EyeScene::desk();
        assert_eq!(render_frame(&scene, 0.0), render_frame(&scene, 0.0));
    }

    #[test]
    fn opposite_angles_mirror_exactly() {
        let scene = EyeScene::desk();
        for angle in [0.1, 0.5, 1.3, 2.1] {
            let pos = render_frame(&scene, angle);
            let neg = render_frame(&scene, -angle);
            assert_eq!(pos, mirror_h(&neg), "angle {angle}");
        }
    }

    #[test]
    fn centroid_shift_matches_projection_geometry() {
        let scene = EyeScene::desk();
        let angle = 0.5f64;
        let base = render_frame(&scene, 0.0);
        let turned = render_frame(&scene, angle);
        let shift = pupil_centroid_x(&scene, &turned) - pupil_centroid_x(&scene, &base);
        // Projected displacement of the gaze point on the image plane,
        // proportional to sin(angle).
        let th = angle.to_radians();
        let (f, r, d) = (
            scene.focal_length_mm,
            scene.eyeball_radius_mm,
            scene.camera_distance_mm,
        );
        let pitch = scene.sensor_width_mm / scene.width as f64;
        let expected = f * r * th.sin() / (d - r * th.cos()) / pitch;
        assert!(shift > 0.0, "positive angle must shift centroid right");
        assert!(
            (shift - expected).abs() <= 0.10 * expected,
            "measured {shift:.4} px vs expected {expected:.4} px"
        );
    }

    #[test]
    fn small_rotation_changes_at_least_one_pixel() {
        let scene = EyeScene::desk();
        let base = render_frame(&scene, 0.0);
        let nudged = render_frame(&scene, 0.1);
        assert_ne!(base, nudged);
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let scene = EyeScene::desk();
        let frame = render_frame(&scene, 1.7);
        assert!(frame.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pgm_roundtrip_header(){
        let scene = EyeScene {
            width: 32,
            height: 24,
            supersampling: 1,
            ..EyeScene::desk()
        };
        let frame = render_frame(&scene, 0.0);
        let dir = std::env::temp_dir().join("microsacc-pgm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame.pgm");
        write_pgm(&path, &frame).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n32 24\n255\n"));
        assert_eq!(bytes.len(), b"P5\n32 24\n255\n".len() + 32 * 24);
    }
}

//! Dense optical flow by polynomial expansion.
//!
//! Each neighborhood is modeled as a quadratic polynomial fitted under a
//! Gaussian applicability window; displacement between two expansions is
//! solved from the averaged coefficients, with the normal-equation fields
//! smoothed over a Gaussian window, refined over several warping passes per
//! pyramid level, coarse to fine.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarnebackParams {
    /// Gaussian smoothing width for the normal-equation fields, pixels.
    pub window_size: usize,
    /// Polynomial-expansion neighborhood size (odd).
    pub poly_n: usize,
    /// Std-dev of the expansion applicability Gaussian.
    pub poly_sigma: f64,
    /// Warping refinement passes per pyramid level.
    pub iterations: usize,
    /// Pyramid depth including the base level.
    pub pyramid_levels: usize,
    /// Downscale factor between levels, in (0, 1).
    pub pyramid_scale: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            window_size: 9,
            poly_n: 5,
            poly_sigma: 1.1,
            iterations: 3,
            pyramid_levels: 2,
            pyramid_scale: 0.5,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if self.poly_n < 3 || self.poly_n % 2 == 0 {
            return Err(Error::domain("poly_n must be odd and >= 3"));
        }
        if self.window_size == 0 || self.iterations == 0 || self.pyramid_levels == 0 {
            return Err(Error::domain(
                "window_size, iterations, pyramid_levels must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.pyramid_scale) || self.pyramid_scale <= 0.0 {
            return Err(Error::domain("pyramid_scale must lie in (0, 1)"));
        }
        if self.poly_sigma <= 0.0 {
            return Err(Error::domain("poly_sigma must be positive"));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian kernel of odd length.
fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f32> {
    let r = (len / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.iter().map(|&v| v as f32).collect()
}

/// Correlate rows (axis 1) with a centered kernel, replicating borders.
fn correlate_rows(img: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = img.dim();
    let r = (kernel.len() / 2) as i64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = (x as i64 + ki as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * img[[y, xi]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Correlate columns (axis 0) with a centered kernel, replicating borders.
fn correlate_cols(img: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = img.dim();
    let r = (kernel.len() / 2) as i64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = (y as i64 + ki as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * img[[yi, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn gaussian_smooth(img: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    correlate_cols(&correlate_rows(img, kernel), kernel)
}

/// Bilinear resize with half-pixel-centered sampling.
fn resize_bilinear(img: &Array2<f32>, nh: usize, nw: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
        img[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + img[[y0, x1]] * (1.0 - dy) * dx
            + img[[y1, x0]] * dy * (1.0 - dx)
            + img[[y1, x1]] * dy * dx
    })
}

/// Invert a small square matrix by Gauss-Jordan with partial pivoting.
fn invert(mat: &mut [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let n = 6;
    let mut inv = [[0.0f64; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| mat[a][col].abs().total_cmp(&mat[b][col].abs()))
            .expect("nonempty range");
        mat.swap(col, pivot);
        inv.swap(col, pivot);
        let p = mat[col][col];
        debug_assert!(p.abs() > 1e-12, "Gram matrix must be invertible");
        for j in 0..n {
            mat[col][j] /= p;
            inv[col][j] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = mat[row][col];
                for j in 0..n {
                    mat[row][j] -= f * mat[col][j];
                    inv[row][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

/// Per-pixel quadratic expansion coefficients, channels
/// `[bx, by, axx, ayy, axy]` of `f(p+d) ~ c + b.d + d'Ad`.
fn poly_expansion(img: &Array2<f32>, poly_n: usize, sigma: f64) -> Array3<f32> {
    let r = (poly_n / 2) as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let gsum: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / gsum).collect();
    let xg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(k, &v)| (k as i64 - r) as f64 * v)
        .collect();
    let xxg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(k, &v)| ((k as i64 - r) * (k as i64 - r)) as f64 * v)
        .collect();

    // Gram matrix of the basis [1, x, y, x^2, y^2, xy] under the separable
    // applicability a(x)a(y).
    let m2: f64 = xxg.iter().sum();
    let m4: f64 = g
        .iter()
        .enumerate()
        .map(|(k, &v)| ((k as i64 - r).pow(4)) as f64 * v)
        .sum();
    let mut gram = [[0.0f64; 6]; 6];
    gram[0][0] = 1.0;
    gram[1][1] = m2;
    gram[2][2] = m2;
    gram[3][3] = m4;
    gram[4][4] = m4;
    gram[5][5] = m2 * m2;
    gram[0][3] = m2;
    gram[3][0] = m2;
    gram[0][4] = m2;
    gram[4][0] = m2;
    gram[3][4] = m2 * m2;
    gram[4][3] = m2 * m2;
    let ig = invert(&mut gram);
    let (ig11, ig33, ig03, ig55) = (ig[1][1], ig[3][3], ig[0][3], ig[5][5]);

    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let (gk, xgk, xxgk) = (to_f32(&g), to_f32(&xg), to_f32(&xxg));

    // Separable moments: horizontal passes then vertical combines.
    let s0 = correlate_rows(img, &gk);
    let s1 = correlate_rows(img, &xgk);
    let s2 = correlate_rows(img, &xxgk);
    let m_1 = correlate_cols(&s0, &gk);
    let m_x = correlate_cols(&s1, &gk);
    let m_y = correlate_cols(&s0, &xgk);
    let m_xx = correlate_cols(&s2, &gk);
    let m_yy = correlate_cols(&s0, &xxgk);
    let m_xy = correlate_cols(&s1, &xgk);

    let (h, w) = img.dim();
    let mut out = Array3::zeros((5, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = (ig11 * m_x[[y, x]] as f64) as f32;
            out[[1, y, x]] = (ig11 * m_y[[y, x]] as f64) as f32;
            out[[2, y, x]] = (ig33 * m_xx[[y, x]] as f64 + ig03 * m_1[[y, x]] as f64) as f32;
            out[[3, y, x]] = (ig33 * m_yy[[y, x]] as f64 + ig03 * m_1[[y, x]] as f64) as f32;
            out[[4, y, x]] = (ig55 * m_xy[[y, x]] as f64) as f32;
        }
    }
    out
}

/// One displacement refinement pass at a single pyramid level.
fn update_flow(
    r1: &Array3<f32>,
    r2: &Array3<f32>,
    flow_u: &mut Array2<f32>,
    flow_v: &mut Array2<f32>,
    window_size: usize,
) {
    let (_, h, w) = r1.dim();
    let mut g11 = Array2::zeros((h, w));
    let mut g12 = Array2::zeros((h, w));
    let mut g22 = Array2::zeros((h, w));
    let mut h1 = Array2::zeros((h, w));
    let mut h2 = Array2::zeros((h, w));

    // Bilinear fetch of one expansion channel at a clamped position; the
    // fetch offset must equal the prior used in the correction term below.
    let fetch = |c: usize, sy: f32, sx: f32| -> f32 {
        let xf = sx.clamp(0.0, (w - 1) as f32);
        let yf = sy.clamp(0.0, (h - 1) as f32);
        let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (xf - x0 as f32, yf - y0 as f32);
        r2[[c, y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + r2[[c, y0, x1]] * (1.0 - fy) * fx
            + r2[[c, y1, x0]] * fy * (1.0 - fx)
            + r2[[c, y1, x1]] * fy * fx
    };

    for y in 0..h {
        for x in 0..w {
            let u0 = flow_u[[y, x]];
            let v0 = flow_v[[y, x]];
            let (sy, sx) = (y as f32 + v0, x as f32 + u0);

            let a11 = 0.5 * (r1[[2, y, x]] + fetch(2, sy, sx));
            let a22 = 0.5 * (r1[[3, y, x]] + fetch(3, sy, sx));
            let a12 = 0.25 * (r1[[4, y, x]] + fetch(4, sy, sx));
            let db1 = -0.5 * (fetch(0, sy, sx) - r1[[0, y, x]]) + a11 * u0 + a12 * v0;
            let db2 = -0.5 * (fetch(1, sy, sx) - r1[[1, y, x]]) + a12 * u0 + a22 * v0;

            g11[[y, x]] = a11 * a11 + a12 * a12;
            g12[[y, x]] = a12 * (a11 + a22);
            g22[[y, x]] = a12 * a12 + a22 * a22;
            h1[[y, x]] = a11 * db1 + a12 * db2;
            h2[[y, x]] = a12 * db1 + a22 * db2;
        }
    }

    // OpenCV-style default sigma for a given kernel size.
    let sigma = 0.3 * ((window_size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let k = gaussian_kernel(window_size | 1, sigma.max(0.3));
    let g11 = gaussian_smooth(&g11, &k);
    let g12 = gaussian_smooth(&g12, &k);
    let g22 = gaussian_smooth(&g22, &k);
    let h1 = gaussian_smooth(&h1, &k);
    let h2 = gaussian_smooth(&h2, &k);

    for y in 0..h {
        for x in 0..w {
            let det = g11[[y, x]] as f64 * g22[[y, x]] as f64
                - g12[[y, x]] as f64 * g12[[y, x]] as f64;
            if det.abs() > 1e-12 {
                let hh1 = h1[[y, x]] as f64;
                let hh2 = h2[[y, x]] as f64;
                flow_u[[y, x]] = ((g22[[y, x]] as f64 * hh1 - g12[[y, x]] as f64 * hh2) / det) as f32;
                flow_v[[y, x]] = ((g11[[y, x]] as f64 * hh2 - g12[[y, x]] as f64 * hh1) / det) as f32;
            }
            // Degenerate (textureless) neighborhoods keep the prior estimate.
        }
    }
}

/// Dense optical flow from `frame_a` to `frame_b`: positive `u` means image
/// content moved rightward.
pub fn farneback(
    frame_a: &Array2<f32>,
    frame_b: &Array2<f32>,
    params: &FarnebackParams,
) -> Result<FlowField> {
    params.validate()?;
    if frame_a.dim() != frame_b.dim() {
        return Err(Error::domain("flow frames must share dimensions"));
    }
    let (h, w) = frame_a.dim();
    if h < params.poly_n || w < params.poly_n {
        return Err(Error::domain(format!(
            "frames {h}x{w} smaller than poly_n {}",
            params.poly_n
        )));
    }

    // Pyramid sizes, base first; levels too small for the expansion window
    // are dropped.
    let mut sizes = vec![(h, w)];
    for _ in 1..params.pyramid_levels {
        let (ph, pw) = *sizes.last().expect("nonempty");
        let nh = (ph as f64 * params.pyramid_scale).round() as usize;
        let nw = (pw as f64 * params.pyramid_scale).round() as usize;
        if nh < params.poly_n || nw < params.poly_n {
            break;
        }
        sizes.push((nh, nw));
    }

    // Image pyramids with Gaussian pre-smoothing before each downsample.
    let presmooth_sigma = (1.0 / params.pyramid_scale - 1.0).max(0.1);
    let pk = gaussian_kernel(2 * (3.0 * presmooth_sigma).ceil() as usize + 1, presmooth_sigma);
    let mut pyr_a = vec![frame_a.clone()];
    let mut pyr_b = vec![frame_b.clone()];
    for &(nh, nw) in sizes.iter().skip(1) {
        let pa = pyr_a.last().expect("nonempty");
        let pb = pyr_b.last().expect("nonempty");
        pyr_a.push(resize_bilinear(&gaussian_smooth(pa, &pk), nh, nw));
        pyr_b.push(resize_bilinear(&gaussian_smooth(pb, &pk), nh, nw));
    }

    let coarsest = sizes.len() - 1;
    let mut flow_u = Array2::zeros(sizes[coarsest]);
    let mut flow_v = Array2::zeros(sizes[coarsest]);
    for level in (0..sizes.len()).rev() {
        let (lh, lw) = sizes[level];
        if (flow_u.dim()) != (lh, lw) {
            let (ch, cw) = flow_u.dim();
            flow_u = resize_bilinear(&flow_u, lh, lw) * (lw as f32 / cw as f32);
            flow_v = resize_bilinear(&flow_v, lh, lw) * (lh as f32 / ch as f32);
        }
        let r1 = poly_expansion(&pyr_a[level], params.poly_n, params.poly_sigma);
        let r2 = poly_expansion(&pyr_b[level], params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            update_flow(&r1, &r2, &mut flow_u, &mut flow_v, params.window_size);
        }
    }

    Ok(FlowField {
        u: flow_u,
        v: flow_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blob(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() as f32
        })
    }

    fn mean_flow_over_support(
        field: &FlowField,
        support: &Array2<f32>,
        thresh: f32,
    ) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for ((y, x), &m) in support.indexed_iter() {
            if m > thresh {
                su += field.u[[y, x]] as f64;
                sv += field.v[[y, x]] as f64;
                n += 1;
            }
        }
        (su / n as f64, sv / n as f64)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = gaussian_blob(48, 64, 32.0, 24.0, 6.0);
        let f = farneback(&a, &a, &FarnebackParams::default()).unwrap();
        let (mu, mv) = mean_flow_over_support(&f, &a, 0.05);
        assert!(mu.abs() < 0.05 && mv.abs() < 0.05, "({mu}, {mv})");
    }

    #[test]
    fn recovers_horizontal_translations() {
        for shift in [0.5f64, 1.0, 2.0] {
            let a = gaussian_blob(48, 64, 32.0, 24.0, 6.0);
            let b = gaussian_blob(48, 64, 32.0 + shift, 24.0, 6.0);
            let f = farneback(&a, &b, &FarnebackParams::default()).unwrap();
            let (mu, mv) = mean_flow_over_support(&f, &a, 0.05);
            let tol = (0.15 * shift).max(0.25);
            assert!(
                (mu - shift).abs() <= tol && mv.abs() <= tol,
                "shift {shift}: got ({mu:.3}, {mv:.3})"
            );
        }
    }

    #[test]
    fn recovers_vertical_translation() {
        let a = gaussian_blob(48, 64, 32.0, 24.0, 6.0);
        let b = gaussian_blob(48, 64, 32.0, 25.0, 6.0);
        let f = farneback(&a, &b, &FarnebackParams::default()).unwrap();
        let (mu, mv) = mean_flow_over_support(&f, &a, 0.05);
        assert!(
            (mv - 1.0).abs() <= 0.25 && mu.abs() <= 0.25,
            "got ({mu:.3}, {mv:.3})"
        );
    }

    #[test]
    fn undersized_frames_are_rejected() {
        let a = Array2::zeros((3, 3));
        assert!(farneback(&a, &a, &FarnebackParams::default()).is_err());
    }
}

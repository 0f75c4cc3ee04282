//! Dense numeric kernels for the spiking models: im2col convolution,
//! batch normalization over (unit, H, W), average pooling, linear layers,
//! transposed convolution, and bilinear resizing.
//!
//! Everything is generic over `f32`/`f64`; parallel paths split work into
//! fixed-size chunks with sequential in-chunk accumulation, so results are
//! bit-identical regardless of worker count.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, NdFloat};
use rayon::prelude::*;

/// Fixed reduction fan-in for parallel gradient accumulation.
const GRAD_CHUNKS: usize = 8;

fn chunk_len(n: usize) -> usize {
    n.div_ceil(GRAD_CHUNKS).max(1)
}

/// im2col for 3x3, pad 1, stride 1: (C, H, W) -> (C*9, H*W).
fn im2col3<F: NdFloat>(x: &ArrayView2<F>, c: usize, h: usize, w: usize, out: &mut Array2<F>) {
    // x is (C, H*W) row-major.
    debug_assert_eq!(x.dim(), (c, h * w));
    let xs = x.as_slice().expect("contiguous input");
    let os = out.as_slice_mut().expect("contiguous col");
    let hw = h * w;
    for ci in 0..c {
        let base_in = ci * hw;
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    let dst = row + y as usize * w;
                    if sy < 0 || sy >= h as isize {
                        os[dst..dst + w].fill(F::zero());
                        continue;
                    }
                    let src = base_in + sy as usize * w;
                    // columns shifted by dx with zero border
                    if dx == 0 {
                        os[dst..dst + w].copy_from_slice(&xs[src..src + w]);
                    } else if dx < 0 {
                        os[dst] = F::zero();
                        os[dst + 1..dst + w].copy_from_slice(&xs[src..src + w - 1]);
                    } else {
                        os[dst..dst + w - 1].copy_from_slice(&xs[src + 1..src + w]);
                        os[dst + w - 1] = F::zero();
                    }
                }
            }
        }
    }
}

/// Transpose of im2col: scatter-add columns into a zero-initialized image.
fn col2im3_into<F: NdFloat>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    out: &mut ndarray::ArrayViewMut2<F>,
) {
    let cs = cols.as_slice().expect("contiguous col");
    let os = out.as_slice_mut().expect("contiguous out");
    let hw = h * w;
    for ci in 0..c {
        let base_out = ci * hw;
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = row + y as usize * w;
                    let dst = base_out + sy as usize * w;
                    if dx == 0 {
                        for i in 0..w {
                            os[dst + i] += cs[src + i];
                        }
                    } else if dx < 0 {
                        for i in 1..w {
                            os[dst + i - 1] += cs[src + i];
                        }
                    } else {
                        for i in 0..w - 1 {
                            os[dst + i + 1] += cs[src + i];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-size convolution over a batch of units.
/// `x` (U, Cin, H, W), `weight` (Cout, Cin, 3, 3), `bias` (Cout).
pub fn conv3_forward<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    bias: &Array1<F>,
) -> Array4<F> {
    let (u, cin, h, w) = x.dim();
    let cout = weight.dim().0;
    let wmat = weight
        .to_shape((cout, cin * 9))
        .expect("contiguous weight");
    let mut out = Array4::<F>::zeros((u, cout, h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each_init(
            || Array2::<F>::zeros((cin * 9, h * w)),
            |col, (mut o, xu)| {
                let xu = xu.to_shape((cin, h * w)).expect("contiguous unit");
                im2col3(&xu.view(), cin, h, w, col);
                let mut o2 = o
                    .view_mut()
                    .into_shape_with_order((cout, h * w))
                    .expect("shape");
                ndarray::linalg::general_mat_mul(F::one(), &wmat, col, F::zero(), &mut o2);
                for (mut row, &b) in o2.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
            },
        );
    out
}

/// Backward of [`conv3_forward`]: returns (dx, dweight, dbias).
///
/// dX is computed as a forward convolution of dY with channel-swapped,
/// 180-degree-rotated weights, which reuses the efficient forward kernel.
pub fn conv3_backward<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    dy: &ArrayView4<F>,
    need_dx: bool,
) -> (Option<Array4<F>>, Array4<F>, Array1<F>) {
    let (u, cin, h, w) = x.dim();
    let cout = weight.dim().0;

    let dx = need_dx.then(|| {
        let mut w_rot = Array4::<F>::zeros((cin, cout, 3, 3));
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        w_rot[[ci, co, ky, kx]] = weight[[co, ci, 2 - ky, 2 - kx]];
                    }
                }
            }
        }
        conv3_forward(dy, &w_rot.view(), &Array1::zeros(cin))
    });

    // Weight/bias gradients, accumulated per fixed chunk then summed in order.
    let cl = chunk_len(u);
    let n_chunks = u.div_ceil(cl);
    let partials: Vec<(Array2<F>, Array1<F>)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk_idx| {
            let start = chunk_idx * cl;
            let end = (start + cl).min(u);
            let mut dw = Array2::<F>::zeros((cout, cin * 9));
            let mut db = Array1::<F>::zeros(cout);
            let mut col = Array2::<F>::zeros((cin * 9, h * w));
            for ui in start..end {
                let xu = x.index_axis(Axis(0), ui);
                let xu = xu.to_shape((cin, h * w)).expect("contiguous unit");
                im2col3(&xu.view(), cin, h, w, &mut col);
                let dyu = dy.index_axis(Axis(0), ui);
                let dyu = dyu.to_shape((cout, h * w)).expect("contiguous dy");
                ndarray::linalg::general_mat_mul(F::one(), &dyu, &col.t(), F::one(), &mut dw);
                db += &dyu.sum_axis(Axis(1));
            }
            (dw, db)
        })
        .collect();

    let mut dw = Array2::<F>::zeros((cout, cin * 9));
    let mut db = Array1::<F>::zeros(cout);
    for (pw, pb) in partials {
        dw += &pw;
        db += &pb;
    }
    let dw4 = dw
        .into_shape_with_order((cout, cin, 3, 3))
        .expect("weight shape");
    (dx, dw4, db)
}

/// Batch statistics and normalized activations from a training-mode pass.
pub struct BnForward<F> {
    pub y: Array4<F>,
    pub xhat: Array4<F>,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// BatchNorm over (U, H, W) per channel with batch statistics.
pub fn batchnorm_forward_train<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    eps: f64,
) -> BnForward<F> {
    let (u, c, h, w) = x.dim();
    let n = F::from(u * h * w).expect("count fits");
    let epsf = F::from(eps).expect("eps fits");
    let mut y = Array4::<F>::zeros((u, c, h, w));
    let mut xhat = Array4::<F>::zeros((u, c, h, w));
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);

    let stats: Vec<(F, F)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = F::zero();
            let mut sumsq = F::zero();
            for ui in 0..u {
                let lane = x.slice(s![ui, ci, .., ..]);
                let lane = lane.to_slice().expect("contiguous lane");
                for &v in lane {
                    sum += v;
                    sumsq += v * v;
                }
            }
            let m = sum / n;
            (m, sumsq / n - m * m)
        })
        .collect();
    for (ci, &(m, v)) in stats.iter().enumerate() {
        mean[ci] = m;
        var[ci] = v;
    }

    y.axis_iter_mut(Axis(1))
        .into_par_iter()
        .zip(xhat.axis_iter_mut(Axis(1)).into_par_iter())
        .enumerate()
        .for_each(|(ci, (mut yc, mut xoc))| {
            let inv = (var[ci] + epsf).sqrt().recip();
            let (g, b, m) = (gamma[ci], beta[ci], mean[ci]);
            for ui in 0..u {
                let xl = x.slice(s![ui, ci, .., ..]);
                let xl = xl.to_slice().expect("contiguous lane");
                let mut yl = yc.slice_mut(s![ui, .., ..]);
                let yl = yl.as_slice_mut().expect("contiguous lane");
                let mut xol = xoc.slice_mut(s![ui, .., ..]);
                let xol = xol.as_slice_mut().expect("contiguous lane");
                for i in 0..xl.len() {
                    let xh = (xl[i] - m) * inv;
                    xol[i] = xh;
                    yl[i] = g * xh + b;
                }
            }
        });

        BnForward { y, xhat, mean, var }
}

/// BatchNorm with fixed (running) statistics, for inference.
pub fn batchnorm_forward_eval<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    running_mean: &Array1<F>,
    running_var: &Array1<F>,
    eps: f64,
) -> Array4<F> {
    let (u, c, h, w) = x.dim();
    let epsf = F::from(eps).expect("eps fits");
    let mut y = Array4::<F>::zeros((u, c, h, w));
    y.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut yc)| {
            let inv = (running_var[ci] + epsf).sqrt().recip();
            let (g, b, m) = (gamma[ci], beta[ci], running_mean[ci]);
            for ui in 0..u {
                let xl = x.slice(s![ui, ci, .., ..]);
                let xl = xl.to_slice().expect("contiguous lane");
                let mut yl = yc.slice_mut(s![ui, .., ..]);
                let yl = yl.as_slice_mut().expect("contiguous lane");
                for i in 0..xl.len() {
                    yl[i] = g * (xl[i] - m) * inv + b;
                }
            }
        });
    y
}

/// Backward of the training-mode BatchNorm; returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<F: NdFloat + Send + Sync>(
    dy: &ArrayView4<F>,
    xhat: &ArrayView4<F>,
    gamma: &Array1<F>,
    var: &Array1<F>,
    eps: f64,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (u, c, h, w) = dy.dim();
    let n = F::from(u * h * w).expect("count fits");
    let epsf = F::from(eps).expect("eps fits");
    let mut dx = Array4::<F>::zeros((u, c, h, w));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);

    let grads: Vec<(F, F)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum_dy = F::zero();
            let mut sum_dyx = F::zero();
            for ui in 0..u {
                let dl = dy.slice(s![ui, ci, .., ..]);
                let dl = dl.to_slice().expect("contiguous lane");
                let xl = xhat.slice(s![ui, ci, .., ..]);
                let xl = xl.to_slice().expect("contiguous lane");
                for i in 0..dl.len() {
                    sum_dy += dl[i];
                    sum_dyx += dl[i] * xl[i];
                }
            }
            (sum_dy, sum_dyx)
        })
        .collect();
    for (ci, &(sdy, sdyx)) in grads.iter().enumerate() {
        dbeta[ci] = sdy;
        dgamma[ci] = sdyx;
    }

    dx.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut dxc)| {
            let inv = (var[ci] + epsf).sqrt().recip();
            let scale = gamma[ci] * inv;
            let mean_dy = dbeta[ci] / n;
            let mean_dyx = dgamma[ci] / n;
            for ui in 0..u {
                let dl = dy.slice(s![ui, ci, .., ..]);
                let dl = dl.to_slice().expect("contiguous lane");
                let xl = xhat.slice(s![ui, ci, .., ..]);
                let xl = xl.to_slice().expect("contiguous lane");
                let mut ol = dxc.slice_mut(s![ui, .., ..]);
                let ol = ol.as_slice_mut().expect("contiguous lane");
                for i in 0..dl.len() {
                    ol[i] = scale * (dl[i] - mean_dy - xl[i] * mean_dyx);
                }
            }
        });
        (dx, dgamma, dbeta)
}

/// 2x2 average pooling with stride 2 (floor semantics: odd edges dropped).
pub fn avgpool2_forward<F: NdFloat + Send + Sync>(x: &ArrayView4<F>) -> Array4<F> {
    let (u, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from(0.25).expect("fits");
    let mut out = Array4::<F>::zeros((u, c, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, xu)| {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = xu[[ci, 2 * y, 2 * xx]]
                            + xu[[ci, 2 * y, 2 * xx + 1]]
                            + xu[[ci, 2 * y + 1, 2 * xx]]
                            + xu[[ci, 2 * y + 1, 2 * xx + 1]];
                        o[[ci, y, xx]] = s * quarter;
                    }
                }
            }
        });
    out
}

/// Backward of [`avgpool2_forward`] given the input spatial size.
pub fn avgpool2_backward<F: NdFloat + Send + Sync>(
    dy: &ArrayView4<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (u, c, oh, ow) = dy.dim();
    let quarter = F::from(0.25).expect("fits");
    let mut dx = Array4::<F>::zeros((u, c, h, w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut d, dyu)| {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = dyu[[ci, y, xx]] * quarter;
                        d[[ci, 2 * y, 2 * xx]] = g;
                        d[[ci, 2 * y, 2 * xx + 1]] = g;
                        d[[ci, 2 * y + 1, 2 * xx]] = g;
                        d[[ci, 2 * y + 1, 2 * xx + 1]] = g;
                    }
                }
            }
        });
    dx
}

/// Fully connected layer: `y = x W^T + b` with `x` (U, In), `W` (Out, In).
pub fn linear_forward<F: NdFloat>(
    x: &ArrayView2<F>,
    weight: &ArrayView2<F>,
    bias: &Array1<F>,
) -> Array2<F> {
    let mut y = x.dot(&weight.t());
    for (mut row, _) in y.axis_iter_mut(Axis(0)).zip(0..) {
        row += bias;
    }
    y
}

/// Backward of [`linear_forward`]: returns (dx, dweight, dbias).
pub fn linear_backward<F: NdFloat>(
    x: &ArrayView2<F>,
    weight: &ArrayView2<F>,
    dy: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(weight);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Transposed convolution, kernel 4, stride 2, pad 1 (doubles H and W).
/// `x` (U, Cin, h, w), `weight` (Cin, Cout, 4, 4), output (U, Cout, 2h, 2w).
pub fn tconv4_forward<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    bias: &Array1<F>,
) -> Array4<F> {
    let (u, cin, h, w) = x.dim();
    let cout = weight.dim().1;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array4::<F>::zeros((u, cout, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, xu)| {
            for co in 0..cout {
                let b = bias[co];
                o.slice_mut(s![co, .., ..]).fill(b);
            }
            for ci in 0..cin {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xu[[ci, y, xx]];
                        if v == F::zero() {
                            continue;
                        }
                        for ky in 0..4usize {
                            let oy = (2 * y + ky) as isize - 1;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..4usize {
                                let ox = (2 * xx + kx) as isize - 1;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                for co in 0..cout {
                                    o[[co, oy as usize, ox as usize]] +=
                                        v * weight[[ci, co, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gather 4x4 stride-2 pad-1 patches of `dy` (Cout, 2h, 2w) into a column
/// matrix (Cout*16, h*w), zero outside the image.
fn im2col4s2<F: NdFloat>(dy: &ndarray::ArrayView3<F>, h: usize, w: usize, out: &mut Array2<F>) {
    let (cout, oh, ow) = dy.dim();
    let ds = dy.as_slice().expect("contiguous dy");
    let os = out.as_slice_mut().expect("contiguous col");
    for co in 0..cout {
        let base_in = co * oh * ow;
        for ky in 0..4usize {
            for kx in 0..4usize {
                let row = (co * 16 + ky * 4 + kx) * (h * w);
                for y in 0..h {
                    let oy = (2 * y + ky) as isize - 1;
                    let dst = row + y * w;
                    if oy < 0 || oy >= oh as isize {
                        os[dst..dst + w].fill(F::zero());
                        continue;
                    }
                    let src_row = base_in + oy as usize * ow;
                    for x in 0..w {
                        let ox = (2 * x + kx) as isize - 1;
                        os[dst + x] = if ox < 0 || ox >= ow as isize {
                            F::zero()
                        } else {
                            ds[src_row + ox as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Backward of [`tconv4_forward`]: returns (dx, dweight, dbias).
pub fn tconv4_backward<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    dy: &ArrayView4<F>,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (u, cin, h, w) = x.dim();
    let (_, cout, _, _) = weight.dim();
    let cl = chunk_len(u);
    let wmat = weight
        .to_shape((cin, cout * 16))
        .expect("contiguous weight");

    let mut dx = Array4::<F>::zeros((u, cin, h, w));
    let partials: Vec<(Array2<F>, Array1<F>)> = dx
        .axis_chunks_iter_mut(Axis(0), cl)
        .into_par_iter()
        .enumerate()
        .map(|(chunk_idx, mut dx_chunk)| {
            let start = chunk_idx * cl;
            let end = (start + cl).min(u);
            let mut dw = Array2::<F>::zeros((cin, cout * 16));
            let mut db = Array1::<F>::zeros(cout);
            let mut col = Array2::<F>::zeros((cout * 16, h * w));
            for (local, ui) in (start..end).enumerate() {
                let dyu = dy.index_axis(Axis(0), ui);
                for co in 0..cout {
                    db[co] += dyu.slice(s![co, .., ..]).sum();
                }
                im2col4s2(&dyu, h, w, &mut col);
                let xu = x.index_axis(Axis(0), ui);
                let xu = xu.to_shape((cin, h * w)).expect("contiguous unit");
                ndarray::linalg::general_mat_mul(F::one(), &xu, &col.t(), F::one(), &mut dw);
                let mut target = dx_chunk
                    .index_axis_mut(Axis(0), local)
                    .into_shape_with_order((cin, h * w))
                    .expect("shape");
                ndarray::linalg::general_mat_mul(F::one(), &wmat, &col, F::zero(), &mut target);
            }
            (dw, db)
        })
        .collect();

    let mut dw = Array2::<F>::zeros((cin, cout * 16));
    let mut db = Array1::<F>::zeros(cout);
    for (pw, pb) in partials {
        dw += &pw;
        db += &pb;
    }
    let dw4 = dw
        .into_shape_with_order((cin, cout, 4, 4))
        .expect("weight shape");
    (dx, dw4, db)
}

/// Bilinear resize with half-pixel-centered sampling, per unit and channel.
pub fn bilinear_forward<F: NdFloat + Send + Sync>(
    x: &ArrayView4<F>,
    oh: usize,
    ow: usize,
) -> Array4<F> {
    let (u, c, h, w) = x.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array4::<F>::zeros((u, c, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, xu)| {
            for ci in 0..c {
                for y in 0..oh {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let dy = F::from(fy - y0 as f64).expect("fits");
                    for xx in 0..ow {
                        let fx = ((xx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = fx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let dx = F::from(fx - x0 as f64).expect("fits");
                        let one = F::one();
                        o[[ci, y, xx]] = xu[[ci, y0, x0]] * (one - dy) * (one - dx)
                            + xu[[ci, y0, x1]] * (one - dy) * dx
                            + xu[[ci, y1, x0]] * dy * (one - dx)
                            + xu[[ci, y1, x1]] * dy * dx;
                    }
                }
            }
        });
    out
}

/// Backward of [`bilinear_forward`]: scatter gradients to source corners.
pub fn bilinear_backward<F: NdFloat + Send + Sync>(
    dy: &ArrayView4<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (u, c, oh, ow) = dy.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut dx = Array4::<F>::zeros((u, c, h, w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut d, dyu)| {
            for ci in 0..c {
                for y in 0..oh {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let wy = F::from(fy - y0 as f64).expect("fits");
                    for xx in 0..ow {
                        let fx = ((xx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = fx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let wx = F::from(fx - x0 as f64).expect("fits");
                        let one = F::one();
                        let g = dyu[[ci, y, xx]];
                        d[[ci, y0, x0]] += g * (one - wy) * (one - wx);
                        d[[ci, y0, x1]] += g * (one - wy) * wx;
                        d[[ci, y1, x0]] += g * wy * (one - wx);
                        d[[ci, y1, x1]] += g * wy * wx;
                    }
                }
            }
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn4(&mut rng, (2, 3, 5, 6));
        let w = randn4(&mut rng, (4, 3, 3, 3));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let y = conv3_forward(&x.view(), &w.view(), &b);
        // naive
        for u in 0..2 {
            for co in 0..4 {
                for oy in 0..5i64 {
                    for ox in 0..6i64 {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let iy = oy + ky - 1;
                                    let ix = ox + kx - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += w[[co, ci, ky as usize, kx as usize]]
                                            * x[[u, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        let got = y[[u, co, oy as usize, ox as usize]];
                        assert!((got - acc).abs() < 1e-10, "mismatch at {u},{co},{oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = randn4(&mut rng, (2, 2, 4, 5));
        let mut w = randn4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let seed = randn4(&mut rng, (2, 3, 4, 5));

        let (dx, dw, db) = {
            let y = conv3_forward(&x.view(), &w.view(), &b);
            assert_eq!(y.dim(), (2, 3, 4, 5));
            conv3_backward(&x.view(), &w.view(), &seed.view(), true)
        };
        let dx = dx.unwrap();

        for probe in [(0usize, 0usize, 1usize, 2usize), (1, 1, 3, 4), (0, 1, 0, 0)] {
            let f =
                |xa: &Array4<f64>| (conv3_forward(&xa.view(), &w.view(), &b) * &seed).sum();
            let analytic = dx[probe];
            let orig = x[probe];
            x[probe] = orig + 1e-6;
            let above = f(&x);
            x[probe] = orig - 1e-6;
            let below = f(&x);
            x[probe] = orig;
            let num = (above - below) / 2e-6;
            assert!((analytic - num).abs() < 1e-6, "dx {analytic} vs {num}");
        }

        let wf = |wa: &Array4<f64>| (conv3_forward(&x.view(), &wa.view(), &b) * &seed).sum();
        let probe = (1usize, 0usize, 2usize, 1usize);
        let analytic = dw[probe];
        let orig = w[probe];
        w[probe] = orig + 1e-6;
        let above = wf(&w);
        w[probe] = orig - 1e-6;
        let below = wf(&w);
        w[probe] = orig;
        let num = (above - below) / 2e-6;
        assert!((analytic - num).abs() < 1e-6, "dw {analytic} vs {num}");

        assert!((db[1] - seed.slice(s![.., 1, .., ..]).sum()).abs() < 1e-10);
    }

    #[test]
    fn batchnorm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = randn4(&mut rng, (3, 2, 2, 3));
        let gamma = Array1::from_shape_fn(2, |_| rng.random_range(0.5..1.5));
        let beta = Array1::from_shape_fn(2, |_| rng.random_range(-0.5..0.5));
        let eps = 1e-5;
        let fwd = batchnorm_forward_train(&x.view(), &gamma, &beta, eps);
        // per-channel normalized stats
        for ci in 0..2 {
            let xh = fwd.xhat.slice(s![.., ci, .., ..]);
            let n = xh.len() as f64;
            let m: f64 = xh.iter().sum::<f64>() / n;
            let v: f64 = xh.iter().map(|a| a * a).sum::<f64>() / n;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }

        let seed = randn4(&mut rng, (3, 2, 2, 3));
        let (dx, dgamma, dbeta) =
            batchnorm_backward(&seed.view(), &fwd.xhat.view(), &gamma, &fwd.var, eps);
        let loss = |xa: &Array4<f64>| {
            (batchnorm_forward_train(&xa.view(), &gamma, &beta, eps).y * &seed).sum()
        };
        for probe in [(0usize, 0usize, 0usize, 0usize), (2, 1, 1, 2)] {
            let analytic = dx[probe];
            let orig = x[probe];
            x[probe] = orig + 1e-6;
            let above = loss(&x);
            x[probe] = orig - 1e-6;
            let below = loss(&x);
            x[probe] = orig;
            let num = (above - below) / 2e-6;
            assert!(
                (analytic - num).abs() < 1e-5,
                "bn dx {analytic} vs {num} at {probe:?}"
            );
        }
        // dgamma/dbeta identities
        for ci in 0..2 {
            let expect_dg: f64 = seed
                .slice(s![.., ci, .., ..])
                .iter()
                .zip(fwd.xhat.slice(s![.., ci, .., ..]).iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((dgamma[ci] - expect_dg).abs() < 1e-10);
            let expect_db: f64 = seed.slice(s![.., ci, .., ..]).sum();
            assert!((dbeta[ci] - expect_db).abs() < 1e-10);
        }
    }

    #[test]
    fn avgpool_and_backward_are_exact() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f64);
        let y = avgpool2_forward(&x.view());
        assert_eq!(y[[0, 0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0f64);
        let dx = avgpool2_backward(&dy.view(), 4, 4);
        assert!(dx.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0f64));
        let mut w = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let seed = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let (_dx, dw, _db) = linear_backward(&x.view(), &w.view(), &seed.view());
        let loss = |wa: &Array2<f64>| (linear_forward(&x.view(), &wa.view(), &b) * &seed).sum();
        let orig = w[[2, 3]];
        w[[2, 3]] = orig + 1e-6;
        let above = loss(&w);
        w[[2, 3]] = orig - 1e-6;
        let below = loss(&w);
        w[[2, 3]] = orig;
        assert!((dw[[2, 3]] - (above - below) / 2e-6).abs() < 1e-6);
    }

    #[test]
    fn tconv_doubles_size_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (2, 3, 3, 4));
        let mut w = randn4(&mut rng, (3, 2, 4, 4));
        let b = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let y = tconv4_forward(&x.view(), &w.view(), &b);
        assert_eq!(y.dim(), (2, 2, 6, 8));
        let seed = randn4(&mut rng, (2, 2, 6, 8));
        let (dx, dw, _db) = tconv4_backward(&x.view(), &w.view(), &seed.view());
        let loss = |xa: &Array4<f64>, wa: &Array4<f64>| {
            (tconv4_forward(&xa.view(), &wa.view(), &b) * &seed).sum()
        };
        {
            let mut x2 = x.clone();
            let orig = x2[[1, 2, 1, 3]];
            x2[[1, 2, 1, 3]] = orig + 1e-6;
            let above = loss(&x2, &w);
            x2[[1, 2, 1, 3]] = orig - 1e-6;
            let below = loss(&x2, &w);
            let num = (above - below) / 2e-6;
            assert!((dx[[1, 2, 1, 3]] - num).abs() < 1e-6);
        }
        {
            let orig = w[[2, 1, 0, 3]];
            w[[2, 1, 0, 3]] = orig + 1e-6;
            let above = loss(&x, &w);
            w[[2, 1, 0, 3]] = orig - 1e-6;
            let below = loss(&x, &w);
            w[[2, 1, 0, 3]] = orig;
            let num = (above - below) / 2e-6;
            assert!((dw[[2, 1, 0, 3]] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_backward_is_transpose_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn4(&mut rng, (1, 2, 4, 6));
        let dy = randn4(&mut rng, (1, 2, 9, 13));
        let y = bilinear_forward(&x.view(), 9, 13);
        let dx = bilinear_backward(&dy.view(), 4, 6);
        // <y, dy> == <x, dx> for a linear map and its transpose.
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

// ---------------------------------------------------------------------------
// Channels-outermost padded kernels.
//
// Activations are stored as (C, U, H+2, W+2) with one-pixel zero borders per
// unit. A 3x3 zero-padded convolution then decomposes into nine whole-layer
// GEMMs on contiguous flat views (one per kernel offset): border zeros absorb
// every row-wrap term, so no fixups are needed. Persisted activations keep
// their borders exactly zero; transient conv outputs get borders re-zeroed.
// ---------------------------------------------------------------------------

/// Fixed column-split parallel GEMM: C[:, split] += alpha * A * B[:, split].
/// Split count is constant, so results are bit-identical for any thread pool.
fn par_gemm<F: NdFloat + Send + Sync>(
    alpha: F,
    a: &ArrayView2<F>,
    b: &ArrayView2<F>,
    beta: F,
    c: &mut ndarray::ArrayViewMut2<F>,
) {
    const SPLITS: usize = 4;
    let n = b.dim().1;
    let step = n.div_ceil(SPLITS).max(1);
    let b_chunks: Vec<_> = (0..n)
        .step_by(step)
        .map(|s0| b.slice(s![.., s0..(s0 + step).min(n)]))
        .collect();
    let mut c_chunks: Vec<_> = Vec::with_capacity(b_chunks.len());
    let mut rest = c.view_mut();
    for _ in 0..b_chunks.len() {
        let w = rest.dim().1;
        let (head, tail) = rest.split_at(Axis(1), step.min(w));
        c_chunks.push(head);
        rest = tail;
    }
    b_chunks
        .into_par_iter()
        .zip(c_chunks.into_par_iter())
        .for_each(|(bc, mut cc)| {
            ndarray::linalg::general_mat_mul(alpha, a, &bc, beta, &mut cc);
        });
}

/// Zero the one-pixel border of every (c, u) plane.
pub fn zero_borders<F: NdFloat + Send + Sync>(a: &mut Array4<F>) {
    let (_, _, hp, wp) = a.dim();
    a.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut ac| {
        for mut plane in ac.axis_iter_mut(Axis(0)) {
            plane.slice_mut(s![0, ..]).fill(F::zero());
            plane.slice_mut(s![hp - 1, ..]).fill(F::zero());
            plane.slice_mut(s![.., 0]).fill(F::zero());
            plane.slice_mut(s![.., wp - 1]).fill(F::zero());
        }
    });
}

/// 3x3 convolution in the padded layout: `x` (Cin, U, Hp, Wp) with zero
/// borders, `weight` (Cout, Cin, 3, 3); output (Cout, U, Hp, Wp) with the
/// interior exact and borders zeroed.
pub fn conv3_cop_forward<F: NdFloat + Send + Sync>(
    x: &Array4<F>,
    weight: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
) -> Array4<F> {
    let (cin, u, hp, wp) = x.dim();
    let cout = weight.dim().0;
    let m = u * hp * wp;
    let xf = x.view().into_shape_with_order((cin, m)).expect("contiguous");
    let mut out = Array4::<F>::zeros((cout, u, hp, wp));
    {
        let mut of = out
            .view_mut()
            .into_shape_with_order((cout, m))
            .expect("contiguous");
        if let Some(b) = bias {
            of.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(co, mut row)| row.fill(b[co]));
        }
        for ky in 0..3isize {
            for kx in 0..3isize {
                let wk = weight.slice(s![.., .., ky as usize, kx as usize]);
                let shift = (ky - 1) * wp as isize + (kx - 1);
                let (dst0, src0) = if shift >= 0 {
                    (0usize, shift as usize)
                } else {
                    ((-shift) as usize, 0usize)
                };
                let len = m - shift.unsigned_abs();
                let bsl = xf.slice(s![.., src0..src0 + len]);
                let mut csl = of.slice_mut(s![.., dst0..dst0 + len]);
                par_gemm(F::one(), &wk, &bsl, F::one(), &mut csl);
            }
        }
    }
    zero_borders(&mut out);
    out
}

/// Backward of [`conv3_cop_forward`] (`dy` borders must be zero):
/// returns (dx zero-bordered, dweight, dbias).
pub fn conv3_cop_backward<F: NdFloat + Send + Sync>(
    x: &Array4<F>,
    weight: &ArrayView4<F>,
    dy: &Array4<F>,
    need_dx: bool,
) -> (Option<Array4<F>>, Array4<F>, Array1<F>) {
    let (cin, u, hp, wp) = x.dim();
    let cout = weight.dim().0;
    let m = u * hp * wp;
    let xf = x.view().into_shape_with_order((cin, m)).expect("contiguous");
    let dyf = dy.view().into_shape_with_order((cout, m)).expect("contiguous");

    let dx = need_dx.then(|| {
        let mut w_rot = Array4::<F>::zeros((cin, cout, 3, 3));
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        w_rot[[ci, co, ky, kx]] = weight[[co, ci, 2 - ky, 2 - kx]];
                    }
                }
            }
        }
        conv3_cop_forward(dy, &w_rot.view(), None)
    });

    // dW: one whole-layer GEMM per offset; border zeros kill wrap terms.
    let mut dw = Array4::<F>::zeros((cout, cin, 3, 3));
    let db = dyf.sum_axis(Axis(1));
    let offsets: Vec<(usize, usize)> = (0..3).flat_map(|ky| (0..3).map(move |kx| (ky, kx))).collect();
    let partial: Vec<Array2<F>> = offsets
        .par_iter()
        .map(|&(ky, kx)| {
            let shift = (ky as isize - 1) * wp as isize + (kx as isize - 1);
            let (dst0, src0) = if shift >= 0 {
                (0usize, shift as usize)
            } else {
                ((-shift) as usize, 0usize)
            };
            let len = m - shift.unsigned_abs();
            let dsl = dyf.slice(s![.., dst0..dst0 + len]);
            let xsl = xf.slice(s![.., src0..src0 + len]);
            let mut wk = Array2::<F>::zeros((cout, cin));
            ndarray::linalg::general_mat_mul(F::one(), &dsl, &xsl.t(), F::zero(), &mut wk);
            wk
        })
        .collect();
    for (&(ky, kx), wk) in offsets.iter().zip(partial) {
        dw.slice_mut(s![.., .., ky, kx]).assign(&wk);
    }
    (dx, dw, db)
}

/// BatchNorm statistics in the padded layout; border zeros contribute nothing
/// to the sums, and `n_interior` counts only real pixels.
pub fn batchnorm_cop_forward_train<F: NdFloat + Send + Sync>(
    x: &Array4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    eps: f64,
) -> BnForward<F> {
    let (c, u, hp, wp) = x.dim();
    let n = F::from(u * (hp - 2) * (wp - 2)).expect("fits");
    let epsf = F::from(eps).expect("fits");
    let mut y = Array4::<F>::zeros((c, u, hp, wp));
    let mut xhat = Array4::<F>::zeros((c, u, hp, wp));
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);

    let stats: Vec<(F, F)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let lane = x.index_axis(Axis(0), ci);
            let lane = lane.to_slice().expect("contiguous channel");
            let mut s0 = F::zero();
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            let mut s3 = F::zero();
            let mut q0 = F::zero();
            let mut q1 = F::zero();
            let mut q2 = F::zero();
            let mut q3 = F::zero();
            let chunks = lane.chunks_exact(4);
            let rem = chunks.remainder();
            for ch in chunks {
                s0 += ch[0];
                q0 += ch[0] * ch[0];
                s1 += ch[1];
                q1 += ch[1] * ch[1];
                s2 += ch[2];
                q2 += ch[2] * ch[2];
                s3 += ch[3];
                q3 += ch[3] * ch[3];
            }
            let mut sum = (s0 + s1) + (s2 + s3);
            let mut sumsq = (q0 + q1) + (q2 + q3);
            for &v in rem {
                sum += v;
                sumsq += v * v;
            }
            let mu = sum / n;
            (mu, sumsq / n - mu * mu)
        })
        .collect();
    for (ci, &(mu, v)) in stats.iter().enumerate() {
        mean[ci] = mu;
        var[ci] = v;
    }

    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(xhat.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ci, (mut yc, mut xoc))| {
            let inv = (var[ci] + epsf).sqrt().recip();
            let (g, b, mu) = (gamma[ci], beta[ci], mean[ci]);
            let xc = x.index_axis(Axis(0), ci);
            for ui in 0..u {
                for yy in 1..hp - 1 {
                    let xl = xc.slice(s![ui, yy, 1..wp - 1]);
                    let xl = xl.to_slice().expect("contiguous row");
                    let mut yl = yc.slice_mut(s![ui, yy, 1..wp - 1]);
                    let yl = yl.as_slice_mut().expect("contiguous row");
                    let mut xol = xoc.slice_mut(s![ui, yy, 1..wp - 1]);
                    let xol = xol.as_slice_mut().expect("contiguous row");
                    for i in 0..xl.len() {
                        let xh = (xl[i] - mu) * inv;
                        xol[i] = xh;
                        yl[i] = g * xh + b;
                    }
                }
            }
        });

    BnForward { y, xhat, mean, var }
}

/// Inference BatchNorm in the padded layout (interior writes only).
pub fn batchnorm_cop_forward_eval<F: NdFloat + Send + Sync>(
    x: &Array4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    running_mean: &Array1<F>,
    running_var: &Array1<F>,
    eps: f64,
) -> Array4<F> {
    let (c, u, hp, wp) = x.dim();
    let epsf = F::from(eps).expect("fits");
    let mut y = Array4::<F>::zeros((c, u, hp, wp));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut yc)| {
            let inv = (running_var[ci] + epsf).sqrt().recip();
            let (g, b, mu) = (gamma[ci], beta[ci], running_mean[ci]);
            let xc = x.index_axis(Axis(0), ci);
            for ui in 0..u {
                for yy in 1..hp - 1 {
                    let xl = xc.slice(s![ui, yy, 1..wp - 1]);
                    let xl = xl.to_slice().expect("contiguous row");
                    let mut yl = yc.slice_mut(s![ui, yy, 1..wp - 1]);
                    let yl = yl.as_slice_mut().expect("contiguous row");
                    for i in 0..xl.len() {
                        yl[i] = g * (xl[i] - mu) * inv + b;
                    }
                }
            }
        });
    y
}

/// Backward of [`batchnorm_cop_forward_train`]; `dy` borders must be zero.
pub fn batchnorm_cop_backward<F: NdFloat + Send + Sync>(
    dy: &Array4<F>,
    xhat: &Array4<F>,
    gamma: &Array1<F>,
    var: &Array1<F>,
    eps: f64,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (c, u, hp, wp) = dy.dim();
    let n = F::from(u * (hp - 2) * (wp - 2)).expect("fits");
    let epsf = F::from(eps).expect("fits");
    let mut dx = Array4::<F>::zeros((c, u, hp, wp));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);

    let grads: Vec<(F, F)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let dl = dy.index_axis(Axis(0), ci);
            let dl = dl.to_slice().expect("contiguous channel");
            let xl = xhat.index_axis(Axis(0), ci);
            let xl = xl.to_slice().expect("contiguous channel");
            let mut sum_dy = F::zero();
            let mut sum_dyx = F::zero();
            for i in 0..dl.len() {
                sum_dy += dl[i];
                sum_dyx += dl[i] * xl[i];
            }
            (sum_dy, sum_dyx)
        })
        .collect();
    for (ci, &(sdy, sdyx)) in grads.iter().enumerate() {
        dbeta[ci] = sdy;
        dgamma[ci] = sdyx;
    }

    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut dxc)| {
            let inv = (var[ci] + epsf).sqrt().recip();
            let scale = gamma[ci] * inv;
            let mean_dy = dbeta[ci] / n;
            let mean_dyx = dgamma[ci] / n;
            let dc = dy.index_axis(Axis(0), ci);
            let xc = xhat.index_axis(Axis(0), ci);
            for ui in 0..u {
                for yy in 1..hp - 1 {
                    let dl = dc.slice(s![ui, yy, 1..wp - 1]);
                    let dl = dl.to_slice().expect("contiguous row");
                    let xl = xc.slice(s![ui, yy, 1..wp - 1]);
                    let xl = xl.to_slice().expect("contiguous row");
                    let mut ol = dxc.slice_mut(s![ui, yy, 1..wp - 1]);
                    let ol = ol.as_slice_mut().expect("contiguous row");
                    for i in 0..dl.len() {
                        ol[i] = scale * (dl[i] - mean_dy - xl[i] * mean_dyx);
                    }
                }
            }
        });
    (dx, dgamma, dbeta)
}

/// 2x2 average pooling in the padded layout (floor semantics).
pub fn avgpool2_cop_forward<F: NdFloat + Send + Sync>(x: &Array4<F>) -> Array4<F> {
    let (c, u, hp, wp) = x.dim();
    let (h, w) = (hp - 2, wp - 2);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from(0.25).expect("fits");
    let mut out = Array4::<F>::zeros((c, u, oh + 2, ow + 2));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut oc)| {
            let xc = x.index_axis(Axis(0), ci);
            for ui in 0..u {
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = xc[[ui, 1 + 2 * y, 1 + 2 * xx]]
                            + xc[[ui, 1 + 2 * y, 2 + 2 * xx]]
                            + xc[[ui, 2 + 2 * y, 1 + 2 * xx]]
                            + xc[[ui, 2 + 2 * y, 2 + 2 * xx]];
                        oc[[ui, y + 1, xx + 1]] = s * quarter;
                    }
                }
            }
        });
    out
}

/// Backward of [`avgpool2_cop_forward`] given the input interior size.
pub fn avgpool2_cop_backward<F: NdFloat + Send + Sync>(
    dy: &Array4<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (c, u, ohp, owp) = dy.dim();
    let (oh, ow) = (ohp - 2, owp - 2);
    let quarter = F::from(0.25).expect("fits");
    let mut dx = Array4::<F>::zeros((c, u, h + 2, w + 2));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut dc)| {
            let dyc = dy.index_axis(Axis(0), ci);
            for ui in 0..u {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = dyc[[ui, y + 1, xx + 1]] * quarter;
                        dc[[ui, 1 + 2 * y, 1 + 2 * xx]] = g;
                        dc[[ui, 1 + 2 * y, 2 + 2 * xx]] = g;
                        dc[[ui, 2 + 2 * y, 1 + 2 * xx]] = g;
                        dc[[ui, 2 + 2 * y, 2 + 2 * xx]] = g;
                    }
                }
            }
        });
    dx
}

#[cfg(test)]
mod cop_tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pack a (U, C, H, W) tensor into the padded channels-outer layout.
    fn to_cop(x: &Array4<f64>) -> Array4<f64> {
        let (u, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((c, u, h + 2, w + 2));
        for ui in 0..u {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ci, ui, y + 1, xx + 1]] = x[[ui, ci, y, xx]];
                    }
                }
            }
        }
        out
    }

    fn from_cop(x: &Array4<f64>) -> Array4<f64> {
        let (c, u, hp, wp) = x.dim();
        let mut out = Array4::<f64>::zeros((u, c, hp - 2, wp - 2));
        for ui in 0..u {
            for ci in 0..c {
                for y in 0..hp - 2 {
                    for xx in 0..wp - 2 {
                        out[[ui, ci, y, xx]] = x[[ci, ui, y + 1, xx + 1]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cop_conv_matches_unit_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array4::from_shape_fn((3, 2, 5, 7), |_| rng.random_range(-1.0..1.0));
        let w = Array4::from_shape_fn((4, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b = ndarray::Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let reference = conv3_forward(&x.view(), &w.view(), &b);
        let cop = conv3_cop_forward(&to_cop(&x), &w.view(), Some(&b));
        let back = from_cop(&cop);
        for (a, r) in back.iter().zip(reference.iter()) {
            assert!((a - r).abs() < 1e-12, "{a} vs {r}");
        }
    }

    #[test]
    fn cop_conv_backward_matches_unit_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((3, 2, 5, 7), |_| rng.random_range(-1.0..1.0));
        let w = Array4::from_shape_fn((4, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let dy = Array4::from_shape_fn((3, 4, 5, 7), |_| rng.random_range(-1.0..1.0));
        let (dx_ref, dw_ref, db_ref) = conv3_backward(&x.view(), &w.view(), &dy.view(), true);
        let (dx_cop, dw_cop, db_cop) =
            conv3_cop_backward(&to_cop(&x), &w.view(), &to_cop(&dy), true);
        let dx_cop = from_cop(&dx_cop.unwrap());
        for (a, r) in dx_cop.iter().zip(dx_ref.unwrap().iter()) {
            assert!((a - r).abs() < 1e-10);
        }
        for (a, r) in dw_cop.iter().zip(dw_ref.iter()) {
            assert!((a - r).abs() < 1e-10);
        }
        for (a, r) in db_cop.iter().zip(db_ref.iter()) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn cop_batchnorm_matches_unit_batchnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array4::from_shape_fn((4, 3, 4, 6), |_| rng.random_range(-1.0..1.0));
        let g = ndarray::Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5));
        let b = ndarray::Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5));
        let reference = batchnorm_forward_train(&x.view(), &g, &b, 1e-5);
        let cop = batchnorm_cop_forward_train(&to_cop(&x), &g, &b, 1e-5);
        for ci in 0..3 {
            assert!((cop.mean[ci] - reference.mean[ci]).abs() < 1e-12);
            assert!((cop.var[ci] - reference.var[ci]).abs() < 1e-12);
        }
        let y = from_cop(&cop.y);
        for (a, r) in y.iter().zip(reference.y.iter()) {
            assert!((a - r).abs() < 1e-12);
        }
        // backward
        let dy = Array4::from_shape_fn((4, 3, 4, 6), |_| rng.random_range(-1.0..1.0));
        let (dx_ref, dg_ref, db_ref) =
            batchnorm_backward(&dy.view(), &reference.xhat.view(), &g, &reference.var, 1e-5);
        let (dx_cop, dg_cop, db_cop) =
            batchnorm_cop_backward(&to_cop(&dy), &cop.xhat, &g, &cop.var, 1e-5);
        let dx_cop = from_cop(&dx_cop);
        for (a, r) in dx_cop.iter().zip(dx_ref.iter()) {
            assert!((a - r).abs() < 1e-10);
        }
        for ci in 0..3 {
            assert!((dg_cop[ci] - dg_ref[ci]).abs() < 1e-10);
            assert!((db_cop[ci] - db_ref[ci]).abs() < 1e-10);
        }
    }

    #[test]
    fn cop_pool_roundtrip_matches_unit_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array4::from_shape_fn((2, 3, 6, 8), |_| rng.random_range(-1.0..1.0));
        let reference = avgpool2_forward(&x.view());
        let cop = avgpool2_cop_forward(&to_cop(&x));
        let back = from_cop(&cop);
        for (a, r) in back.iter().zip(reference.iter()) {
            assert!((a - r).abs() < 1e-12);
        }
        let dy = Array4::from_shape_fn((2, 3, 3, 4), |_| rng.random_range(-1.0..1.0));
        let ref_dx = avgpool2_backward(&dy.view(), 6, 8);
        let cop_dx = from_cop(&avgpool2_cop_backward(&to_cop(&dy), 6, 8));
        for (a, r) in cop_dx.iter().zip(ref_dx.iter()) {
            assert!((a - r).abs() < 1e-12);
        }
    }
}

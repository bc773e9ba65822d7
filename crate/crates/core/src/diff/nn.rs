//! Structured differentiable primitives: convolutions, nearest upsampling,
//! bilinear/trilinear gathers, batched epipolar attention, and the masked
//! cross-view variance.
//!
//! Gather coordinates are plain data, not graph nodes: scene geometry is
//! fixed per step, so gradients flow only into the gathered maps/volumes.

use std::sync::Arc;

use crate::diff::graph::{GradSink, Var};
use crate::diff::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// 2D convolution of `[Cin, H, W]` with kernel `[Cout, Cin, KH, KW]`,
/// stride 1 and zero "same" padding. Bias is applied separately.
pub fn conv2d<F: Scalar>(x: &Var<F>, w: &Var<F>) -> Result<Var<F>> {
    let xv = x.value();
    let wv = w.value();
    if xv.ndim() != 3 || wv.ndim() != 4 || xv.shape()[0] != wv.shape()[1] {
        return Err(Error::Shape(format!(
            "conv2d expects [Cin,H,W] x [Cout,Cin,KH,KW], got {:?} x {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    if wv.shape()[2] % 2 == 0 || wv.shape()[3] % 2 == 0 {
        return Err(Error::Shape("conv2d kernel dims must be odd".into()));
    }
    let (cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    let out = conv2d_forward(xv.data(), wv.data(), cin, h, wdt, cout, kh, kw);
    let (xid, wid) = (x.id, w.id);
    let (xneeds, wneeds) = (x.needs_grad(), w.needs_grad());
    Ok(x.graph().push(
        Tensor::from_vec(vec![cout, h, wdt], out),
        xneeds || wneeds,
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            if xneeds {
                let dx = conv2d_backward_input(g.data(), wv.data(), cin, h, wdt, cout, kh, kw);
                sink(xid, Tensor::from_vec(vec![cin, h, wdt], dx));
            }
            if wneeds {
                let dw = conv2d_backward_weight(g.data(), xv.data(), cin, h, wdt, cout, kh, kw);
                sink(wid, Tensor::from_vec(vec![cout, cin, kh, kw], dw));
            }
        })),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); cout * h * wdt];
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((wdt as isize - dx).min(wdt as isize)) as usize;
                    for y in y_lo..y_hi {
                        let src_row = ((ci * h) as isize + y as isize + dy) as usize * wdt;
                        let dst_row = (co * h + y) * wdt;
                        let src = &x[src_row + (x_lo as isize + dx) as usize
                            ..src_row + (x_hi as isize + dx) as usize];
                        let dst = &mut out[dst_row + x_lo..dst_row + x_hi];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<F: Scalar>(
    g: &[F],
    w: &[F],
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); cin * h * wdt];
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx_off = kx as isize - pw;
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    // d in[ci, yi, xi] += wv * g[co, yi - dy, xi - dx]
                    let y_lo = dy.max(0) as usize;
                    let y_hi = ((h as isize + dy).min(h as isize)) as usize;
                    let x_lo = dx_off.max(0) as usize;
                    let x_hi = ((wdt as isize + dx_off).min(wdt as isize)) as usize;
                    for yi in y_lo..y_hi {
                        let g_row = ((co * h) as isize + yi as isize - dy) as usize * wdt;
                        let d_row = (ci * h + yi) * wdt;
                        let src = &g[g_row + (x_lo as isize - dx_off) as usize
                            ..g_row + (x_hi as isize - dx_off) as usize];
                        let dst = &mut dx[d_row + x_lo..d_row + x_hi];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight<F: Scalar>(
    g: &[F],
    x: &[F],
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<F> {
    let mut dw = vec![F::zero(); cout * cin * kh * kw];
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                let dy = ky as isize - ph;
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((wdt as isize - dx).min(wdt as isize)) as usize;
                    let mut acc = F::zero();
                    for y in y_lo..y_hi {
                        let g_row = (co * h + y) * wdt;
                        let x_row = ((ci * h) as isize + y as isize + dy) as usize * wdt;
                        let gs = &g[g_row + x_lo..g_row + x_hi];
                        let xs = &x[x_row + (x_lo as isize + dx) as usize
                            ..x_row + (x_hi as isize + dx) as usize];
                        for (&gv, &xv) in gs.iter().zip(xs.iter()) {
                            acc += gv * xv;
                        }
                    }
                    dw[((co * cin + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dw
}

/// 3D convolution of `[Cin, D, H, W]` with kernel `[Cout, Cin, 3, 3, 3]`,
/// zero "same" padding, stride 1 or 2 (output dims `ceil(dim/stride)`).
pub fn conv3d<F: Scalar>(x: &Var<F>, w: &Var<F>, stride: usize) -> Result<Var<F>> {
    let xv = x.value();
    let wv = w.value();
    if xv.ndim() != 4 || wv.ndim() != 5 || xv.shape()[0] != wv.shape()[1] {
        return Err(Error::Shape(format!(
            "conv3d expects [Cin,D,H,W] x [Cout,Cin,KD,KH,KW], got {:?} x {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    if wv.shape()[2..] != [3, 3, 3] {
        return Err(Error::Shape("conv3d kernel must be 3x3x3".into()));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Shape(format!("conv3d stride must be 1 or 2, got {stride}")));
    }
    let dims = Dims3 {
        cin: xv.shape()[0],
        d: xv.shape()[1],
        h: xv.shape()[2],
        w: xv.shape()[3],
        cout: wv.shape()[0],
        stride,
    };
    let (d2, h2, w2) = dims.out_dims();
    let out = conv3d_forward(xv.data(), wv.data(), &dims);
    let (xid, wid) = (x.id, w.id);
    let (xneeds, wneeds) = (x.needs_grad(), w.needs_grad());
    let in_shape = xv.shape().to_vec();
    let w_shape = wv.shape().to_vec();
    Ok(x.graph().push(
        Tensor::from_vec(vec![dims.cout, d2, h2, w2], out),
        xneeds || wneeds,
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            if xneeds {
                let dx = conv3d_backward_input(g.data(), wv.data(), &dims);
                sink(xid, Tensor::from_vec(in_shape.clone(), dx));
            }
            if wneeds {
                let dw = conv3d_backward_weight(g.data(), xv.data(), &dims);
                sink(wid, Tensor::from_vec(w_shape.clone(), dw));
            }
        })),
    ))
}

#[derive(Clone, Copy)]
struct Dims3 {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
}

impl Dims3 {
    fn out_dims(&self) -> (usize, usize, usize) {
        let s = self.stride;
        (self.d.div_ceil(s), self.h.div_ceil(s), self.w.div_ceil(s))
    }
}

/// Output index range `[lo, hi)` such that `stride * o + off` lies in `[0, n)`.
fn out_range(n: usize, stride: usize, off: isize, out_n: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((n as isize - off - 1).div_euclid(s) + 1).min(out_n as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv3d_forward<F: Scalar>(x: &[F], w: &[F], dims: &Dims3) -> Vec<F> {
    let (d2, h2, w2) = dims.out_dims();
    let s = dims.stride;
    let mut out = vec![F::zero(); dims.cout * d2 * h2 * w2];
    for co in 0..dims.cout {
        for ci in 0..dims.cin {
            for kz in 0..3usize {
                let oz = kz as isize - 1;
                let (z_lo, z_hi) = out_range(dims.d, s, oz, d2);
                for ky in 0..3usize {
                    let oy = ky as isize - 1;
                    let (y_lo, y_hi) = out_range(dims.h, s, oy, h2);
                    for kx in 0..3usize {
                        let ox = kx as isize - 1;
                        let (x_lo, x_hi) = out_range(dims.w, s, ox, w2);
                        let wv = w[(((co * dims.cin + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        for zo in z_lo..z_hi {
                            let zi = (s * zo) as isize + oz;
                            for yo in y_lo..y_hi {
                                let yi = (s * yo) as isize + oy;
                                let src_base =
                                    ((ci * dims.d + zi as usize) * dims.h + yi as usize) * dims.w;
                                let dst_base = ((co * d2 + zo) * h2 + yo) * w2;
                                if s == 1 {
                                    let start = (src_base as isize + ox + x_lo as isize) as usize;
                                    let src = &x[start..start + (x_hi - x_lo)];
                                    let dst = &mut out[dst_base + x_lo..dst_base + x_hi];
                                    for (d, &v) in dst.iter_mut().zip(src.iter()) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for xo in x_lo..x_hi {
                                        let xi = (s * xo) as isize + ox;
                                        out[dst_base + xo] += wv * x[(src_base as isize + xi) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward_input<F: Scalar>(g: &[F], w: &[F], dims: &Dims3) -> Vec<F> {
    let (d2, h2, w2) = dims.out_dims();
    let s = dims.stride;
    let mut dx = vec![F::zero(); dims.cin * dims.d * dims.h * dims.w];
    for co in 0..dims.cout {
        for ci in 0..dims.cin {
            for kz in 0..3usize {
                let oz = kz as isize - 1;
                let (z_lo, z_hi) = out_range(dims.d, s, oz, d2);
                for ky in 0..3usize {
                    let oy = ky as isize - 1;
                    let (y_lo, y_hi) = out_range(dims.h, s, oy, h2);
                    for kx in 0..3usize {
                        let ox = kx as isize - 1;
                        let (x_lo, x_hi) = out_range(dims.w, s, ox, w2);
                        let wv = w[(((co * dims.cin + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        for zo in z_lo..z_hi {
                            let zi = (s * zo) as isize + oz;
                            for yo in y_lo..y_hi {
                                let yi = (s * yo) as isize + oy;
                                let dst_base =
                                    ((ci * dims.d + zi as usize) * dims.h + yi as usize) * dims.w;
                                let src_base = ((co * d2 + zo) * h2 + yo) * w2;
                                if s == 1 {
                                    let src = &g[src_base + x_lo..src_base + x_hi];
                                    let start = (dst_base as isize + ox + x_lo as isize) as usize;
                                    let dst = &mut dx[start..start + (x_hi - x_lo)];
                                    for (d, &v) in dst.iter_mut().zip(src.iter()) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for xo in x_lo..x_hi {
                                        let xi = (s * xo) as isize + ox;
                                        dx[(dst_base as isize + xi) as usize] +=
                                            wv * g[src_base + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv3d_backward_weight<F: Scalar>(g: &[F], x: &[F], dims: &Dims3) -> Vec<F> {
    let (d2, h2, w2) = dims.out_dims();
    let s = dims.stride;
    let mut dw = vec![F::zero(); dims.cout * dims.cin * 27];
    for co in 0..dims.cout {
        for ci in 0..dims.cin {
            for kz in 0..3usize {
                let oz = kz as isize - 1;
                let (z_lo, z_hi) = out_range(dims.d, s, oz, d2);
                for ky in 0..3usize {
                    let oy = ky as isize - 1;
                    let (y_lo, y_hi) = out_range(dims.h, s, oy, h2);
                    for kx in 0..3usize {
                        let ox = kx as isize - 1;
                        let (x_lo, x_hi) = out_range(dims.w, s, ox, w2);
                        let mut acc = F::zero();
                        for zo in z_lo..z_hi {
                            let zi = (s * zo) as isize + oz;
                            for yo in y_lo..y_hi {
                                let yi = (s * yo) as isize + oy;
                                let x_base =
                                    ((ci * dims.d + zi as usize) * dims.h + yi as usize) * dims.w;
                                let g_base = ((co * d2 + zo) * h2 + yo) * w2;
                                if s == 1 {
                                    let start = (x_base as isize + ox + x_lo as isize) as usize;
                                    let xs = &x[start..start + (x_hi - x_lo)];
                                    let gs = &g[g_base + x_lo..g_base + x_hi];
                                    for (&xv, &gv) in xs.iter().zip(gs.iter()) {
                                        acc += xv * gv;
                                    }
                                } else {
                                    for xo in x_lo..x_hi {
                                        let xi = (s * xo) as isize + ox;
                                        acc += x[(x_base as isize + xi) as usize] * g[g_base + xo];
                                    }
                                }
                            }
                        }
                        dw[(((co * dims.cin + ci) * 3 + kz) * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
    }
    dw
}

/// Nearest-neighbor upsampling of `[C, D, H, W]` by 2x per spatial axis,
/// cropped to `target` dims (handles odd originals).
pub fn upsample_nearest3d<F: Scalar>(x: &Var<F>, target: (usize, usize, usize)) -> Result<Var<F>> {
    let xv = x.value();
    if xv.ndim() != 4 {
        return Err(Error::Shape(format!(
            "upsample expects [C,D,H,W], got {:?}",
            xv.shape()
        )));
    }
    let (c, d, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (d2, h2, w2) = target;
    if d2 > 2 * d || h2 > 2 * h || w2 > 2 * w || d2.div_ceil(2) != d || h2.div_ceil(2) != h || w2.div_ceil(2) != w {
        return Err(Error::Shape(format!(
            "upsample target {target:?} incompatible with input {:?}",
            xv.shape()
        )));
    }
    let xd = xv.data();
    let mut out = vec![F::zero(); c * d2 * h2 * w2];
    for ci in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                let src_row = ((ci * d + z / 2) * h + y / 2) * w;
                let dst_row = ((ci * d2 + z) * h2 + y) * w2;
                for x_o in 0..w2 {
                    out[dst_row + x_o] = xd[src_row + x_o / 2];
                }
            }
        }
    }
    let xid = x.id;
    let in_shape = xv.shape().to_vec();
    Ok(x.graph().push(
        Tensor::from_vec(vec![c, d2, h2, w2], out),
        x.needs_grad(),
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            let gd = g.data();
            let mut dx = vec![F::zero(); c * d * h * w];
            for ci in 0..c {
                for z in 0..d2 {
                    for y in 0..h2 {
                        let dst_row = ((ci * d + z / 2) * h + y / 2) * w;
                        let src_row = ((ci * d2 + z) * h2 + y) * w2;
                        for x_o in 0..w2 {
                            dx[dst_row + x_o / 2] += gd[src_row + x_o];
                        }
                    }
                }
            }
            sink(xid, Tensor::from_vec(in_shape.clone(), dx));
        })),
    ))
}

/// Bilinear sample of a `[H, W, C]` map at fractional pixel coordinates
/// `(u, v)` (u along columns). Out-of-bounds corners contribute `fill`.
/// Returns `[n, C]`.
pub fn bilinear_gather<F: Scalar>(
    map: &Var<F>,
    coords: Arc<Vec<[F; 2]>>,
    fill: F,
) -> Result<Var<F>> {
    let mv = map.value();
    if mv.ndim() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_gather expects [H,W,C], got {:?}",
            mv.shape()
        )));
    }
    let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
    let n = coords.len();
    let md = mv.data();
    let mut out = vec![F::zero(); n * c];
    for (i, uv) in coords.iter().enumerate() {
        let (corners, weights) = bilinear_corners(uv[0], uv[1]);
        let dst = &mut out[i * c..(i + 1) * c];
        for (&(cx, cy), &wt) in corners.iter().zip(weights.iter()) {
            if wt == F::zero() {
                continue;
            }
            if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                let src = &md[((cy as usize) * w + cx as usize) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += wt * s;
                }
            } else if fill != F::zero() {
                for d in dst.iter_mut() {
                    *d += wt * fill;
                }
            }
        }
    }
    let mid = map.id;
    let mshape = mv.shape().to_vec();
    let coords_b = Arc::clone(&coords);
    Ok(map.graph().push(
        Tensor::from_vec(vec![n, c], out),
        map.needs_grad(),
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            let gd = g.data();
            let mut dm = vec![F::zero(); h * w * c];
            for (i, uv) in coords_b.iter().enumerate() {
                let (corners, weights) = bilinear_corners(uv[0], uv[1]);
                let src = &gd[i * c..(i + 1) * c];
                for (&(cx, cy), &wt) in corners.iter().zip(weights.iter()) {
                    if wt == F::zero() {
                        continue;
                    }
                    if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                        let dst = &mut dm[((cy as usize) * w + cx as usize) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += wt * s;
                        }
                    }
                }
            }
            sink(mid, Tensor::from_vec(mshape.clone(), dm));
        })),
    ))
}

#[allow(clippy::type_complexity)]
fn bilinear_corners<F: Scalar>(u: F, v: F) -> ([(isize, isize); 4], [F; 4]) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0.to_f64_lossy() as isize, y0.to_f64_lossy() as isize);
    let one = F::one();
    (
        [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)],
        [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ],
    )
}

/// Whether a bilinear sample at `(u, v)` lies fully inside a `h x w` map.
pub fn bilinear_in_bounds<F: Scalar>(u: F, v: F, h: usize, w: usize) -> bool {
    u >= F::zero() && v >= F::zero() && u <= F::cast((w - 1) as f64) && v <= F::cast((h - 1) as f64)
}

/// Trilinear sample of a `[H, W, D, C]` volume at fractional coordinates
/// `(u, v, p)` = (column, row, depth plane). Coordinates are clamped to the
/// boundary. Returns `[n, C]`.
pub fn trilinear_gather<F: Scalar>(vol: &Var<F>, coords: Arc<Vec<[F; 3]>>) -> Result<Var<F>> {
    let vv = vol.value();
    if vv.ndim() != 4 {
        return Err(Error::Shape(format!(
            "trilinear_gather expects [H,W,D,C], got {:?}",
            vv.shape()
        )));
    }
    let (h, w, d, c) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
    let n = coords.len();
    let vd = vv.data();
    let mut out = vec![F::zero(); n * c];
    for (i, uvp) in coords.iter().enumerate() {
        let cells = trilinear_cells(uvp, h, w, d);
        let dst = &mut out[i * c..(i + 1) * c];
        for &(off, wt) in &cells {
            if wt == F::zero() {
                continue;
            }
            let src = &vd[off * c..(off + 1) * c];
            for (dv, &s) in dst.iter_mut().zip(src.iter()) {
                *dv += wt * s;
            }
        }
    }
    let vid = vol.id;
    let vshape = vv.shape().to_vec();
    let coords_b = Arc::clone(&coords);
    Ok(vol.graph().push(
        Tensor::from_vec(vec![n, c], out),
        vol.needs_grad(),
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            let gd = g.data();
            let mut dvol = vec![F::zero(); h * w * d * c];
            for (i, uvp) in coords_b.iter().enumerate() {
                let cells = trilinear_cells(uvp, h, w, d);
                let src = &gd[i * c..(i + 1) * c];
                for &(off, wt) in &cells {
                    if wt == F::zero() {
                        continue;
                    }
                    let dst = &mut dvol[off * c..(off + 1) * c];
                    for (dv, &s) in dst.iter_mut().zip(src.iter()) {
                        *dv += wt * s;
                    }
                }
            }
            sink(vid, Tensor::from_vec(vshape.clone(), dvol));
        })),
    ))
}

/// Flat cell offsets (voxel index into `[H, W, D]`) and weights of the 8
/// trilinear corners after clamping.
fn trilinear_cells<F: Scalar>(uvp: &[F; 3], h: usize, w: usize, d: usize) -> [(usize, F); 8] {
    let clampf = |x: F, hi: usize| -> F {
        let hi = F::cast((hi - 1) as f64);
        if x < F::zero() {
            F::zero()
        } else if x > hi {
            hi
        } else {
            x
        }
    };
    let u = clampf(uvp[0], w);
    let v = clampf(uvp[1], h);
    let p = clampf(uvp[2], d);
    let x0f = u.floor();
    let y0f = v.floor();
    let z0f = p.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let fz = p - z0f;
    let x0 = x0f.to_f64_lossy() as usize;
    let y0 = y0f.to_f64_lossy() as usize;
    let z0 = z0f.to_f64_lossy() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(d - 1);
    let one = F::one();
    let idx = |y: usize, x: usize, z: usize| (y * w + x) * d + z;
    [
        (idx(y0, x0, z0), (one - fx) * (one - fy) * (one - fz)),
        (idx(y0, x1, z0), fx * (one - fy) * (one - fz)),
        (idx(y1, x0, z0), (one - fx) * fy * (one - fz)),
        (idx(y1, x1, z0), fx * fy * (one - fz)),
        (idx(y0, x0, z1), (one - fx) * (one - fy) * fz),
        (idx(y0, x1, z1), fx * (one - fy) * fz),
        (idx(y1, x0, z1), (one - fx) * fy * fz),
        (idx(y1, x1, z1), fx * fy * fz),
    ]
}

/// Batched attention `softmax(Q Kᵀ) V` over `[B, n, c] x [B, m, c] x [B, m, cv]`,
/// without logit scaling. Softmax rows use max-subtraction.
pub fn batched_attention<F: Scalar>(q: &Var<F>, k: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
    let qv = q.value();
    let kv = k.value();
    let vv = v.value();
    if qv.ndim() != 3 || kv.ndim() != 3 || vv.ndim() != 3 {
        return Err(Error::Shape("attention operands must be [B, rows, cols]".into()));
    }
    let (b, n, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let (bk, m, ck) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
    let (bv2, mv2, cv) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
    if bk != b || bv2 != b || mv2 != m || ck != c {
        return Err(Error::Shape(format!(
            "attention shape mismatch: Q {:?}, K {:?}, V {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    if m == 0 {
        return Err(Error::DegenerateAttention("empty key/value set".into()));
    }
    let qd = qv.data();
    let kd = kv.data();
    let vd = vv.data();
    let mut attn = vec![F::zero(); b * n * m];
    let mut out = vec![F::zero(); b * n * cv];
    for bi in 0..b {
        let qb = &qd[bi * n * c..(bi + 1) * n * c];
        let kb = &kd[bi * m * c..(bi + 1) * m * c];
        let vb = &vd[bi * m * cv..(bi + 1) * m * cv];
        let ab = &mut attn[bi * n * m..(bi + 1) * n * m];
        // logits
        for i in 0..n {
            let qrow = &qb[i * c..(i + 1) * c];
            let arow = &mut ab[i * m..(i + 1) * m];
            for (j, a) in arow.iter_mut().enumerate() {
                let krow = &kb[j * c..(j + 1) * c];
                let mut acc = F::zero();
                for (&x, &y) in qrow.iter().zip(krow.iter()) {
                    acc += x * y;
                }
                *a = acc;
            }
        }
        // softmax rows in place
        for i in 0..n {
            let arow = &mut ab[i * m..(i + 1) * m];
            let mut mx = arow[0];
            for &x in arow.iter() {
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = F::zero();
            for x in arow.iter_mut() {
                *x = (*x - mx).exp();
                denom += *x;
            }
            let inv = F::one() / denom;
            for x in arow.iter_mut() {
                *x *= inv;
            }
        }
        // out = A V
        let ob = &mut out[bi * n * cv..(bi + 1) * n * cv];
        for i in 0..n {
            let arow = &ab[i * m..(i + 1) * m];
            let orow = &mut ob[i * cv..(i + 1) * cv];
            for (j, &aij) in arow.iter().enumerate() {
                let vrow = &vb[j * cv..(j + 1) * cv];
                for (o, &vv2) in orow.iter_mut().zip(vrow.iter()) {
                    *o += aij * vv2;
                }
            }
        }
    }
    let attn = Tensor::from_vec(vec![b, n, m], attn);
    let (qid, kid, vid) = (q.id, k.id, v.id);
    let (qneeds, kneeds, vneeds) = (q.needs_grad(), k.needs_grad(), v.needs_grad());
    Ok(q.graph().push(
        Tensor::from_vec(vec![b, n, cv], out),
        qneeds || kneeds || vneeds,
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            let gd = g.data();
            let ad = attn.data();
            let qd = qv.data();
            let kd = kv.data();
            let vd = vv.data();
            let mut dq = if qneeds { vec![F::zero(); b * n * c] } else { Vec::new() };
            let mut dk = if kneeds { vec![F::zero(); b * m * c] } else { Vec::new() };
            let mut dv = if vneeds { vec![F::zero(); b * m * cv] } else { Vec::new() };
            let mut ds = vec![F::zero(); n * m];
            for bi in 0..b {
                let gb = &gd[bi * n * cv..(bi + 1) * n * cv];
                let ab = &ad[bi * n * m..(bi + 1) * n * m];
                let vb = &vd[bi * m * cv..(bi + 1) * m * cv];
                if vneeds {
                    let dvb = &mut dv[bi * m * cv..(bi + 1) * m * cv];
                    // dV = A^T g
                    for i in 0..n {
                        let arow = &ab[i * m..(i + 1) * m];
                        let grow = &gb[i * cv..(i + 1) * cv];
                        for (j, &aij) in arow.iter().enumerate() {
                            let drow = &mut dvb[j * cv..(j + 1) * cv];
                            for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                                *d += aij * gv;
                            }
                        }
                    }
                }
                if qneeds || kneeds {
                    // dS = A ⊙ (dA − rowsum(dA ⊙ A)), dA = g V^T
                    for i in 0..n {
                        let grow = &gb[i * cv..(i + 1) * cv];
                        let arow = &ab[i * m..(i + 1) * m];
                        let srow = &mut ds[i * m..(i + 1) * m];
                        let mut rowdot = F::zero();
                        for j in 0..m {
                            let vrow = &vb[j * cv..(j + 1) * cv];
                            let mut da = F::zero();
                            for (&gv, &vv2) in grow.iter().zip(vrow.iter()) {
                                da += gv * vv2;
                            }
                            srow[j] = da;
                            rowdot += da * arow[j];
                        }
                        for j in 0..m {
                            srow[j] = arow[j] * (srow[j] - rowdot);
                        }
                    }
                    let qb = &qd[bi * n * c..(bi + 1) * n * c];
                    let kb = &kd[bi * m * c..(bi + 1) * m * c];
                    if qneeds {
                        let dqb = &mut dq[bi * n * c..(bi + 1) * n * c];
                        // dQ = dS K
                        for i in 0..n {
                            let srow = &ds[i * m..(i + 1) * m];
                            let drow = &mut dqb[i * c..(i + 1) * c];
                            for (j, &sv) in srow.iter().enumerate() {
                                let krow = &kb[j * c..(j + 1) * c];
                                for (d, &kv2) in drow.iter_mut().zip(krow.iter()) {
                                    *d += sv * kv2;
                                }
                            }
                        }
                    }
                    if kneeds {
                        let dkb = &mut dk[bi * m * c..(bi + 1) * m * c];
                        // dK = dS^T Q
                        for i in 0..n {
                            let srow = &ds[i * m..(i + 1) * m];
                            let qrow = &qb[i * c..(i + 1) * c];
                            for (j, &sv) in srow.iter().enumerate() {
                                let drow = &mut dkb[j * c..(j + 1) * c];
                                for (d, &qv2) in drow.iter_mut().zip(qrow.iter()) {
                                    *d += sv * qv2;
                                }
                            }
                        }
                    }
                }
            }
            if qneeds {
                sink(qid, Tensor::from_vec(vec![b, n, c], dq));
            }
            if kneeds {
                sink(kid, Tensor::from_vec(vec![b, m, c], dk));
            }
            if vneeds {
                sink(vid, Tensor::from_vec(vec![b, m, cv], dv));
            }
        })),
    ))
}

/// Per-element population variance across views, restricted to views whose
/// mask is set. Positions with fewer than two valid views produce zero.
///
/// Views share a shape `[..., C]`; masks hold 0/1 per `[...]` position and
/// broadcast over the channel axis.
pub fn masked_view_variance<F: Scalar>(
    views: &[Var<F>],
    masks: &[Tensor<F>],
) -> Result<Var<F>> {
    if views.len() < 2 {
        return Err(Error::InsufficientViews(views.len()));
    }
    if masks.len() != views.len() {
        return Err(Error::Shape(format!(
            "expected {} masks, got {}",
            views.len(),
            masks.len()
        )));
    }
    let values: Vec<Tensor<F>> = views.iter().map(|v| v.value()).collect();
    let shape = values[0].shape().to_vec();
    let c = *shape.last().ok_or_else(|| Error::Shape("variance needs rank >= 1".into()))?;
    let spatial: usize = shape[..shape.len() - 1].iter().product();
    for v in &values {
        if v.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "view shape {:?} differs from {:?}",
                v.shape(),
                shape
            )));
        }
    }
    for m in masks {
        if m.len() != spatial {
            return Err(Error::Shape(format!(
                "mask length {} does not match spatial size {}",
                m.len(),
                spatial
            )));
        }
    }
    let mut out = vec![F::zero(); spatial * c];
    let half = F::cast(0.5);
    for s in 0..spatial {
        let mut valid: u32 = 0;
        let mut count = 0usize;
        for (vi, m) in masks.iter().enumerate() {
            if m.data()[s] > half {
                valid |= 1 << vi;
                count += 1;
            }
        }
        if count < 2 {
            continue;
        }
        let inv_n = F::one() / F::cast(count as f64);
        for ch in 0..c {
            let p = s * c + ch;
            let mut mean = F::zero();
            for (vi, val) in values.iter().enumerate() {
                if valid & (1 << vi) != 0 {
                    mean += val.data()[p];
                }
            }
            mean *= inv_n;
            let mut var = F::zero();
            for (vi, val) in values.iter().enumerate() {
                if valid & (1 << vi) != 0 {
                    let dlt = val.data()[p] - mean;
                    var += dlt * dlt;
                }
            }
            out[p] = var * inv_n;
        }
    }
    let ids: Vec<usize> = views.iter().map(|v| v.id).collect();
    let needs_flags: Vec<bool> = views.iter().map(|v| v.needs_grad()).collect();
    let needs = needs_flags.iter().any(|&x| x);
    let masks_b: Vec<Tensor<F>> = masks.to_vec();
    let shape_b = shape.clone();
    Ok(views[0].graph().push(
        Tensor::from_vec(shape, out),
        needs,
        Some(Box::new(move |g: &Tensor<F>, sink: &mut GradSink<F>| {
            // d var / d x_i = 2 (x_i − mean) / n for valid views
            let gd = g.data();
            let two = F::cast(2.0);
            let mut grads: Vec<Vec<F>> = needs_flags
                .iter()
                .map(|&f| if f { vec![F::zero(); spatial * c] } else { Vec::new() })
                .collect();
            for s in 0..spatial {
                let mut valid: u32 = 0;
                let mut count = 0usize;
                for (vi, m) in masks_b.iter().enumerate() {
                    if m.data()[s] > half {
                        valid |= 1 << vi;
                        count += 1;
                    }
                }
                if count < 2 {
                    continue;
                }
                let inv_n = F::one() / F::cast(count as f64);
                for ch in 0..c {
                    let p = s * c + ch;
                    let mut mean = F::zero();
                    for (vi, val) in values.iter().enumerate() {
                        if valid & (1 << vi) != 0 {
                            mean += val.data()[p];
                        }
                    }
                    mean *= inv_n;
                    let scale = two * inv_n * gd[p];
                    for (vi, val) in values.iter().enumerate() {
                        if valid & (1 << vi) != 0 && needs_flags[vi] {
                            grads[vi][p] = scale * (val.data()[p] - mean);
                        }
                    }
                }
            }
            for (vi, gv) in grads.into_iter().enumerate() {
                if needs_flags[vi] {
                    sink(ids[vi], Tensor::from_vec(shape_b.clone(), gv));
                }
            }
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::graph::Graph;
    use crate::diff::ops::{self, sum_all};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = StdRng::seed_from_u64(3);
        let g = Graph::new();
        let (cin, h, w, cout) = (2, 5, 6, 3);
        let x = g.leaf(rand_tensor(&mut rng, &[cin, h, w]));
        let wt = g.leaf(rand_tensor(&mut rng, &[cout, cin, 3, 3]));
        let y = conv2d(&x, &wt).unwrap();
        let xv = x.value();
        let wv = wt.value();
        for co in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let yi = yy as isize + ky - 1;
                                let xi = xx as isize + kx - 1;
                                if yi >= 0 && xi >= 0 && (yi as usize) < h && (xi as usize) < w {
                                    acc += wv.data()
                                        [((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * xv.data()[(ci * h + yi as usize) * w + xi as usize];
                                }
                            }
                        }
                    }
                    let got = y.value().data()[(co * h + yy) * w + xx];
                    assert!((got - acc).abs() < 1e-13, "({co},{yy},{xx}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv3d_stride2_shapes_and_naive_check() {
        let mut rng = StdRng::seed_from_u64(5);
        let g = Graph::new();
        let (cin, d, h, w, cout) = (2, 5, 4, 7, 2);
        let x = g.leaf(rand_tensor(&mut rng, &[cin, d, h, w]));
        let wt = g.leaf(rand_tensor(&mut rng, &[cout, cin, 3, 3, 3]));
        let y = conv3d(&x, &wt, 2).unwrap();
        assert_eq!(y.value().shape(), &[cout, 3, 2, 4]);
        let xv = x.value();
        let wv = wt.value();
        let (d2, h2, w2) = (3, 2, 4);
        for co in 0..cout {
            for zo in 0..d2 {
                for yo in 0..h2 {
                    for xo in 0..w2 {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3usize {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let zi = 2 * zo as isize + kz as isize - 1;
                                        let yi = 2 * yo as isize + ky as isize - 1;
                                        let xi = 2 * xo as isize + kx as isize - 1;
                                        if zi >= 0
                                            && yi >= 0
                                            && xi >= 0
                                            && (zi as usize) < d
                                            && (yi as usize) < h
                                            && (xi as usize) < w
                                        {
                                            acc += wv.data()
                                                [(((co * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx]
                                                * xv.data()[((ci * d + zi as usize) * h
                                                    + yi as usize)
                                                    * w
                                                    + xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                        let got = y.value().data()[((co * d2 + zo) * h2 + yo) * w2 + xo];
                        assert!((got - acc).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, &[1, 2, 2, 3]));
        let y = upsample_nearest3d(&x, (3, 4, 5)).unwrap();
        assert_eq!(y.value().shape(), &[1, 3, 4, 5]);
        let loss = sum_all(&y);
        let grads = loss.backward().unwrap();
        // each source cell is replicated into a crop of its 2x2x2 children
        let total: f64 = grads.get(&x).unwrap().data().iter().sum();
        assert_eq!(total, (3 * 4 * 5) as f64);
    }

    #[test]
    fn bilinear_gather_interpolates_and_fills() {
        let g = Graph::new();
        // 2x2 map, 1 channel: values 1, 2 / 3, 4
        let m = g.leaf(Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let coords = Arc::new(vec![
            [0.5f64, 0.0],  // between 1 and 2 -> 1.5
            [0.0, 0.5],     // between 1 and 3 -> 2.0
            [0.5, 0.5],     // center -> 2.5
            [-2.0, 0.0],    // fully outside -> fill
        ]);
        let o = bilinear_gather(&m, coords, 0.0).unwrap();
        assert_eq!(o.value().data(), &[1.5, 2.0, 2.5, 0.0]);
    }

    #[test]
    fn trilinear_gather_matches_corner_sum() {
        let mut rng = StdRng::seed_from_u64(11);
        let g = Graph::new();
        let (h, w, d, c) = (3, 4, 5, 2);
        let vol = g.leaf(rand_tensor(&mut rng, &[h, w, d, c]));
        let vv = vol.value();
        for _ in 0..20 {
            let u = rng.gen_range(0.0..(w - 1) as f64);
            let v = rng.gen_range(0.0..(h - 1) as f64);
            let p = rng.gen_range(0.0..(d - 1) as f64);
            let out = trilinear_gather(&vol, Arc::new(vec![[u, v, p]])).unwrap();
            let (x0, y0, z0) = (u.floor() as usize, v.floor() as usize, p.floor() as usize);
            let (fx, fy, fz) = (u - u.floor(), v - v.floor(), p - p.floor());
            for ch in 0..c {
                let f = |y: usize, x: usize, z: usize| vv.data()[((y * w + x) * d + z) * c + ch];
                let expected = f(y0, x0, z0) * (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
                    + f(y0, x0 + 1, z0) * fx * (1.0 - fy) * (1.0 - fz)
                    + f(y0 + 1, x0, z0) * (1.0 - fx) * fy * (1.0 - fz)
                    + f(y0 + 1, x0 + 1, z0) * fx * fy * (1.0 - fz)
                    + f(y0, x0, z0 + 1) * (1.0 - fx) * (1.0 - fy) * fz
                    + f(y0, x0 + 1, z0 + 1) * fx * (1.0 - fy) * fz
                    + f(y0 + 1, x0, z0 + 1) * (1.0 - fx) * fy * fz
                    + f(y0 + 1, x0 + 1, z0 + 1) * fx * fy * fz;
                let got = out.value().data()[ch];
                assert!((got - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_gather_voxel_center_and_midpoint() {
        let g = Graph::new();
        let (h, w, d, c) = (2, 2, 3, 1);
        let data: Vec<f64> = (0..h * w * d).map(|i| i as f64).collect();
        let vol = g.leaf(Tensor::from_vec(vec![h, w, d, c], data));
        // exact voxel center
        let o = trilinear_gather(&vol, Arc::new(vec![[1.0f64, 1.0, 2.0]])).unwrap();
        assert_eq!(o.value().data()[0], ((1 * w + 1) * d + 2) as f64);
        // midway between two depth-adjacent voxels
        let o = trilinear_gather(&vol, Arc::new(vec![[0.0f64, 0.0, 0.5]])).unwrap();
        assert_eq!(o.value().data()[0], 0.5);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = StdRng::seed_from_u64(13);
        let g = Graph::new();
        let q = g.leaf(rand_tensor(&mut rng, &[1, 3, 4]));
        let k = g.leaf(rand_tensor(&mut rng, &[1, 1, 4]));
        let v = g.leaf(rand_tensor(&mut rng, &[1, 1, 2]));
        let o = batched_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(&o.value().data()[i * 2..(i + 1) * 2], v.value().data());
        }
    }

    #[test]
    fn attention_zero_logits_average_values() {
        let g = Graph::new();
        let q = g.leaf(Tensor::zeros(&[1, 2, 3]));
        let k = g.leaf(Tensor::zeros(&[1, 4, 3]));
        let v = g.leaf(Tensor::from_vec(
            vec![1, 4, 1],
            vec![1.0, 2.0, 3.0, 6.0],
        ));
        let o = batched_attention(&q, &k, &v).unwrap();
        assert_eq!(o.value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::zeros(&[1, 2, 3]));
        let k = g.leaf(Tensor::zeros(&[1, 0, 3]));
        let v = g.leaf(Tensor::zeros(&[1, 0, 2]));
        assert!(matches!(
            batched_attention(&q, &k, &v),
            Err(Error::DegenerateAttention(_))
        ));
    }

    #[test]
    fn attention_matches_composed_ops() {
        let mut rng = StdRng::seed_from_u64(17);
        let g = Graph::new();
        let (n, m, c, cv) = (3, 5, 4, 2);
        let q = g.leaf(rand_tensor(&mut rng, &[1, n, c]));
        let k = g.leaf(rand_tensor(&mut rng, &[1, m, c]));
        let v = g.leaf(rand_tensor(&mut rng, &[1, m, cv]));
        let fused = batched_attention(&q, &k, &v).unwrap();

        let q2 = ops::reshape(&q, vec![n, c]).unwrap();
        let k2 = ops::reshape(&k, vec![m, c]).unwrap();
        let v2 = ops::reshape(&v, vec![m, cv]).unwrap();
        let kt = ops::permute(&k2, &[1, 0]).unwrap();
        let logits = ops::matmul(&q2, &kt).unwrap();
        let a = ops::softmax_axis(&logits, 1).unwrap();
        let composed = ops::matmul(&a, &v2).unwrap();
        for (x, y) in fused.value().data().iter().zip(composed.value().data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn variance_zero_for_identical_views_and_two_point_case() {
        let g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![2, 1], vec![1.0, 7.0]));
        let b = g.leaf(Tensor::from_vec(vec![2, 1], vec![1.0, 7.0]));
        let ones = Tensor::full(&[2], 1.0);
        let v = masked_view_variance(&[a.clone(), b.clone()], &[ones.clone(), ones.clone()]).unwrap();
        assert_eq!(v.value().data(), &[0.0, 0.0]);

        let c = g.leaf(Tensor::from_vec(vec![2, 1], vec![3.0, 7.0]));
        let v = masked_view_variance(&[a, c], &[ones.clone(), ones]).unwrap();
        // values 1 and 3: mean 2, population variance 1.0
        assert_eq!(v.value().data()[0], 1.0);
        assert_eq!(v.value().data()[1], 0.0);
    }

    #[test]
    fn variance_respects_masks() {
        let g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1, 1], vec![1.0]));
        let b = g.leaf(Tensor::from_vec(vec![1, 1], vec![3.0]));
        let c = g.leaf(Tensor::from_vec(vec![1, 1], vec![100.0]));
        let on = Tensor::full(&[1], 1.0);
        let off = Tensor::full(&[1], 0.0);
        // third view masked out: variance of {1, 3} = 1
        let v = masked_view_variance(&[a.clone(), b.clone(), c.clone()], &[on.clone(), on.clone(), off.clone()])
            .unwrap();
        assert_eq!(v.value().data(), &[1.0]);
        // fewer than two valid views: zero
        let v = masked_view_variance(&[a, b, c], &[on, off.clone(), off]).unwrap();
        assert_eq!(v.value().data(), &[0.0]);
    }

    #[test]
    fn variance_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(19);
        let g: Graph<f64> = Graph::new();
        let t1 = rand_tensor(&mut rng, &[4, 3]);
        let t2 = rand_tensor(&mut rng, &[4, 3]);
        let t3 = rand_tensor(&mut rng, &[4, 3]);
        let ones = Tensor::full(&[4], 1.0);
        let masks = vec![ones.clone(), ones.clone(), ones];
        let a = [g.leaf(t1.clone()), g.leaf(t2.clone()), g.leaf(t3.clone())];
        let b = [g.leaf(t3), g.leaf(t1), g.leaf(t2)];
        let va = masked_view_variance(&a, &masks).unwrap();
        let vb = masked_view_variance(&b, &masks).unwrap();
        for (x, y) in va.value().data().iter().zip(vb.value().data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        // and nonnegative
        assert!(va.value().data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn variance_matches_elementwise_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let g = Graph::new();
        let shape = [3, 2, 4];
        let ts: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &shape)).collect();
        let vars: Vec<_> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let ones = Tensor::full(&[6], 1.0);
        let v = masked_view_variance(&vars, &[ones.clone(), ones.clone(), ones]).unwrap();
        for p in 0..24 {
            let xs: Vec<f64> = ts.iter().map(|t| t.data()[p]).collect();
            let mean = xs.iter().sum::<f64>() / 3.0;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            assert!((v.value().data()[p] - var).abs() <= 1e-12);
        }
    }
}

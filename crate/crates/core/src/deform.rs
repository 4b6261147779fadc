//! Deformable 2-D convolution.
//!
//! Every kernel tap of every output pixel is displaced by a learned
//! `(Δy, Δx)` offset and read from the input by bilinear interpolation,
//! optionally scaled by a learned modulation scalar in `[0, 1]`:
//!
//! ```text
//! y(p0) = Σ_n w(p_n) · x(p0 + p_n + Δp_n) · Δm_n
//! ```
//!
//! Sampling uses the separable kernel `g(a, b) = max(0, 1 − |a − b|)` with
//! zero padding outside the input. `g` has kinks where `|a − b| ∈ {0, 1}`; the
//! coordinate derivative takes the mean of the two one-sided limits there.
//! At an integer coordinate this gives `½ (x[i+1] − x[i−1])`, so layers whose
//! offsets start at zero still receive an offset gradient.

use crate::autograd::conv::{patch_matmul, patch_matmul_backward, write_back, ConvGeom, DcolsSink};
use crate::autograd::graph::{Backward, GradCtx, Node};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Interpolation taps along one axis: neighbour indices, kernel weights and
/// kernel derivatives with respect to the sample coordinate.
#[derive(Clone, Copy, Debug)]
struct AxisTaps<T> {
    idx: [isize; 3],
    w: [T; 3],
    dw: [T; 3],
    n: usize,
}

impl<T: Float> AxisTaps<T> {
    fn new(coord: T) -> Self {
        let (i0, frac) = split(coord);
        Self::from_parts(i0 as isize, frac)
    }

    fn from_parts(i0: isize, frac: T) -> Self {
        let zero = T::zero();
        let one = T::one();
        if frac == zero {
            let half = T::from_f64_lossy(0.5);
            Self { idx: [i0 - 1, i0, i0 + 1], w: [zero, one, zero], dw: [-half, zero, half], n: 3 }
        } else {
            Self { idx: [i0, i0 + 1, 0], w: [one - frac, frac, zero], dw: [-one, one, zero], n: 2 }
        }
    }

    fn iter(&self, extent: usize) -> impl Iterator<Item = (usize, T, T)> + '_ {
        (0..self.n).filter_map(move |i| {
            let idx = self.idx[i];
            (idx >= 0 && (idx as usize) < extent).then(|| (idx as usize, self.w[i], self.dw[i]))
        })
    }
}

/// Integer floor and fractional part of a sample coordinate. Coordinates far
/// outside any map (or NaN) are parked where every tap reads padding.
#[inline]
fn split<T: Float>(coord: T) -> (i32, T) {
    let c = coord.to_f64().unwrap_or(f64::NAN);
    if !(c > -1e6 && c < 1e6) {
        return (-(1 << 30), T::zero());
    }
    // truncation then correction; cheaper than a libm floor call
    let mut i = c as i32;
    if (i as f64) > c {
        i -= 1;
    }
    (i, coord - T::from_i32(i).expect("small integer"))
}

/// A sample point as its top-left integer corner plus fractional parts;
/// cached per (tap, output pixel) from the forward pass for the backward.
#[derive(Clone, Copy, Debug)]
struct Point<T> {
    y0: i32,
    x0: i32,
    fy: T,
    fx: T,
}

impl<T: Float> Point<T> {
    #[inline]
    fn new(y: T, x: T) -> Self {
        let ((y0, fy), (x0, fx)) = (split(y), split(x));
        Self { y0, x0, fy, fx }
    }

    /// Flat index of the top-left corner when the whole 3×3 neighbourhood
    /// around it (enough for values and one-sided slopes) is inside the map.
    #[inline]
    fn interior(&self, h: usize, w: usize) -> Option<usize> {
        let (y0, x0) = (self.y0 as i64, self.x0 as i64);
        (y0 >= 1 && y0 + 1 < h as i64 && x0 >= 1 && x0 + 1 < w as i64).then(|| y0 as usize * w + x0 as usize)
    }

    #[inline]
    fn lerp(&self, plane: &[T], i: usize, w: usize) -> T {
        let (a, b, c, d) = (plane[i], plane[i + 1], plane[i + w], plane[i + w + 1]);
        let top = a + self.fx * (b - a);
        top + self.fy * ((c + self.fx * (d - c)) - top)
    }

    /// Value and `(∂/∂y, ∂/∂x)` at an interior point.
    #[inline]
    fn lerp_grad(&self, plane: &[T], i: usize, w: usize, half: T) -> (T, T, T) {
        let (fy, fx) = (self.fy, self.fx);
        // the 3×3 neighbourhood, centred on the top-left corner
        let s = &plane[i - w - 1..i + w + 2];
        let j = w + 1;
        let (a, b, c, d) = (s[j], s[j + 1], s[j + w], s[j + w + 1]);
        let (top, bot) = (a + fx * (b - a), c + fx * (d - c));
        let (left, right) = (a + fy * (c - a), b + fy * (d - b));
        let v = top + fy * (bot - top);
        let gy = if fy == T::zero() {
            let up = s[j - w] + fx * (s[j - w + 1] - s[j - w]);
            half * (bot - up)
        } else {
            bot - top
        };
        let gx = if fx == T::zero() {
            let lf = s[j - 1] + fy * (s[j + w - 1] - s[j - 1]);
            half * (right - lf)
        } else {
            right - left
        };
        (v, gy, gx)
    }
}

/// Flattened 2-D taps of one sample point, shared by every channel:
/// plane index, weight, and weight derivatives along `y` and `x`.
struct PointTaps<T> {
    n: u32,
    idx: [u32; 9],
    w: [T; 9],
    dy: [T; 9],
    dx: [T; 9],
}

impl<T: Float> PointTaps<T> {
    fn new(p: &Point<T>, h: usize, w: usize) -> Self {
        let zero = T::zero();
        let mut t = Self { n: 0, idx: [0; 9], w: [zero; 9], dy: [zero; 9], dx: [zero; 9] };
        let ty = AxisTaps::from_parts(p.y0 as isize, p.fy);
        let tx = AxisTaps::from_parts(p.x0 as isize, p.fx);
        for (iy, wy, dwy) in ty.iter(h) {
            for (ix, wx, dwx) in tx.iter(w) {
                let (a, b, c) = (wy * wx, dwy * wx, wy * dwx);
                if a == zero && b == zero && c == zero {
                    continue;
                }
                let n = t.n as usize;
                t.idx[n] = (iy * w + ix) as u32;
                t.w[n] = a;
                t.dy[n] = b;
                t.dx[n] = c;
                t.n += 1;
            }
        }
        t
    }

    #[inline]
    fn read(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for t in 0..self.n as usize {
            acc += self.w[t] * plane[self.idx[t] as usize];
        }
        acc
    }
}

/// Bilinear read of one `h × w` plane at a real-valued point.
pub(crate) fn sample_plane<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let ty = AxisTaps::new(y);
    let tx = AxisTaps::new(x);
    let mut acc = T::zero();
    for (iy, wy, _) in ty.iter(h) {
        if wy == T::zero() {
            continue;
        }
        for (ix, wx, _) in tx.iter(w) {
            acc += wy * wx * plane[iy * w + ix];
        }
    }
    acc
}

/// Bilinear read together with its derivatives along `y` and `x`.
pub(crate) fn sample_plane_grad<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let ty = AxisTaps::new(y);
    let tx = AxisTaps::new(x);
    let (mut v, mut dy, mut dx) = (T::zero(), T::zero(), T::zero());
    for (iy, wy, dwy) in ty.iter(h) {
        for (ix, wx, dwx) in tx.iter(w) {
            let f = plane[iy * w + ix];
            v += wy * wx * f;
            dy += dwy * wx * f;
            dx += wy * dwx * f;
        }
    }
    (v, dy, dx)
}

/// Samples every channel of a `[C, H, W]` feature map at `(y, x)`.
/// Points outside the map read zero padding.
pub fn bilinear_sample<T: Float>(feature: &Tensor<T>, y: T, x: T) -> Result<Vec<T>> {
    let &[c, h, w] = feature.shape() else {
        return Err(Error::Rank(format!("feature map must be [C, H, W], got {:?}", feature.shape())));
    };
    let data = feature.data();
    Ok((0..c).map(|ci| sample_plane(&data[ci * h * w..(ci + 1) * h * w], h, w, y, x)).collect())
}

/// Per-channel derivatives `(∂/∂y, ∂/∂x)` of [`bilinear_sample`].
pub fn bilinear_sample_point_grad<T: Float>(feature: &Tensor<T>, y: T, x: T) -> Result<Vec<(T, T)>> {
    let &[c, h, w] = feature.shape() else {
        return Err(Error::Rank(format!("feature map must be [C, H, W], got {:?}", feature.shape())));
    };
    let data = feature.data();
    Ok((0..c)
        .map(|ci| {
            let (_, dy, dx) = sample_plane_grad(&data[ci * h * w..(ci + 1) * h * w], h, w, y, x);
            (dy, dx)
        })
        .collect())
}

/// Learned sampling field of one deformable layer.
///
/// `offsets` is `[B, 2·K·K, H', W']` with channel `2k` holding `Δy` and
/// `2k + 1` holding `Δx` of tap `k = ky·K + kx`, in input pixels.
/// `modulation`, when present, is `[B, K·K, H', W']` with values in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformableKernelField {
    pub offsets: Var,
    pub modulation: Option<Var>,
}

/// Sample coordinate of tap `k` at output pixel `p` for image `b`.
#[inline]
fn tap_coords<T: Float>(geom: &ConvGeom, offsets: &[T], b: usize, k: usize, p: usize) -> (T, T) {
    let kk = geom.kernel * geom.kernel;
    let np = geom.patch_cols();
    let (oy, ox) = (p / geom.out_width, p % geom.out_width);
    let (ky, kx) = (k / geom.kernel, k % geom.kernel);
    let base = b * 2 * kk * np;
    let dy = offsets[base + 2 * k * np + p];
    let dx = offsets[base + (2 * k + 1) * np + p];
    let y = T::from_isize(geom.tap_origin(oy, ky)).expect("coord") + dy;
    let x = T::from_isize(geom.tap_origin(ox, kx)).expect("coord") + dx;
    (y, x)
}

/// Sample points of every (tap, output pixel) of image `b`, in `k · np + p`
/// order.
fn sample_points<T: Float>(geom: &ConvGeom, offsets: &[T], b: usize) -> Vec<Point<T>> {
    let kk = geom.kernel * geom.kernel;
    let np = geom.patch_cols();
    let mut out = Vec::with_capacity(kk * np);
    for k in 0..kk {
        for p in 0..np {
            let (y, x) = tap_coords(geom, offsets, b, k, p);
            out.push(Point::new(y, x));
        }
    }
    out
}

/// Builds the displaced patch matrix of image `b`.
fn deform_im2col<T: Float>(
    geom: &ConvGeom,
    image: &[T],
    points: &[Point<T>],
    mask: Option<&[T]>,
    b: usize,
    cols: &mut [T],
) {
    let kk = geom.kernel * geom.kernel;
    let np = geom.patch_cols();
    let (h, w) = (geom.height, geom.width);
    for k in 0..kk {
        for p in 0..np {
            let pt = &points[k * np + p];
            let m = mask.map_or(T::one(), |m| m[(b * kk + k) * np + p]);
            if let Some(i) = pt.interior(h, w) {
                for ci in 0..geom.in_channels {
                    cols[(ci * kk + k) * np + p] = m * pt.lerp(&image[ci * h * w..(ci + 1) * h * w], i, w);
                }
            } else {
                let taps = PointTaps::new(pt, h, w);
                for ci in 0..geom.in_channels {
                    cols[(ci * kk + k) * np + p] = m * taps.read(&image[ci * h * w..(ci + 1) * h * w]);
                }
            }
        }
    }
}

/// Per-image gradient slices filled by [`scatter_image`].
struct Grads<'a, T> {
    input: Option<&'a mut [T]>,
    offsets: Option<&'a mut [T]>,
    modulation: Option<&'a mut [T]>,
}

/// Routes the patch-matrix gradient of one image back to its input,
/// offsets and modulation. A free function over plain slices so the
/// compiler can see the output buffers do not alias.
fn scatter_image<T: Float>(
    geom: &ConvGeom,
    image: &[T],
    points: &[Point<T>],
    mask: Option<&[T]>,
    dcols: &[T],
    grads: Grads<'_, T>,
    half: T,
) {
    let Grads { input: mut dx, offsets: mut doff, modulation: mut dmask } = grads;
    let kk = geom.kernel * geom.kernel;
    let np = geom.patch_cols();
    let (h, w) = (geom.height, geom.width);
    for k in 0..kk {
        for p in 0..np {
            let pt = &points[k * np + p];
            let mi = k * np + p;
            let m = mask.map_or(T::one(), |m| m[mi]);
            let (mut gy, mut gx, mut gm) = (T::zero(), T::zero(), T::zero());
            if let Some(i) = pt.interior(h, w) {
                let (wy, wx) = (pt.fy, pt.fx);
                let one = T::one();
                let corners = [(one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx];
                for ci in 0..geom.in_channels {
                    let g = dcols[(ci * kk + k) * np + p];
                    if g == T::zero() {
                        continue;
                    }
                    let (sv, sy, sx) = pt.lerp_grad(&image[ci * h * w..(ci + 1) * h * w], i, w, half);
                    gy += g * sy;
                    gx += g * sx;
                    gm += g * sv;
                    if let Some(dx) = dx.as_deref_mut() {
                        let gmv = g * m;
                        let o = ci * h * w + i;
                        let q = &mut dx[o..o + w + 2];
                        q[0] += gmv * corners[0];
                        q[1] += gmv * corners[1];
                        q[w] += gmv * corners[2];
                        q[w + 1] += gmv * corners[3];
                    }
                }
            } else {
                let taps = PointTaps::new(pt, h, w);
                if taps.n == 0 {
                    continue;
                }
                for ci in 0..geom.in_channels {
                    let g = dcols[(ci * kk + k) * np + p];
                    if g == T::zero() {
                        continue;
                    }
                    let plane = &image[ci * h * w..(ci + 1) * h * w];
                    let (mut sy, mut sx, mut sv) = (T::zero(), T::zero(), T::zero());
                    for t in 0..taps.n as usize {
                        let f = plane[taps.idx[t] as usize];
                        sy += taps.dy[t] * f;
                        sx += taps.dx[t] * f;
                        sv += taps.w[t] * f;
                    }
                    gy += g * sy;
                    gx += g * sx;
                    gm += g * sv;
                    if let Some(dx) = dx.as_deref_mut() {
                        let gmv = g * m;
                        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for t in 0..taps.n as usize {
                            dplane[taps.idx[t] as usize] += gmv * taps.w[t];
                        }
                    }
                }
            }
            if let Some(doff) = doff.as_deref_mut() {
                doff[2 * k * np + p] += gy * m;
                doff[(2 * k + 1) * np + p] += gx * m;
            }
            if let Some(dmask) = dmask.as_deref_mut() {
                dmask[mi] += gm;
            }
        }
    }
}

struct DeformConv2d<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    offsets: Var,
    mask: Option<Var>,
    geom: ConvGeom,
    cols: Vec<T>,
    /// Per image, from the forward pass.
    points: Vec<Vec<Point<T>>>,
}

impl<T: Float> Backward<T> for DeformConv2d<T> {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v.push(self.offsets);
        v.extend(self.mask);
        v
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let geom = self.geom;
        let (rows, np) = (geom.patch_rows(), geom.patch_cols());
        let kk = geom.kernel * geom.kernel;
        let (h, w) = (geom.height, geom.width);
        let image_len = geom.in_channels * h * w;
        let input = ctx.value(self.x).data();
        let weight = ctx.value(self.w).data();
        let mask = self.mask.map(|m| ctx.value(m).data());

        let mut dw = ctx.slot(self.w).map(|s| s.to_vec());
        let mut db = self.b.and_then(|b| ctx.slot(b)).map(|s| s.to_vec());
        let mut dx = ctx.slot(self.x).map(|s| s.to_vec());
        let mut doff = ctx.slot(self.offsets).map(|s| s.to_vec());
        let mut dmask = self.mask.and_then(|m| ctx.slot(m)).map(|s| s.to_vec());
        let need_cols = dx.is_some() || doff.is_some() || dmask.is_some();
        let half = T::from_f64_lossy(0.5);

        let mut scatter = |b: usize, dcols: &[T]| {
            let per = |len: usize| b * len..(b + 1) * len;
            scatter_image(
                &geom,
                &input[per(image_len)],
                &self.points[b],
                mask.map(|m| &m[per(kk * np)]),
                dcols,
                Grads {
                    input: dx.as_mut().map(|v| &mut v[per(image_len)]),
                    offsets: doff.as_mut().map(|v| &mut v[per(2 * kk * np)]),
                    modulation: dmask.as_mut().map(|v| &mut v[per(kk * np)]),
                },
                half,
            )
        };
        let on_dcols: DcolsSink<'_, T> =
            if need_cols { Some(&mut scatter) } else { None };
        let cols_of = |b: usize| &self.cols[b * rows * np..(b + 1) * rows * np];
        patch_matmul_backward(&geom, cols_of, weight, grad, dw.as_deref_mut(), db.as_deref_mut(), on_dcols);

        write_back(ctx, self.w, dw);
        if let Some(b) = self.b {
            write_back(ctx, b, db);
        }
        write_back(ctx, self.x, dx);
        write_back(ctx, self.offsets, doff);
        if let Some(m) = self.mask {
            write_back(ctx, m, dmask);
        }
    }

    fn kink_margin(&self, nodes: &[Node<T>]) -> Option<T> {
        if !nodes[self.offsets.0].requires_grad {
            return None;
        }
        let offsets = nodes[self.offsets.0].value.data();
        let kk = self.geom.kernel * self.geom.kernel;
        let mut margin: Option<T> = None;
        for b in 0..self.geom.batch {
            for k in 0..kk {
                for p in 0..self.geom.patch_cols() {
                    let (y, x) = tap_coords(&self.geom, offsets, b, k, p);
                    for c in [y, x] {
                        let d = (c - c.round()).abs();
                        margin = Some(margin.map_or(d, |m| m.min(d)));
                    }
                }
            }
        }
        margin
    }
}

impl<T: Float> Graph<T> {
    /// Deformable convolution: each of the `K·K` taps at every output pixel is
    /// displaced by `field.offsets` and optionally scaled by `field.modulation`.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        field: DeformableKernelField,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        crate::autograd::conv::check_bias(self, b, geom.out_channels)?;
        let kk = geom.kernel * geom.kernel;
        let expect_field = |channels: usize| vec![geom.batch, channels, geom.out_height, geom.out_width];
        if self.value(field.offsets).shape() != expect_field(2 * kk) {
            return Err(Error::dim(format!(
                "offsets shape {:?}, expected {:?}",
                self.value(field.offsets).shape(),
                expect_field(2 * kk)
            )));
        }
        if let Some(m) = field.modulation {
            if self.value(m).shape() != expect_field(kk) {
                return Err(Error::dim(format!(
                    "modulation shape {:?}, expected {:?}",
                    self.value(m).shape(),
                    expect_field(kk)
                )));
            }
        }
        let (rows, np) = (geom.patch_rows(), geom.patch_cols());
        let image_len = geom.in_channels * geom.height * geom.width;
        let input = self.value(x).data();
        let offsets = self.value(field.offsets).data();
        let mask = field.modulation.map(|m| self.value(m).data());
        let mut cols = vec![T::zero(); geom.batch * rows * np];
        let points: Vec<Vec<Point<T>>> = (0..geom.batch).map(|bi| sample_points(&geom, offsets, bi)).collect();
        for bi in 0..geom.batch {
            deform_im2col(
                &geom,
                &input[bi * image_len..(bi + 1) * image_len],
                &points[bi],
                mask,
                bi,
                &mut cols[bi * rows * np..(bi + 1) * rows * np],
            );
        }
        let out = patch_matmul(
            &geom,
            |bi| &cols[bi * rows * np..(bi + 1) * rows * np],
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(geom.output_shape(), out)?;
        self.push_op(
            out,
            Box::new(DeformConv2d {
                x,
                w,
                b,
                offsets: field.offsets,
                mask: field.modulation,
                geom,
                cols,
                points,
            }),
        )
    }

    /// Predicts a sampling field with a standard convolution over `x`.
    ///
    /// The predictor has `2·K·K` output channels (plus `K·K` when
    /// `modulated`); the first `2·K·K` are used as offsets unchanged and the
    /// rest pass through a sigmoid to form the modulation.
    #[allow(clippy::too_many_arguments)]
    pub fn offset_predictor(
        &mut self,
        x: Var,
        pred_weight: Var,
        pred_bias: Option<Var>,
        kernel: usize,
        stride: usize,
        padding: usize,
        modulated: bool,
    ) -> Result<DeformableKernelField> {
        let kk = kernel * kernel;
        let expected = if modulated { 3 * kk } else { 2 * kk };
        let shape = self.value(pred_weight).shape();
        if shape.len() != 4 || shape[0] != expected || shape[2] != kernel || shape[3] != kernel {
            return Err(Error::dim(format!(
                "offset predictor weight {shape:?}: expected [{expected}, Cin, {kernel}, {kernel}]"
            )));
        }
        let raw = self.conv2d(x, pred_weight, pred_bias, stride, padding)?;
        if !modulated {
            return Ok(DeformableKernelField { offsets: raw, modulation: None });
        }
        let offsets = self.narrow_channels(raw, 0, 2 * kk)?;
        let logits = self.narrow_channels(raw, 2 * kk, kk)?;
        let modulation = Some(self.sigmoid(logits)?);
        Ok(DeformableKernelField { offsets, modulation })
    }
}

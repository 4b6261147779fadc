//! Convolution by explicit patch gather (im2col) followed by a matrix
//! product. The patch layout `[Cin·K·K, H'·W']` is shared with the deformable
//! convolution, which differs only in how patches are gathered.

use super::graph::{Backward, GradCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, gemm, Float, Layout, Tensor};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, in_channels, height, width] = input else {
            return Err(Error::Rank(format!("conv input must be rank 4, got {input:?}")));
        };
        let &[out_channels, w_in, kh, kw] = weight else {
            return Err(Error::Rank(format!("conv weight must be rank 4, got {weight:?}")));
        };
        if w_in != in_channels {
            return Err(Error::dim(format!(
                "weight expects {w_in} input channels, input has {in_channels}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Geometry(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        let out_height = conv_out_extent(height, kh, stride, padding)?;
        let out_width = conv_out_extent(width, kw, stride, padding)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    /// Rows of the patch matrix.
    pub fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the patch matrix (output pixels per image).
    pub fn patch_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate of kernel tap `k` for output coordinate `o`, before
    /// any learned displacement.
    #[inline]
    pub(crate) fn tap_origin(&self, o: usize, k: usize) -> isize {
        (o * self.stride + k) as isize - self.padding as isize
    }
}

/// Gathers the regular-grid patches of one image into `cols`.
pub(crate) fn im2col<T: Float>(geom: &ConvGeom, image: &[T], cols: &mut [T]) {
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let (oh, ow) = (geom.out_height, geom.out_width);
    let mut row = 0;
    for ci in 0..geom.in_channels {
        let plane = &image[ci * geom.height * geom.width..(ci + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = geom.tap_origin(oy, ky);
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = geom.tap_origin(ox, kx);
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatters patch-matrix gradients back onto one image (transpose of [`im2col`]).
pub(crate) fn col2im<T: Float>(geom: &ConvGeom, dcols: &[T], dimage: &mut [T]) {
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let (oh, ow) = (geom.out_height, geom.out_width);
    let mut row = 0;
    for ci in 0..geom.in_channels {
        let plane = &mut dimage[ci * geom.height * geom.width..(ci + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &dcols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = geom.tap_origin(oy, ky);
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                    for ox in 0..ow {
                        let ix = geom.tap_origin(ox, kx);
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[b] = weight · cols[b] + bias`, weight viewed as `[Cout, Cin·K·K]`.
pub(crate) fn patch_matmul<'c, T: Float>(
    geom: &ConvGeom,
    cols_of: impl Fn(usize) -> &'c [T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols) = (geom.patch_rows(), geom.patch_cols());
    let cout = geom.out_channels;
    let mut out = vec![T::zero(); geom.batch * cout * cols];
    for b in 0..geom.batch {
        let dst = &mut out[b * cout * cols..(b + 1) * cout * cols];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        gemm(cout, rows, cols, weight, Layout::Normal, cols_of(b), Layout::Normal, dst, bias.is_some());
    }
    out
}

/// Receives `(image, patch gradient)` pairs from [`patch_matmul_backward`].
pub(crate) type DcolsSink<'a, T> = Option<&'a mut dyn FnMut(usize, &[T])>;

/// Weight and bias gradients of [`patch_matmul`]; also yields the per-image
/// patch gradient `weightᵀ · dout[b]` to `on_dcols` when requested.
pub(crate) fn patch_matmul_backward<'c, T: Float>(
    geom: &ConvGeom,
    cols_of: impl Fn(usize) -> &'c [T],
    weight: &[T],
    grad: &[T],
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    mut on_dcols: DcolsSink<'_, T>,
) {
    let (rows, cols) = (geom.patch_rows(), geom.patch_cols());
    let cout = geom.out_channels;
    let mut dcols = if on_dcols.is_some() { vec![T::zero(); rows * cols] } else { Vec::new() };
    for b in 0..geom.batch {
        let g = &grad[b * cout * cols..(b + 1) * cout * cols];
        if let Some(dw) = dweight.as_deref_mut() {
            gemm(cout, cols, rows, g, Layout::Normal, cols_of(b), Layout::Transposed, dw, true);
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (co, chunk) in g.chunks(cols).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(f) = on_dcols.as_deref_mut() {
            gemm(rows, cout, cols, weight, Layout::Transposed, g, Layout::Normal, &mut dcols, false);
            f(b, &dcols);
        }
    }
}

struct Conv2d<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    /// Patch matrices of every image; empty for pointwise convolutions,
    /// whose patch matrix is the input itself.
    cols: Vec<T>,
}

impl<T: Float> Backward<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let geom = self.geom;
        let x = ctx.value(self.x).data();
        let weight = ctx.value(self.w).data();
        let stride = geom.patch_rows() * geom.patch_cols();
        let cols_of = |b: usize| -> &[T] {
            if geom.is_pointwise() {
                &x[b * stride..(b + 1) * stride]
            } else {
                &self.cols[b * stride..(b + 1) * stride]
            }
        };
        let mut dw = ctx.slot(self.w).map(|s| s.to_vec());
        let mut db = self.b.and_then(|b| ctx.slot(b)).map(|s| s.to_vec());
        let image = geom.in_channels * geom.height * geom.width;
        let mut dx = ctx.slot(self.x).map(|s| s.to_vec());
        {
            let mut scatter = |b: usize, dcols: &[T]| {
                let dx = dx.as_mut().expect("requested");
                let dst = &mut dx[b * image..(b + 1) * image];
                if geom.is_pointwise() {
                    dst.iter_mut().zip(dcols).for_each(|(d, &g)| *d += g);
                } else {
                    col2im(&geom, dcols, dst);
                }
            };
            let on_dcols: DcolsSink<'_, T> =
                if ctx.wants(self.x) { Some(&mut scatter) } else { None };
            patch_matmul_backward(&geom, cols_of, weight, grad, dw.as_deref_mut(), db.as_deref_mut(), on_dcols);
        }
        write_back(ctx, self.w, dw);
        if let Some(b) = self.b {
            write_back(ctx, b, db);
        }
        write_back(ctx, self.x, dx);
    }
}

/// Stores a locally accumulated gradient back into its slot.
pub(crate) fn write_back<T: Float>(ctx: &mut GradCtx<'_, T>, v: Var, local: Option<Vec<T>>) {
    if let (Some(local), Some(slot)) = (local, ctx.slot(v)) {
        slot.copy_from_slice(&local);
    }
}

struct ConvTranspose2x2 {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl<T: Float> Backward<T> for ConvTranspose2x2 {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let [batch, cout, oh, ow] = out.dims4("transposed conv output").expect("rank 4");
        let x = ctx.value(self.x);
        let [_, cin, h, w] = x.dims4("transposed conv input").expect("rank 4");
        let x = x.data();
        let weight = ctx.value(self.w).data();
        let p = h * w;
        let rows = cout * 4;
        let mut dz = vec![T::zero(); rows * p];
        let mut dw = ctx.slot(self.w).map(|s| s.to_vec());
        let mut dx = ctx.slot(self.x).map(|s| s.to_vec());
        let mut db = self.b.and_then(|b| ctx.slot(b)).map(|s| s.to_vec());
        for bi in 0..batch {
            let g = &grad[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            // gather output gradient into [Cout·4, H·W]
            for co in 0..cout {
                for tap in 0..4 {
                    let (dy, dxo) = (tap / 2, tap % 2);
                    let row = &mut dz[(co * 4 + tap) * p..(co * 4 + tap + 1) * p];
                    for i in 0..h {
                        for j in 0..w {
                            row[i * w + j] = g[co * oh * ow + (2 * i + dy) * ow + 2 * j + dxo];
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                for co in 0..cout {
                    db[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
                }
            }
            let xb = &x[bi * cin * p..(bi + 1) * cin * p];
            if let Some(dw) = dw.as_mut() {
                gemm(cin, p, rows, xb, Layout::Normal, &dz, Layout::Transposed, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[bi * cin * p..(bi + 1) * cin * p];
                gemm(cin, rows, p, weight, Layout::Normal, &dz, Layout::Normal, dst, true);
            }
        }
        write_back(ctx, self.w, dw);
        write_back(ctx, self.x, dx);
        if let Some(b) = self.b {
            write_back(ctx, b, db);
        }
    }
}

impl<T: Float> Graph<T> {
    /// Zero-padded 2-D convolution. `weight` is `[Cout, Cin, K, K]` with odd `K`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        check_bias(self, b, geom.out_channels)?;
        let (rows, ncols) = (geom.patch_rows(), geom.patch_cols());
        let input = self.value(x).data();
        let image = geom.in_channels * geom.height * geom.width;
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); geom.batch * rows * ncols];
            for bi in 0..geom.batch {
                im2col(
                    &geom,
                    &input[bi * image..(bi + 1) * image],
                    &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols],
                );
            }
            cols
        };
        let out = {
            let cols_of = |bi: usize| -> &[T] {
                if geom.is_pointwise() {
                    &input[bi * image..(bi + 1) * image]
                } else {
                    &cols[bi * rows * ncols..(bi + 1) * rows * ncols]
                }
            };
            patch_matmul(&geom, cols_of, self.value(w).data(), b.map(|b| self.value(b).data()))
        };
        let out = Tensor::new(geom.output_shape(), out)?;
        self.push_op(out, Box::new(Conv2d { x, w, b, geom, cols }))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
    /// `weight` is `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4("transposed conv input")?;
        let &[w_in, cout, kh, kw] = self.value(w).shape() else {
            return Err(Error::Rank("transposed conv weight must be rank 4".into()));
        };
        if w_in != cin || kh != 2 || kw != 2 {
            return Err(Error::dim(format!(
                "transposed conv weight {:?} incompatible with {cin} input channels",
                self.value(w).shape()
            )));
        }
        check_bias(self, b, cout)?;
        let p = h * wd;
        let rows = cout * 4;
        let (oh, ow) = (2 * h, 2 * wd);
        let x_data = self.value(x).data();
        let weight = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut z = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); batch * cout * oh * ow];
        for bi in 0..batch {
            let xb = &x_data[bi * cin * p..(bi + 1) * cin * p];
            gemm(rows, cin, p, weight, Layout::Transposed, xb, Layout::Normal, &mut z, false);
            let dst = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            for co in 0..cout {
                let shift = bias.map_or(T::zero(), |b| b[co]);
                for tap in 0..4 {
                    let (dy, dx) = (tap / 2, tap % 2);
                    let row = &z[(co * 4 + tap) * p..(co * 4 + tap + 1) * p];
                    for i in 0..h {
                        for j in 0..wd {
                            dst[co * oh * ow + (2 * i + dy) * ow + 2 * j + dx] = row[i * wd + j] + shift;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, cout, oh, ow], out)?;
        self.push_op(out, Box::new(ConvTranspose2x2 { x, w, b }))
    }
}

pub(crate) fn check_bias<T: Float>(g: &Graph<T>, b: Option<Var>, out_channels: usize) -> Result<()> {
    if let Some(b) = b {
        if g.value(b).shape() != [out_channels] {
            return Err(Error::dim(format!(
                "bias shape {:?}, expected [{out_channels}]",
                g.value(b).shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    /// Direct-sum reference convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_height * g.out_width];
        let k = g.kernel;
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let mut s = bias[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    s += w.data()[((co * g.in_channels + ci) * k + ky) * k + kx]
                                        * x.data()[((b * g.in_channels + ci) * g.height + iy as usize) * g.width
                                            + ix as usize];
                                }
                            }
                        }
                        out[((b * g.out_channels + co) * g.out_height + oy) * g.out_width + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_sum_of_three_by_three() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.])).unwrap();
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
        let b = g.input(Tensor::zeros(vec![1])).unwrap();
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[45.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 5, 5])).unwrap();
        let w = g.input(Tensor::full(vec![4, 3, 3, 3], 0.7)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let data: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 5, 6], &data)).unwrap();
        let mut wdata = vec![0.0; 2 * 2 * 9];
        wdata[4] = 1.0; // out 0 <- in 0 centre
        wdata[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = g.input(t(&[2, 2, 3, 3], &wdata)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn matches_direct_sum_with_stride_and_padding() {
        for (stride, pad, h) in [(1, 1, 6), (2, 1, 7), (1, 0, 5), (2, 2, 5)] {
            let x = t(&[2, 3, h, h], &(0..2 * 3 * h * h).map(|i| ((i * 13) % 17) as f64 - 8.0).collect::<Vec<_>>());
            let w = t(&[4, 3, 3, 3], &(0..4 * 27).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect::<Vec<_>>());
            let bias = [0.1, -0.2, 0.3, 0.0];
            let expected = naive_conv(&x, &w, &bias, stride, pad);
            let mut g = Graph::new();
            let xv = g.input(x).unwrap();
            let wv = g.input(w).unwrap();
            let bv = g.input(t(&[4], &bias)).unwrap();
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            for (a, b) in g.value(y).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pointwise_conv_matches_direct_sum() {
        let x = t(&[1, 3, 2, 2], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let w = t(&[2, 3, 1, 1], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let expected = naive_conv(&x, &w, &[1.0, 0.0], 1, 0);
        let mut g = Graph::new();
        let xv = g.input(x).unwrap();
        let wv = g.input(w).unwrap();
        let bv = g.input(t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &expected[..]);
    }

    #[test]
    fn errors_on_bad_geometry() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 6, 6])).unwrap();
        let w_even = g.input(Tensor::zeros(vec![1, 2, 2, 2])).unwrap();
        assert!(matches!(g.conv2d(x, w_even, None, 1, 0), Err(Error::Geometry(_))));
        let w_bad = g.input(Tensor::zeros(vec![1, 3, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w_bad, None, 1, 1), Err(Error::Dimension(_))));
        let w = g.input(Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 2, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn transposed_conv_places_each_tap() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 1, 2], &[1.0, 2.0])).unwrap();
        let w = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.input(t(&[1], &[0.5])).unwrap();
        let y = g.conv_transpose2x2(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]);
    }
}

//! Cross-correlation kernels for 3D convolution and its adjoint.
//!
//! Both directions lower to GEMM over an unfolded ("im2col") view of the
//! input: `out[n] = W · unfold(x[n])`, where `W` is the weight tensor read as
//! a `Cout × (Cin·kd·kh·kw)` matrix. The transposed convolution is the exact
//! adjoint of the forward map, `fold(Wᵀ · y[n])`.

use crate::error::{Error, Result};

use super::element::Element;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Output extent `ceil(extent / stride)`; the total padding is split with
    /// the smaller half before the data.
    #[default]
    Same,
    /// No padding; output extent `(extent - kernel) / stride + 1`.
    Valid,
}

/// Index arithmetic shared by a convolution and its transpose. `input` is the
/// grid the kernel slides over, `output` the grid it produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let mut output = [0; 3];
        let mut pad_before = [0; 3];
        for ax in 0..3 {
            let (e, k, s) = (input[ax], kernel[ax], stride[ax]);
            if s == 0 || k == 0 || e == 0 {
                return Err(Error::contract(format!(
                    "conv3d: extents, kernel and stride must be positive (input {input:?}, kernel {kernel:?}, stride {stride:?})"
                )));
            }
            match padding {
                Padding::Same => {
                    let out = e.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(e);
                    output[ax] = out;
                    pad_before[ax] = total / 2;
                }
                Padding::Valid => {
                    if k > e {
                        return Err(Error::contract(format!(
                            "conv3d: kernel {kernel:?} exceeds unpadded input {input:?}"
                        )));
                    }
                    output[ax] = (e - k) / s + 1;
                }
            }
        }
        Ok(Self {
            input,
            output,
            kernel,
            stride,
            pad_before,
        })
    }

    /// Geometry of the forward convolution whose adjoint maps a grid of
    /// extent `input` up to the largest grid consistent with `stride`.
    pub fn for_transpose(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = match padding {
                Padding::Same => input[ax] * stride[ax],
                Padding::Valid => (input[ax] - 1) * stride[ax] + kernel[ax],
            };
        }
        let geom = Self::new(out, kernel, stride, padding)?;
        debug_assert_eq!(geom.output, input);
        Ok(geom)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad_before == [0, 0, 0]
    }

    /// Output positions `[lo, hi)` along one axis whose input coordinate
    /// `o*s + tap - pad` lands inside `[0, extent)`.
    fn valid_range(&self, ax: usize, tap: usize) -> (usize, usize) {
        let (s, p, e, out) = (
            self.stride[ax] as isize,
            self.pad_before[ax] as isize,
            self.input[ax] as isize,
            self.output[ax] as isize,
        );
        let t = tap as isize;
        let lo = ceil_div(p - t, s).max(0);
        let hi = ceil_div(e + p - t, s).clamp(0, out);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn ceil_div(a: isize, b: isize) -> isize {
    a.div_euclid(b) + if a.rem_euclid(b) != 0 { 1 } else { 0 }
}

/// Unfolds `channels` input slabs into a `(channels·kvol) × out_vol` matrix.
pub(crate) fn im2col<T: Element>(x: &[T], channels: usize, g: &ConvGeometry, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad_before;
    let out_vol = od * oh * ow;
    let in_vol = id * ih * iw;
    let mut row = 0;
    for c in 0..channels {
        let src = &x[c * in_vol..(c + 1) * in_vol];
        for a in 0..kd {
            let (zlo, zhi) = g.valid_range(0, a);
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, e);
                    let dst = &mut col[row * out_vol..(row + 1) * out_vol];
                    dst.fill(T::zero());
                    for oz in zlo..zhi {
                        let iz = oz * sd + a - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + b - ph;
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let srow = &src[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let ix0 = xlo + e - pw;
                                drow[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    drow[ox] = srow[ox * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the matrix back onto the input grid.
pub(crate) fn col2im<T: Element>(col: &[T], channels: usize, g: &ConvGeometry, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad_before;
    let out_vol = od * oh * ow;
    let in_vol = id * ih * iw;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut x[c * in_vol..(c + 1) * in_vol];
        for a in 0..kd {
            let (zlo, zhi) = g.valid_range(0, a);
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for e in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, e);
                    let src = &col[row * out_vol..(row + 1) * out_vol];
                    for oz in zlo..zhi {
                        let iz = oz * sd + a - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + b - ph;
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let drow = &mut dst[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            for (ox, &v) in srow.iter().enumerate().take(xhi).skip(xlo) {
                                let ix = ox * sw + e - pw;
                                drow[ix] = drow[ix] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], vol: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * vol..(c + 1) * vol] {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Element>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let vol = g.spatial_len();
    let n = g.shape()[0];
    let mut out = vec![T::zero(); channels];
    for b in 0..n {
        for (c, o) in out.iter_mut().enumerate() {
            *o = *o + g.channel(b, c).iter().copied().sum();
        }
    }
    debug_assert!(vol > 0);
    Tensor::from_vec(&[channels], out).expect("bias shape")
}

/// Checks operand shapes and returns the geometry of `conv3d(x, w)`.
pub(crate) fn conv_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<ConvGeometry> {
    let [_, cin, d, h, wd] = x.dims5()?;
    let ws = w.dims5()?;
    if ws[1] != cin {
        return Err(Error::shape("conv3d", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv3d bias", w.shape(), b.shape()));
        }
    }
    ConvGeometry::new([d, h, wd], [ws[2], ws[3], ws[4]], stride, padding)
}

pub(crate) fn conv3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [n, cin, ..] = x.dims5().expect("rank-5 input");
    let cout = w.shape()[0];
    let k = cin * g.kernel_volume();
    let (in_vol, out_vol) = (g.input_volume(), g.output_volume());
    let mut out = vec![T::zero(); n * cout * out_vol];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * out_vol]
    };
    for b in 0..n {
        let xb = &x.data()[b * cin * in_vol..(b + 1) * cin * in_vol];
        let ob = &mut out[b * cout * out_vol..(b + 1) * cout * out_vol];
        let rhs = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, g, &mut col);
            &col
        };
        T::gemm(cout, k, out_vol, w.data(), false, rhs, false, ob, false);
        if let Some(bias) = bias {
            add_bias(ob, bias.data(), out_vol);
        }
    }
    let [od, oh, ow] = g.output;
    Tensor::from_vec(&[n, cout, od, oh, ow], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, ..] = x.dims5().expect("rank-5 input");
    let cout = w.shape()[0];
    let k = cin * g.kernel_volume();
    let (in_vol, out_vol) = (g.input_volume(), g.output_volume());
    let pointwise = g.is_pointwise();
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut col = if pointwise || !(need[0] || need[1]) {
        Vec::new()
    } else {
        vec![T::zero(); k * out_vol]
    };
    for b in 0..n {
        let gb = &gout.data()[b * cout * out_vol..(b + 1) * cout * out_vol];
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * cin * in_vol..(b + 1) * cin * in_vol];
            if pointwise {
                T::gemm(k, cout, out_vol, w.data(), true, gb, false, dst, false);
            } else {
                T::gemm(k, cout, out_vol, w.data(), true, gb, false, &mut col, false);
                col2im(&col, cin, g, dst);
            }
        }
        if let Some(gw) = gw.as_mut() {
            let xb = &x.data()[b * cin * in_vol..(b + 1) * cin * in_vol];
            let rhs = if pointwise {
                xb
            } else {
                im2col(xb, cin, g, &mut col);
                &col
            };
            T::gemm(cout, out_vol, k, gb, false, rhs, true, gw, true);
        }
    }
    ConvGrads {
        input: gx.map(|d| Tensor::from_vec(x.shape(), d).expect("shape")),
        weight: gw.map(|d| Tensor::from_vec(w.shape(), d).expect("shape")),
        bias: need[2].then(|| bias_grad(gout, cout)),
    }
}

/// Checks operand shapes and returns the geometry of the forward convolution
/// adjoint to `conv_transpose3d(y, w)`.
pub(crate) fn conv_transpose_geometry<T: Element>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<ConvGeometry> {
    let [_, c, d, h, wd] = y.dims5()?;
    let ws = w.dims5()?;
    if ws[0] != c {
        return Err(Error::shape("conv_transpose3d", y.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[1]] {
            return Err(Error::shape("conv_transpose3d bias", w.shape(), b.shape()));
        }
    }
    ConvGeometry::for_transpose([d, h, wd], [ws[2], ws[3], ws[4]], stride, padding)
}

pub(crate) fn conv_transpose3d_forward<T: Element>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [n, cy, ..] = y.dims5().expect("rank-5 input");
    let cx = w.shape()[1];
    let k = cx * g.kernel_volume();
    let (x_vol, y_vol) = (g.input_volume(), g.output_volume());
    let mut out = vec![T::zero(); n * cx * x_vol];
    let mut col = vec![T::zero(); k * y_vol];
    for b in 0..n {
        let yb = &y.data()[b * cy * y_vol..(b + 1) * cy * y_vol];
        let ob = &mut out[b * cx * x_vol..(b + 1) * cx * x_vol];
        if g.is_pointwise() {
            T::gemm(k, cy, y_vol, w.data(), true, yb, false, ob, false);
        } else {
            T::gemm(k, cy, y_vol, w.data(), true, yb, false, &mut col, false);
            col2im(&col, cx, g, ob);
        }
        if let Some(bias) = bias {
            add_bias(ob, bias.data(), x_vol);
        }
    }
    let [d, h, wd] = g.input;
    Tensor::from_vec(&[n, cx, d, h, wd], out).expect("conv transpose output shape")
}

pub(crate) fn conv_transpose3d_backward<T: Element>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cy, ..] = y.dims5().expect("rank-5 input");
    let cx = w.shape()[1];
    let k = cx * g.kernel_volume();
    let (x_vol, y_vol) = (g.input_volume(), g.output_volume());
    let mut gy = need[0].then(|| vec![T::zero(); y.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut col = if need[0] || need[1] {
        vec![T::zero(); k * y_vol]
    } else {
        Vec::new()
    };
    for b in 0..n {
        if !(need[0] || need[1]) {
            break;
        }
        let gb = &gout.data()[b * cx * x_vol..(b + 1) * cx * x_vol];
        let unfolded: &[T] = if g.is_pointwise() {
            gb
        } else {
            im2col(gb, cx, g, &mut col);
            &col
        };
        if let Some(gy) = gy.as_mut() {
            let dst = &mut gy[b * cy * y_vol..(b + 1) * cy * y_vol];
            T::gemm(cy, k, y_vol, w.data(), false, unfolded, false, dst, false);
        }
        if let Some(gw) = gw.as_mut() {
            let yb = &y.data()[b * cy * y_vol..(b + 1) * cy * y_vol];
            T::gemm(cy, y_vol, k, yb, false, unfolded, true, gw, true);
        }
    }
    ConvGrads {
        input: gy.map(|d| Tensor::from_vec(y.shape(), d).expect("shape")),
        weight: gw.map(|d| Tensor::from_vec(w.shape(), d).expect("shape")),
        bias: need[2].then(|| bias_grad(gout, cx)),
    }
}

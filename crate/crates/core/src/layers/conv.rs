use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use crate::scalar::{abs_subgradient, Scalar};

/// 2-D convolution (cross-correlation, no kernel flip) with zero padding.
///
/// Kernel shape is `[out_ch, in_ch, kh, kw]`; inputs are `[in_ch, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<T> {
    kernel: Tensor<T>,
    bias: Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pw > kx {
            (self.pw - kx).div_ceil(self.sw)
        } else {
            0
        };
        let hi = if self.w + self.pw > kx {
            ((self.w - 1 + self.pw - kx) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn ox_ranges(&self) -> Vec<(usize, usize)> {
        (0..self.kw).map(|kx| self.ox_range(kx)).collect()
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.sh + ky;
        if iy < self.ph || iy - self.ph >= self.h {
            None
        } else {
            Some(iy - self.ph)
        }
    }
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(BtnError::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "conv kernel must be rank 4 [out, in, kh, kw]".into(),
            });
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(BtnError::ShapeMismatch {
                op: "conv bias",
                left: kernel.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(BtnError::Geometry("conv stride must be positive".into()));
        }
        if kernel.shape()[2] == 0 || kernel.shape()[3] == 0 {
            return Err(BtnError::Geometry("conv kernel extents must be positive".into()));
        }
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.kernel, &mut self.bias]
    }

    pub(crate) fn geom(&self, input: &[usize]) -> Result<ConvGeom> {
        let k = self.kernel.shape();
        let shape_err = || BtnError::LayerShape {
            index: 0,
            kind: "conv2d",
            expected: vec![k[1], 0, 0],
            actual: input.to_vec(),
        };
        if input.len() != 3 || input[0] != k[1] {
            return Err(shape_err());
        }
        let (h, w) = (input[1], input[2]);
        let (ph, pw) = self.padding;
        if h + 2 * ph < k[2] || w + 2 * pw < k[3] {
            return Err(BtnError::Geometry(format!(
                "kernel {}x{} does not fit padded input {}x{}",
                k[2],
                k[3],
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let oh = (h + 2 * ph - k[2]) / self.stride.0 + 1;
        let ow = (w + 2 * pw - k[3]) / self.stride.1 + 1;
        Ok(ConvGeom {
            c_in: k[1],
            h,
            w,
            c_out: k[0],
            kh: k[2],
            kw: k[3],
            sh: self.stride.0,
            sw: self.stride.1,
            ph,
            pw,
            oh,
            ow,
        })
    }

    pub(crate) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geom(input)?;
        Ok(vec![g.c_out, g.oh, g.ow])
    }

    /// Cross-correlation of `x` with the kernel (or its absolute value), plus
    /// bias when requested.
    pub(crate) fn affine(&self, x: &Tensor<T>, with_bias: bool, absolute: bool) -> Result<Tensor<T>> {
        let g = self.geom(x.shape())?;
        let plane = g.oh * g.ow;
        let mut out = vec![T::zero(); g.c_out * plane];
        if with_bias {
            for (o, &b) in self.bias.data().iter().enumerate() {
                out[o * plane..(o + 1) * plane].fill(b);
            }
        }
        let kernel: Vec<T> = if absolute {
            self.kernel.data().iter().map(|v| v.abs()).collect()
        } else {
            self.kernel.data().to_vec()
        };
        conv_forward(&g, &kernel, x.data(), &mut out);
        Tensor::new(vec![g.c_out, g.oh, g.ow], out)
    }

    /// Accumulates kernel (and, unless `absolute`, bias) gradients into
    /// `grads[0..2]`; returns the input gradient when `want_input`.
    pub(crate) fn affine_backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
        absolute: bool,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geom(x.shape())?;
        if grad_out.shape() != [g.c_out, g.oh, g.ow] {
            return Err(BtnError::StaleCache(format!(
                "conv2d gradient shape {:?} does not match output {:?}",
                grad_out.shape(),
                [g.c_out, g.oh, g.ow]
            )));
        }
        if let Some(grads) = grads {
            self.accumulate_param_grads(&g, x, grad_out, grads, absolute);
        }
        if !want_input {
            return Ok(None);
        }
        let kernel: Vec<T> = if absolute {
            self.kernel.data().iter().map(|v| v.abs()).collect()
        } else {
            self.kernel.data().to_vec()
        };
        let mut gx = vec![T::zero(); x.len()];
        conv_backward_input(&g, &kernel, grad_out.data(), &mut gx);
        Ok(Some(Tensor::new(x.shape().to_vec(), gx)?))
    }

    fn accumulate_param_grads(
        &self,
        g: &ConvGeom,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
        absolute: bool,
    ) {
        let (gk, rest) = grads.split_at_mut(1);
        if absolute {
            let mut tmp = vec![T::zero(); self.kernel.len()];
            conv_backward_kernel(g, x.data(), grad_out.data(), &mut tmp);
            for ((acc, &t), &w) in gk[0].data_mut().iter_mut().zip(&tmp).zip(self.kernel.data()) {
                *acc = *acc + abs_subgradient(w) * t;
            }
        } else {
            conv_backward_kernel(g, x.data(), grad_out.data(), gk[0].data_mut());
            let plane = g.oh * g.ow;
            let gb = rest[0].data_mut();
            for (o, b) in gb.iter_mut().enumerate() {
                let mut acc = T::zero();
                for &v in &grad_out.data()[o * plane..(o + 1) * plane] {
                    acc = acc + v;
                }
                *b = *b + acc;
            }
        }
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, kernel: &[T], input: &[T], out: &mut [T]) {
    if g.sw == 1 {
        return conv_forward_unit(g, kernel, input, out);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ranges = g.ox_ranges();
    for o in 0..g.c_out {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let krow = &kernel[((o * g.c_in + c) * g.kh + ky) * g.kw..][..g.kw];
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let in_row = &in_c[iy * g.w..(iy + 1) * g.w];
                    let out_row = &mut out_o[oy * g.ow..(oy + 1) * g.ow];
                    for (kx, (&wv, &(lo, hi))) in krow.iter().zip(&ranges).enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        if g.sw == 1 {
                            let start = lo + kx - g.pw;
                            let src = &in_row[start..start + (hi - lo)];
                            for (d, &s) in out_row[lo..hi].iter_mut().zip(src) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.sw + kx - g.pw;
                                out_row[ox] = out_row[ox] + wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Scalar>(g: &ConvGeom, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
    if g.sw == 1 {
        return conv_backward_input_unit(g, kernel, grad_out, grad_in);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ranges = g.ox_ranges();
    for o in 0..g.c_out {
        let gy_o = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            let gx_c = &mut grad_in[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let krow = &kernel[((o * g.c_in + c) * g.kh + ky) * g.kw..][..g.kw];
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let gx_row = &mut gx_c[iy * g.w..(iy + 1) * g.w];
                    let gy_row = &gy_o[oy * g.ow..(oy + 1) * g.ow];
                    for (kx, (&wv, &(lo, hi))) in krow.iter().zip(&ranges).enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        if g.sw == 1 {
                            let start = lo + kx - g.pw;
                            let dst = &mut gx_row[start..start + (hi - lo)];
                            for (d, &s) in dst.iter_mut().zip(&gy_row[lo..hi]) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.sw + kx - g.pw;
                                gx_row[ix] = gx_row[ix] + wv * gy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T], grad_k: &mut [T]) {
    if g.sw == 1 {
        return conv_backward_kernel_unit(g, input, grad_out, grad_k);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ranges = g.ox_ranges();
    for o in 0..g.c_out {
        let gy_o = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let base = ((o * g.c_in + c) * g.kh + ky) * g.kw;
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let in_row = &in_c[iy * g.w..(iy + 1) * g.w];
                        let gy_row = &gy_o[oy * g.ow..(oy + 1) * g.ow];
                        if g.sw == 1 {
                            let start = lo + kx - g.pw;
                            for (&a, &b) in gy_row[lo..hi].iter().zip(&in_row[start..start + (hi - lo)]) {
                                acc = acc + a * b;
                            }
                        } else {
                            for ox in lo..hi {
                                acc = acc + gy_row[ox] * in_row[ox * g.sw + kx - g.pw];
                            }
                        }
                    }
                    grad_k[base + kx] = grad_k[base + kx] + acc;
                }
            }
        }
    }
}

// Unit horizontal stride: rows are zero-padded once so every tap is a plain
// sliding window, which lets the fixed-width kernels below stay in registers.

/// Copies each `width`-long row of `src` into a zero row of `width + left
/// + right`, starting at column `left`.
fn pad_rows<T: Scalar>(src: &[T], width: usize, left: usize, right: usize) -> Vec<T> {
    let pw = width + left + right;
    let rows = src.len() / width;
    let mut out = vec![T::zero(); rows * pw];
    for (dst, row) in out.chunks_exact_mut(pw).zip(src.chunks_exact(width)) {
        dst[left..left + width].copy_from_slice(row);
    }
    out
}

fn conv_forward_unit<T: Scalar>(g: &ConvGeom, kernel: &[T], input: &[T], out: &mut [T]) {
    let plane_out = g.oh * g.ow;
    let pwid = g.w + 2 * g.pw;
    let padded = pad_rows(input, g.w, g.pw, g.pw);
    for o in 0..g.c_out {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                let krow = &kernel[((o * g.c_in + c) * g.kh + ky) * g.kw..][..g.kw];
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &padded[(c * g.h + iy) * pwid..][..pwid];
                    correlate_row(krow, src, &mut out_o[oy * g.ow..(oy + 1) * g.ow]);
                }
            }
        }
    }
}

fn conv_backward_input_unit<T: Scalar>(g: &ConvGeom, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let plane_in = g.h * g.w;
    // gyp[j] = gy[j + pw - (kw - 1)], zero outside the output row, so that
    // gx[ix] = sum_m rev[m] * gyp[ix + m] with rev the reversed kernel row.
    let gwid = g.w + g.kw - 1;
    let shift = g.pw as isize - (g.kw as isize - 1);
    let mut gyp = vec![T::zero(); g.c_out * g.oh * gwid];
    for (dst, row) in gyp.chunks_exact_mut(gwid).zip(grad_out.chunks_exact(g.ow)) {
        for (j, d) in dst.iter_mut().enumerate() {
            let ox = j as isize + shift;
            if ox >= 0 && (ox as usize) < g.ow {
                *d = row[ox as usize];
            }
        }
    }
    let mut rev = vec![T::zero(); g.kw];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            let gx_c = &mut grad_in[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let krow = &kernel[((o * g.c_in + c) * g.kh + ky) * g.kw..][..g.kw];
                for (r, &k) in rev.iter_mut().zip(krow.iter().rev()) {
                    *r = k;
                }
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &gyp[(o * g.oh + oy) * gwid..][..gwid];
                    correlate_row(&rev, src, &mut gx_c[iy * g.w..(iy + 1) * g.w]);
                }
            }
        }
    }
}

fn conv_backward_kernel_unit<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T], grad_k: &mut [T]) {
    let plane_out = g.oh * g.ow;
    let pwid = g.w + 2 * g.pw;
    let padded = pad_rows(input, g.w, g.pw, g.pw);
    for o in 0..g.c_out {
        let gy_o = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                let base = ((o * g.c_in + c) * g.kh + ky) * g.kw;
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &padded[(c * g.h + iy) * pwid..][..pwid];
                    correlate_grad(&gy_o[oy * g.ow..(oy + 1) * g.ow], src, &mut grad_k[base..base + g.kw]);
                }
            }
        }
    }
}

/// `dst[i] += sum_k w[k] * src[i + k]` for every `i`.
fn correlate_row<T: Scalar>(w: &[T], src: &[T], dst: &mut [T]) {
    match w.len() {
        1 => correlate_fixed::<T, 1>(w, src, dst),
        3 => correlate_fixed::<T, 3>(w, src, dst),
        5 => correlate_fixed::<T, 5>(w, src, dst),
        7 => correlate_fixed::<T, 7>(w, src, dst),
        _ => {
            for (d, win) in dst.iter_mut().zip(src.windows(w.len())) {
                let mut acc = *d;
                for (&a, &b) in w.iter().zip(win) {
                    acc = acc + a * b;
                }
                *d = acc;
            }
        }
    }
}

#[inline(always)]
fn correlate_fixed<T: Scalar, const K: usize>(w: &[T], src: &[T], dst: &mut [T]) {
    let w: [T; K] = w.try_into().expect("tap count");
    for (d, win) in dst.iter_mut().zip(src.windows(K)) {
        let mut acc = *d;
        for k in 0..K {
            acc = acc + w[k] * win[k];
        }
        *d = acc;
    }
}

/// `acc[k] += sum_i gy[i] * src[i + k]` for every tap `k`.
fn correlate_grad<T: Scalar>(gy: &[T], src: &[T], acc: &mut [T]) {
    match acc.len() {
        1 => correlate_grad_fixed::<T, 1>(gy, src, acc),
        3 => correlate_grad_fixed::<T, 3>(gy, src, acc),
        5 => correlate_grad_fixed::<T, 5>(gy, src, acc),
        7 => correlate_grad_fixed::<T, 7>(gy, src, acc),
        _ => {
            for (k, a) in acc.iter_mut().enumerate() {
                let mut s = T::zero();
                for (&g, &x) in gy.iter().zip(&src[k..k + gy.len()]) {
                    s = s + g * x;
                }
                *a = *a + s;
            }
        }
    }
}

#[inline(always)]
fn correlate_grad_fixed<T: Scalar, const K: usize>(gy: &[T], src: &[T], acc: &mut [T]) {
    let mut s = [T::zero(); K];
    for (&g, win) in gy.iter().zip(src.windows(K)) {
        for k in 0..K {
            s[k] = s[k] + g * win[k];
        }
    }
    for (a, v) in acc.iter_mut().zip(s) {
        *a = *a + v;
    }
}

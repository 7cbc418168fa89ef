//! Strided 2-D convolution, transposed convolution and batch normalization.
//!
//! Convolutions lower to a single GEMM over an im2col buffer covering the
//! whole batch; the column index runs over `(batch, out_y, out_x)`.

use super::graph::{Backward, Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use crate::error::{ensure, Result};

/// Geometry of a square-kernel convolution from a `(B, C, H, W)` image to
/// its `(out_h, out_w)` sliding-window grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        ensure!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel && stride > 0,
            Input,
            "kernel {} does not fit a {}x{} input with padding {}",
            kernel,
            height,
            width,
            pad
        );
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry) -> Vec<T> {
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &image[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let base = (b * g.out_h + oy) * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let ncols = g.col_cols();
    let plane = g.height * g.width;
    let mut image = vec![T::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut image[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let base = (b * g.out_h + oy) * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                let d = &mut dst_row[ix as usize];
                                *d = *d + src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    image
}

/// `(B, C, P)` -> `(C, B * P)`.
fn to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[c * batch * plane + b * plane..c * batch * plane + (b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `(C, B * P)` -> `(B, C, P)`.
fn from_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[c * batch * plane + b * plane..c * batch * plane + (b + 1) * plane];
            out[(b * channels + c) * plane..(b * channels + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

struct Conv2d {
    geom: ConvGeometry,
    out_channels: usize,
}

impl<T: Scalar> Backward<T> for Conv2d {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (kdim, ncols, oc) = (g.col_rows(), g.col_cols(), self.out_channels);
        let dy = to_channel_major(grad.data(), g.batch, oc, g.out_h * g.out_w);

        let dw = needs[1].then(|| {
            let cols = im2col(x.data(), g);
            let mut dw = Tensor::zeros(w.shape());
            T::gemm(
                oc, ncols, kdim, T::one(),
                &dy, ncols as isize, 1,
                &cols, 1, ncols as isize,
                T::zero(), dw.data_mut(), kdim as isize, 1,
            );
            dw
        });
        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); kdim * ncols];
            T::gemm(
                kdim, oc, ncols, T::one(),
                w.data(), 1, kdim as isize,
                &dy, ncols as isize, 1,
                T::zero(), &mut dcols, ncols as isize, 1,
            );
            Tensor::from_vec(x.shape(), col2im(&dcols, g)).expect("shape")
        });
        vec![dx, dw]
    }
}

struct ConvTranspose2d {
    /// Geometry of the equivalent forward convolution from output to input.
    geom: ConvGeometry,
    in_channels: usize,
}

impl<T: Scalar> Backward<T> for ConvTranspose2d {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (kdim, ncols, ic) = (g.col_rows(), g.col_cols(), self.in_channels);
        let cols = im2col(grad.data(), g);

        let dx = needs[0].then(|| {
            let mut dxm = vec![T::zero(); ic * ncols];
            T::gemm(
                ic, kdim, ncols, T::one(),
                w.data(), kdim as isize, 1,
                &cols, ncols as isize, 1,
                T::zero(), &mut dxm, ncols as isize, 1,
            );
            let data = from_channel_major(&dxm, g.batch, ic, g.out_h * g.out_w);
            Tensor::from_vec(x.shape(), data).expect("shape")
        });
        let dw = needs[1].then(|| {
            let xm = to_channel_major(x.data(), g.batch, ic, g.out_h * g.out_w);
            let mut dw = Tensor::zeros(w.shape());
            T::gemm(
                ic, ncols, kdim, T::one(),
                &xm, ncols as isize, 1,
                &cols, 1, ncols as isize,
                T::zero(), dw.data_mut(), kdim as isize, 1,
            );
            dw
        });
        vec![dx, dw]
    }
}

struct BatchNormTrain<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Backward<T> for BatchNormTrain<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, plane) = (self.channels, self.plane);
        let gamma = inputs[1].data();
        let batch = grad.len() / (c * plane);
        let m = T::from_usize(batch * plane).expect("count");
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (i, (&dy, &xh)) in grad.data().iter().zip(&self.xhat).enumerate() {
            let ch = (i / plane) % c;
            sum_dy[ch] = sum_dy[ch] + dy;
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy * xh;
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(grad.shape());
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                let ch = (i / plane) % c;
                let dy = grad.data()[i];
                *d = gamma[ch] * self.inv_std[ch] / m
                    * (m * dy - sum_dy[ch] - self.xhat[i] * sum_dy_xhat[ch]);
            }
            dx
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], sum_dy_xhat.clone()).expect("shape")),
            needs[2].then(|| Tensor::from_vec(&[c], sum_dy.clone()).expect("shape")),
        ]
    }
}

struct ChannelAffine<T> {
    /// `x` is multiplied by `scale[ch] * gamma[ch]`; `xhat` is recorded for the gamma gradient.
    scale: Vec<T>,
    xhat: Vec<T>,
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Backward<T> for ChannelAffine<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, plane) = (self.channels, self.plane);
        let gamma = inputs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, &dy) in grad.data().iter().enumerate() {
            let ch = (i / plane) % c;
            dbeta[ch] = dbeta[ch] + dy;
            dgamma[ch] = dgamma[ch] + dy * self.xhat[i];
        }
        let dx = needs[0].then(|| {
            let mut dx = grad.clone();
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                let ch = (i / plane) % c;
                *d = *d * gamma[ch] * self.scale[ch];
            }
            dx
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dgamma).expect("shape")),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta).expect("shape")),
        ]
    }
}

/// Per-channel batch moments observed by a training-mode normalization.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running averages.
    pub var_unbiased: Vec<T>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    ensure!(
        shape.len() == 2 || shape.len() == 4,
        Input,
        "batch norm expects (B, C) or (B, C, H, W), got {:?}",
        shape
    );
    Ok((shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Graph<T> {
    /// Convolution of `x (B, C, H, W)` with `w (O, C, k, k)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(
            sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3],
            Input,
            "conv2d: input {:?} incompatible with kernel {:?}",
            sx,
            sw
        );
        let geom = ConvGeometry::new(sx[0], sx[1], sx[2], sx[3], sw[2], stride, pad)?;
        let (kdim, ncols, oc) = (geom.col_rows(), geom.col_cols(), sw[0]);
        let cols = im2col(self.value(x).data(), &geom);
        let mut ym = vec![T::zero(); oc * ncols];
        T::gemm(
            oc, kdim, ncols, T::one(),
            self.value(w).data(), kdim as isize, 1,
            &cols, ncols as isize, 1,
            T::zero(), &mut ym, ncols as isize, 1,
        );
        let y = from_channel_major(&ym, geom.batch, oc, geom.out_h * geom.out_w);
        let value = Tensor::from_vec(&[geom.batch, oc, geom.out_h, geom.out_w], y)?;
        Ok(self.record(&[x, w], value, Conv2d { geom, out_channels: oc }))
    }

    /// Transposed convolution of `x (B, C_in, H, W)` with `w (C_in, C_out, k, k)`;
    /// output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(
            sx.len() == 4 && sw.len() == 4 && sx[0] > 0 && sx[1] == sw[0] && sw[2] == sw[3],
            Input,
            "conv_transpose2d: input {:?} incompatible with kernel {:?}",
            sx,
            sw
        );
        let k = sw[2];
        let out_h = (sx[2] - 1) * stride + k;
        let out_w = (sx[3] - 1) * stride + k;
        ensure!(
            out_h > 2 * pad && out_w > 2 * pad,
            Input,
            "conv_transpose2d: padding {} too large",
            pad
        );
        let (out_h, out_w) = (out_h - 2 * pad, out_w - 2 * pad);
        let geom = ConvGeometry::new(sx[0], sw[1], out_h, out_w, k, stride, pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (sx[2], sx[3]));
        let (kdim, ncols, ic) = (geom.col_rows(), geom.col_cols(), sx[1]);
        let xm = to_channel_major(self.value(x).data(), sx[0], ic, sx[2] * sx[3]);
        let mut cols = vec![T::zero(); kdim * ncols];
        T::gemm(
            kdim, ic, ncols, T::one(),
            self.value(w).data(), 1, kdim as isize,
            &xm, ncols as isize, 1,
            T::zero(), &mut cols, ncols as isize, 1,
        );
        let y = col2im(&cols, &geom);
        let value = Tensor::from_vec(&[sx[0], sw[1], out_h, out_w], y)?;
        Ok(self.record(&[x, w], value, ConvTranspose2d { geom, in_channels: ic }))
    }

    /// Normalizes with the batch's own statistics and returns them for
    /// running-average bookkeeping.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchMoments<T>)> {
        let shape = self.shape(x).to_vec();
        let (c, plane) = channel_layout(&shape)?;
        let batch = shape[0];
        let count = batch * plane;
        ensure!(count > 1, Input, "batch norm needs more than one value per channel in training mode");
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / plane) % c;
            mean[ch] = mean[ch] + v;
        }
        let n = T::from_usize(count).expect("count");
        for m in &mut mean {
            *m = *m / n;
        }
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / plane) % c;
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        }
        let eps = T::from_f64c(eps);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / n + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / plane) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let n1 = T::from_usize(count - 1).expect("count");
        let moments = BatchMoments {
            mean,
            var_unbiased: var.iter().map(|&s| s / n1).collect(),
        };
        let value = Tensor::from_vec(&shape, out)?;
        let node = self.record(
            &[x, gamma, beta],
            value,
            BatchNormTrain {
                xhat,
                inv_std,
                channels: c,
                plane,
            },
        );
        Ok((node, moments))
    }

    /// Normalizes with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (c, plane) = channel_layout(&shape)?;
        ensure!(
            running_mean.len() == c && running_var.len() == c,
            Input,
            "running statistics have wrong width"
        );
        let eps = T::from_f64c(eps);
        let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / plane) % c;
            let h = (v - running_mean[ch]) * scale[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.record(
            &[x, gamma, beta],
            value,
            ChannelAffine {
                scale,
                xhat,
                channels: c,
                plane,
            },
        ))
    }
}

//! 2-D convolution lowered to a matrix product over extracted patches.
//!
//! Layouts are NCHW for activations and OIHW for kernels. For each image the
//! patch matrix has shape `[C*KH*KW, OH*OW]`, so the output is
//! `kernel[O, C*KH*KW] x cols`.

use crate::error::{Result, TensorError};
use crate::linalg::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::shape("conv2d", "input [N,C,H,W]", input));
        }
        if kernel.len() != 4 {
            return Err(TensorError::shape("conv2d", "kernel [O,I,KH,KW]", kernel));
        }
        if kernel[1] != input[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel input channels {} to equal input channels {}", kernel[1], input[1]),
                kernel,
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "zero-size output: input {h}x{w} with padding {padding} is smaller than kernel {kh}x{kw}"
                ),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: kernel[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// A 1x1 stride-1 unpadded convolution needs no patch extraction.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (plane, plen) = (g.out_plane(), g.patch_len());
    let out_image = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_image];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; plen * plane]
    };
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let patches: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            plen,
            plane,
            Mat::new(kernel, plen, 1),
            Mat::new(patches, plane, 1),
            &mut out[n * out_image..(n + 1) * out_image],
            false,
        );
    }
    out
}

/// Accumulates input and/or kernel gradients for upstream gradient `dout`.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
) {
    let (plane, plen) = (g.out_plane(), g.patch_len());
    let out_image = g.out_channels * plane;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; plen * plane]
    };
    let mut dcols = vec![0.0; plen * plane];
    for n in 0..g.batch {
        let dy = &dout[n * out_image..(n + 1) * out_image];
        if let Some(dk) = dkernel.as_deref_mut() {
            let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
            let patches: &[f64] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK[O, P] += dY[O, plane] * cols^T[plane, P]
            gemm(
                g.out_channels,
                plane,
                plen,
                Mat::new(dy, plane, 1),
                Mat::new(patches, 1, plane),
                dk,
                true,
            );
        }
        if let Some(dx) = dinput.as_deref_mut() {
            let dx_n = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                gemm(
                    plen,
                    g.out_channels,
                    plane,
                    Mat::new(kernel, 1, plen),
                    Mat::new(dy, plane, 1),
                    dx_n,
                    true,
                );
            } else {
                // dcols[P, plane] = K^T[P, O] * dY[O, plane]
                gemm(
                    plen,
                    g.out_channels,
                    plane,
                    Mat::new(kernel, 1, plen),
                    Mat::new(dy, plane, 1),
                    &mut dcols,
                    false,
                );
                col2im_add(g, &dcols, dx_n);
            }
        }
    }
}

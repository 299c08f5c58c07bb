//! Batched convolution and pooling kernels over `[N, C, H, W]` buffers.
//!
//! Convolution lowers each frame with im2col and multiplies by the kernel
//! matrix. Frames are processed in fixed-size chunks; kernel-gradient
//! partials are reduced in chunk order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::element::{gemm, MatRef};
use super::Element;

const FRAMES_PER_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_frame(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

fn im2col<T: Element>(frame: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let src = &frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // valid output columns: 0 <= ox + kx - pad < w
                let x_lo = g.pad.saturating_sub(kx).min(ow);
                let x_hi = (g.w + g.pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        d.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    d[..x_lo].fill(T::zero());
                    for ox in x_lo..x_hi {
                        d[ox] = srow[ox + kx - g.pad];
                    }
                    d[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, frame: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let dst = &mut frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x_lo = g.pad.saturating_sub(kx).min(ow);
                let x_hi = (g.w + g.pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let drow = &mut dst[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let s = &src[oy * ow..(oy + 1) * ow];
                    for ox in x_lo..x_hi {
                        drow[ox + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let frame_out = g.c_out * plane;
    let mut out = vec![T::zero(); g.n * frame_out];
    out.par_chunks_mut(frame_out).enumerate().for_each_init(
        || vec![T::zero(); patch * plane],
        |cols, (f, out_f)| {
            im2col(&input[f * g.in_frame()..(f + 1) * g.in_frame()], g, cols);
            gemm(
                MatRef::row_major(kernel, g.c_out, patch),
                MatRef::row_major(cols, patch, plane),
                out_f,
                T::zero(),
            );
            for (o, row) in out_f.chunks_mut(plane).enumerate() {
                let b = bias[o];
                row.iter_mut().for_each(|v| *v += b);
            }
        },
    );
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let frame_out = g.c_out * plane;
    let in_frame = g.in_frame();

    let mut bias = vec![T::zero(); g.c_out];
    for f in 0..g.n {
        for (o, b) in bias.iter_mut().enumerate() {
            let off = f * frame_out + o * plane;
            *b += grad_out[off..off + plane].iter().copied().sum::<T>();
        }
    }

    let process = |chunk: usize, mut dx: Option<&mut [T]>| -> Option<Vec<T>> {
        let first = chunk * FRAMES_PER_CHUNK;
        let last = (first + FRAMES_PER_CHUNK).min(g.n);
        let mut cols = vec![T::zero(); if need_kernel { patch * plane } else { 0 }];
        let mut dcols = vec![T::zero(); if dx.is_some() { patch * plane } else { 0 }];
        let mut dw = if need_kernel {
            Some(vec![T::zero(); g.c_out * patch])
        } else {
            None
        };
        for f in first..last {
            let dy = MatRef::row_major(&grad_out[f * frame_out..(f + 1) * frame_out], g.c_out, plane);
            if let Some(dw) = dw.as_mut() {
                im2col(&input[f * in_frame..(f + 1) * in_frame], g, &mut cols);
                gemm(dy, MatRef::row_major(&cols, patch, plane).t(), dw, T::one());
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(
                    MatRef::row_major(kernel, g.c_out, patch).t(),
                    dy,
                    &mut dcols,
                    T::zero(),
                );
                let local = f - first;
                col2im_add(&dcols, g, &mut dx[local * in_frame..(local + 1) * in_frame]);
            }
        }
        dw
    };

    let n_chunks = g.n.div_ceil(FRAMES_PER_CHUNK);
    let (dinput, partials): (Option<Vec<T>>, Vec<Option<Vec<T>>>) = if need_input {
        let mut dx = vec![T::zero(); g.n * in_frame];
        let partials = dx
            .par_chunks_mut(FRAMES_PER_CHUNK * in_frame)
            .enumerate()
            .map(|(ci, chunk)| process(ci, Some(chunk)))
            .collect();
        (Some(dx), partials)
    } else {
        let partials = (0..n_chunks)
            .into_par_iter()
            .map(|ci| process(ci, None))
            .collect();
        (None, partials)
    };

    let dkernel = if need_kernel {
        let mut total = vec![T::zero(); g.c_out * patch];
        for p in partials.into_iter().flatten() {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        Some(total)
    } else {
        None
    };

    ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias,
    }
}

/// 2x2 / stride-2 max pooling. Returns the pooled buffer and, per output
/// element, the flat input index that won (first in row-major order on ties).
pub fn max_pool2x2_forward<T: Element>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn global_avg_pool_forward<T: Element>(input: &[T], planes: usize, area: usize) -> Vec<T> {
    let inv = T::from_f64_lossy(1.0 / area as f64);
    input
        .chunks(area)
        .take(planes)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

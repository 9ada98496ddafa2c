//! Separable local convolution.
//!
//! Every output pixel owns four 1D kernels: a vertical and a horizontal one
//! for each input frame. The 2D filter applied to a frame around pixel
//! `(y, x)` is the outer product `k_v ⊗ k_h`, and the synthesized pixel is the
//! sum of the two filtered frames:
//!
//! ```text
//! out_c(y, x) = Σ_i Σ_j k1v[i] k1h[j] P1_c(y+i, x+j) + Σ_i Σ_j k2v[i] k2h[j] P2_c(y+i, x+j)
//! ```
//!
//! where `P` is the frame replicate-padded by `K/2` on every side. Kernels are
//! applied as given; nothing normalizes them.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, Scalar, CHANNELS};

/// Four per-pixel kernel tensors, each laid out `(K, H, W)`: tap index first,
/// then the pixel it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T = f32> {
    pub k1v: Array3<T>,
    pub k1h: Array3<T>,
    pub k2v: Array3<T>,
    pub k2h: Array3<T>,
}

impl<T: Scalar> KernelField<T> {
    pub fn new(k1v: Array3<T>, k1h: Array3<T>, k2v: Array3<T>, k2h: Array3<T>) -> Result<Self> {
        let field = KernelField { k1v, k1h, k2v, k2h };
        field.validate()?;
        Ok(field)
    }

    pub fn zeros(kernel_size: usize, height: usize, width: usize) -> Self {
        let z = Array3::zeros((kernel_size, height, width));
        KernelField {
            k1v: z.clone(),
            k1h: z.clone(),
            k2v: z.clone(),
            k2h: z,
        }
    }

    /// Every pixel gets the same four kernels.
    pub fn uniform(
        height: usize,
        width: usize,
        k1v: &[T],
        k1h: &[T],
        k2v: &[T],
        k2h: &[T],
    ) -> Result<Self> {
        let k = k1v.len();
        if [k1h.len(), k2v.len(), k2h.len()].iter().any(|&l| l != k) {
            return Err(Error::dim("kernel lengths differ"));
        }
        let tile = |v: &[T]| Array3::from_shape_fn((k, height, width), |(i, _, _)| v[i]);
        KernelField::new(tile(k1v), tile(k1h), tile(k2v), tile(k2h))
    }

    pub fn kernel_size(&self) -> usize {
        self.k1v.dim().0
    }

    pub fn height(&self) -> usize {
        self.k1v.dim().1
    }

    pub fn width(&self) -> usize {
        self.k1v.dim().2
    }

    pub fn tensors(&self) -> [&Array3<T>; 4] {
        [&self.k1v, &self.k1h, &self.k2v, &self.k2h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array3<T>; 4] {
        [&mut self.k1v, &mut self.k1h, &mut self.k2v, &mut self.k2h]
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.k1v.dim();
        for t in self.tensors() {
            if t.dim() != dim {
                return Err(Error::dim(format!(
                    "kernel tensors disagree in shape: {:?} vs {:?}",
                    dim,
                    t.dim()
                )));
            }
        }
        let (k, h, w) = dim;
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("kernel field has zero spatial size"));
        }
        Ok(())
    }

    fn check_against(&self, frame1: &Image<T>, frame2: &Image<T>) -> Result<()> {
        self.validate()?;
        frame1.same_size(frame2)?;
        if frame1.size() != (self.height(), self.width()) {
            return Err(Error::dim(format!(
                "frames are {:?} but kernels are {}x{}",
                frame1.size(),
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// A frame extended by `K/2` pixels on every side by repeating the border.
#[derive(Debug, Clone)]
pub struct PaddedFrame<T = f32> {
    data: Array3<T>,
    radius: usize,
}

impl<T: Scalar> PaddedFrame<T> {
    pub fn new(frame: &Image<T>, kernel_size: usize) -> Self {
        let r = kernel_size / 2;
        let (h, w) = frame.size();
        let src = frame.data();
        let data = Array3::from_shape_fn((CHANNELS, h + 2 * r, w + 2 * r), |(c, y, x)| {
            let sy = y.saturating_sub(r).min(h - 1);
            let sx = x.saturating_sub(r).min(w - 1);
            src[[c, sy, sx]]
        });
        PaddedFrame { data, radius: r }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn radius(&self) -> usize {
        self.radius
    }
}

/// Row-major padded planes with a pixel-major copy of the kernels, shared by
/// the forward and backward passes.
struct Prepared<T> {
    h: usize,
    w: usize,
    k: usize,
    pw: usize,
    planes: [Vec<T>; 2],
    // (H, W, K) contiguous
    kernels: [Vec<T>; 4],
}

impl<T: Scalar> Prepared<T> {
    fn new(frame1: &Image<T>, frame2: &Image<T>, kernels: &KernelField<T>) -> Self {
        let k = kernels.kernel_size();
        let (h, w) = frame1.size();
        let pad = |f: &Image<T>| {
            let p = PaddedFrame::new(f, k);
            p.data
                .as_standard_layout()
                .iter()
                .copied()
                .collect::<Vec<T>>()
        };
        let pixel_major = |t: &Array3<T>| {
            t.view()
                .permuted_axes([1, 2, 0])
                .iter()
                .copied()
                .collect::<Vec<T>>()
        };
        Prepared {
            h,
            w,
            k,
            pw: w + k - 1,
            planes: [pad(frame1), pad(frame2)],
            kernels: [
                pixel_major(&kernels.k1v),
                pixel_major(&kernels.k1h),
                pixel_major(&kernels.k2v),
                pixel_major(&kernels.k2h),
            ],
        }
    }

    fn plane_len(&self) -> usize {
        (self.h + self.k - 1) * self.pw
    }
}

/// Synthesize the output frame from two frames and their per-pixel kernels.
pub fn local_sepconv_forward<T: Scalar>(
    frame1: &Image<T>,
    frame2: &Image<T>,
    kernels: &KernelField<T>,
) -> Result<Image<T>> {
    kernels.check_against(frame1, frame2)?;
    let p = Prepared::new(frame1, frame2, kernels);
    let (h, w, k, pw) = (p.h, p.w, p.k, p.pw);
    let plane = p.plane_len();

    // pixel-major output, CHANNELS values per pixel
    let mut out = vec![T::zero(); h * w * CHANNELS];
    out.par_chunks_mut(w * CHANNELS)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let kbase = (y * w + x) * k;
                let mut acc = [T::zero(); CHANNELS];
                for term in 0..2 {
                    let kv = &p.kernels[2 * term][kbase..kbase + k];
                    let kh = &p.kernels[2 * term + 1][kbase..kbase + k];
                    let src = &p.planes[term];
                    for (i, &wv) in kv.iter().enumerate() {
                        let off = (y + i) * pw + x;
                        for (c, a) in acc.iter_mut().enumerate() {
                            let line = &src[c * plane + off..c * plane + off + k];
                            let r = line
                                .iter()
                                .zip(kh)
                                .fold(T::zero(), |s, (&v, &wh)| s + v * wh);
                            *a = *a + wv * r;
                        }
                    }
                }
                row[x * CHANNELS..(x + 1) * CHANNELS].copy_from_slice(&acc);
            }
        });

    let data = Array3::from_shape_vec((h, w, CHANNELS), out)
        .expect("shape")
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned();
    Ok(Image::new_unchecked(data))
}

/// Gradients of a scalar loss with respect to the four kernel tensors, given
/// `grad_out = ∂loss/∂out` (same layout as an image). The frames are treated
/// as constants.
pub fn local_sepconv_backward<T: Scalar>(
    grad_out: &Array3<T>,
    frame1: &Image<T>,
    frame2: &Image<T>,
    kernels: &KernelField<T>,
) -> Result<KernelField<T>> {
    kernels.check_against(frame1, frame2)?;
    if grad_out.dim() != (CHANNELS, frame1.height(), frame1.width()) {
        return Err(Error::dim(format!(
            "grad_out has shape {:?}, expected {:?}",
            grad_out.dim(),
            (CHANNELS, frame1.height(), frame1.width())
        )));
    }
    let p = Prepared::new(frame1, frame2, kernels);
    let (h, w, k, pw) = (p.h, p.w, p.k, p.pw);
    let plane = p.plane_len();
    let g: Vec<T> = grad_out
        .view()
        .permuted_axes([1, 2, 0])
        .iter()
        .copied()
        .collect();

    // four gradient tensors, pixel-major, interleaved per row for parallel writes
    let mut grads = vec![T::zero(); 4 * h * w * k];
    grads
        .par_chunks_mut(4 * w * k)
        .enumerate()
        .for_each(|(y, row)| {
            let mut q = vec![T::zero(); k];
            for x in 0..w {
                let pix = y * w + x;
                let gc = &g[pix * CHANNELS..(pix + 1) * CHANNELS];
                if gc.iter().all(|v| v.is_zero()) {
                    continue;
                }
                let kbase = pix * k;
                for term in 0..2 {
                    let kv = &p.kernels[2 * term][kbase..kbase + k];
                    let kh = &p.kernels[2 * term + 1][kbase..kbase + k];
                    let src = &p.planes[term];
                    let (gv_off, gh_off) =
                        ((2 * term) * w * k + x * k, (2 * term + 1) * w * k + x * k);
                    for i in 0..k {
                        let off = (y + i) * pw + x;
                        // q[j] = Σ_c g_c · P_c(y+i, x+j)
                        for (j, qj) in q.iter_mut().enumerate() {
                            let mut s = T::zero();
                            for (c, &gcv) in gc.iter().enumerate() {
                                s = s + gcv * src[c * plane + off + j];
                            }
                            *qj = s;
                        }
                        let dv = q.iter().zip(kh).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        row[gv_off + i] = row[gv_off + i] + dv;
                        let wv = kv[i];
                        for (j, &qj) in q.iter().enumerate() {
                            row[gh_off + j] = row[gh_off + j] + wv * qj;
                        }
                    }
                }
            }
        });

    // (H, 4, W, K) -> four (K, H, W) tensors
    let all = Array3::from_shape_vec((h, 4 * w, k), grads).expect("shape");
    let take = |t: usize| {
        all.slice(ndarray::s![.., t * w..(t + 1) * w, ..])
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
    };
    Ok(KernelField {
        k1v: take(0),
        k1h: take(1),
        k2v: take(2),
        k2h: take(3),
    })
}

/// Reference forward pass: explicit loops over pixel, channel and both kernel
/// taps with border clamping done inline. Slow; used as a test oracle.
pub fn naive_forward_oracle<T: Scalar>(
    frame1: &Image<T>,
    frame2: &Image<T>,
    kernels: &KernelField<T>,
) -> Result<Image<T>> {
    kernels.check_against(frame1, frame2)?;
    let (h, w) = frame1.size();
    let k = kernels.kernel_size();
    let r = k as isize / 2;
    let at = |f: &Image<T>, c: usize, y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        f.get(c, yy, xx)
    };
    let mut out = Array3::zeros((CHANNELS, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut sum = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        let sy = y as isize + i as isize - r;
                        let sx = x as isize + j as isize - r;
                        sum = sum
                            + kernels.k1v[[i, y, x]]
                                * kernels.k1h[[j, y, x]]
                                * at(frame1, c, sy, sx)
                            + kernels.k2v[[i, y, x]]
                                * kernels.k2h[[j, y, x]]
                                * at(frame2, c, sy, sx);
                    }
                }
                out[[c, y, x]] = sum;
            }
        }
    }
    Ok(Image::new_unchecked(out))
}

/// The 2D kernel `M[i, j] = k_v[i] · k_h[j]` represented by a pair of 1D kernels.
pub fn outer_kernel<T: Scalar>(k_v: &[T], k_h: &[T]) -> Result<Array2<T>> {
    if k_v.len() != k_h.len() {
        return Err(Error::dim(format!(
            "kernel lengths differ: {} vs {}",
            k_v.len(),
            k_h.len()
        )));
    }
    if k_v.len().is_multiple_of(2) {
        return Err(Error::config(format!(
            "kernel size must be odd, got {}",
            k_v.len()
        )));
    }
    Ok(Array2::from_shape_fn((k_v.len(), k_h.len()), |(i, j)| {
        k_v[i] * k_h[j]
    }))
}

/// A length-`k` kernel with a single `value` at the center tap.
pub fn centered_delta<T: Scalar>(k: usize, value: T) -> Vec<T> {
    let mut v = vec![T::zero(); k];
    v[k / 2] = value;
    v
}

/// Sum of the kernel taps at every pixel, `(H, W)`. Handy for inspecting how
/// far a trained network is from brightness-preserving kernels.
pub fn kernel_mass<T: Scalar>(kernels: &KernelField<T>) -> Array2<T> {
    let s = |t: &Array3<T>| t.sum_axis(Axis(0));
    s(&kernels.k1v) * s(&kernels.k1h) + s(&kernels.k2v) * s(&kernels.k2h)
}

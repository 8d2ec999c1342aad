//! Slice-level bilinear kernels shared by the array API and the autograd ops.
//!
//! Layout is channel-first and contiguous: an image is `C x H x W`, a
//! displacement field is `2 x H x W` with channel 0 the row component and
//! channel 1 the column component. Sample coordinates are clamped to the grid,
//! so out-of-grid lookups read the border.

use num_traits::Float;

/// Bilinear stencil for one sample coordinate along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Axis<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
    /// False when the coordinate was clamped; the derivative is then zero.
    pub active: bool,
}

#[inline]
pub(crate) fn axis<T: Float>(coord: T, n: usize) -> Axis<T> {
    let max = T::from(n - 1).unwrap();
    let (c, active) = if coord < T::zero() {
        (T::zero(), false)
    } else if coord > max {
        (max, false)
    } else {
        (coord, true)
    };
    let lo = c.floor().to_usize().unwrap().min(n - 1);
    let hi = (lo + 1).min(n - 1);
    Axis {
        lo,
        hi,
        frac: c - T::from(lo).unwrap(),
        active,
    }
}

/// Bilinear read of a single `H x W` plane at `(row, col)`.
#[inline]
pub(crate) fn sample<T: Float>(plane: &[T], w: usize, ay: Axis<T>, ax: Axis<T>) -> T {
    let one = T::one();
    let v00 = plane[ay.lo * w + ax.lo];
    let v01 = plane[ay.lo * w + ax.hi];
    let v10 = plane[ay.hi * w + ax.lo];
    let v11 = plane[ay.hi * w + ax.hi];
    (one - ay.frac) * ((one - ax.frac) * v00 + ax.frac * v01)
        + ay.frac * ((one - ax.frac) * v10 + ax.frac * v11)
}

/// `out[c, p] = img[c, p + phi(p)]` for every channel.
pub(crate) fn warp_forward<T: Float>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    phi: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    debug_assert_eq!(img.len(), channels * hw);
    debug_assert_eq!(phi.len(), 2 * hw);
    debug_assert_eq!(out.len(), channels * hw);
    for r in 0..h {
        for k in 0..w {
            let p = r * w + k;
            let ay = axis(T::from(r).unwrap() + phi[p], h);
            let ax = axis(T::from(k).unwrap() + phi[hw + p], w);
            for c in 0..channels {
                out[c * hw + p] = sample(&img[c * hw..(c + 1) * hw], w, ay, ax);
            }
        }
    }
}

/// Vector-Jacobian product of [`warp_forward`] with respect to the image and
/// the displacement field. Gradients are accumulated into the given buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_backward<T: Float>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    phi: &[T],
    grad_out: &[T],
    mut grad_img: Option<&mut [T]>,
    mut grad_phi: Option<&mut [T]>,
) {
    let hw = h * w;
    let one = T::one();
    for r in 0..h {
        for k in 0..w {
            let p = r * w + k;
            let ay = axis(T::from(r).unwrap() + phi[p], h);
            let ax = axis(T::from(k).unwrap() + phi[hw + p], w);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for c in 0..channels {
                let g = grad_out[c * hw + p];
                if g == T::zero() {
                    continue;
                }
                let plane = &img[c * hw..(c + 1) * hw];
                if let Some(gi) = grad_img.as_deref_mut() {
                    let base = c * hw;
                    gi[base + ay.lo * w + ax.lo] =
                        gi[base + ay.lo * w + ax.lo] + g * (one - ay.frac) * (one - ax.frac);
                    gi[base + ay.lo * w + ax.hi] =
                        gi[base + ay.lo * w + ax.hi] + g * (one - ay.frac) * ax.frac;
                    gi[base + ay.hi * w + ax.lo] =
                        gi[base + ay.hi * w + ax.lo] + g * ay.frac * (one - ax.frac);
                    gi[base + ay.hi * w + ax.hi] =
                        gi[base + ay.hi * w + ax.hi] + g * ay.frac * ax.frac;
                }
                if grad_phi.is_some() {
                    let v00 = plane[ay.lo * w + ax.lo];
                    let v01 = plane[ay.lo * w + ax.hi];
                    let v10 = plane[ay.hi * w + ax.lo];
                    let v11 = plane[ay.hi * w + ax.hi];
                    if ay.active {
                        gy = gy + g * ((one - ax.frac) * (v10 - v00) + ax.frac * (v11 - v01));
                    }
                    if ax.active {
                        gx = gx + g * ((one - ay.frac) * (v01 - v00) + ay.frac * (v11 - v10));
                    }
                }
            }
            if let Some(gp) = grad_phi.as_deref_mut() {
                gp[p] = gp[p] + gy;
                gp[hw + p] = gp[hw + p] + gx;
            }
        }
    }
}

/// Scaling and squaring: `phi = v / 2^steps`, then `steps` self-compositions
/// `phi <- phi + phi o (id + phi)`.
pub(crate) fn integrate<T: Float>(v: &[T], h: usize, w: usize, steps: u32) -> Vec<T> {
    let scale = T::from(0.5f64.powi(steps as i32)).unwrap();
    let mut phi: Vec<T> = v.iter().map(|&x| x * scale).collect();
    let mut tmp = vec![T::zero(); phi.len()];
    for _ in 0..steps {
        warp_forward(&phi, 2, h, w, &phi, &mut tmp);
        for (p, t) in phi.iter_mut().zip(&tmp) {
            *p = *p + *t;
        }
    }
    phi
}

/// Source coordinate of output index `o` for a half-pixel aligned ×2 resize.
#[inline]
fn upsample_axis<T: Float>(o: usize, n_in: usize) -> Axis<T> {
    let half = T::from(0.5).unwrap();
    let src = (T::from(o).unwrap() + half) * half - half;
    axis(src, n_in)
}

/// Bilinear ×2 upsampling (half-pixel centers, edge clamped) of `planes`
/// stacked `H x W` planes.
pub(crate) fn upsample2x_forward<T: Float>(input: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for r in 0..oh {
            let ay = upsample_axis::<T>(r, h);
            for k in 0..ow {
                let ax = upsample_axis::<T>(k, w);
                dst[r * ow + k] = sample(src, w, ay, ax);
            }
        }
    }
}

/// Adjoint of [`upsample2x_forward`].
pub(crate) fn upsample2x_backward<T: Float>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    grad_in: &mut [T],
) {
    let one = T::one();
    let (oh, ow) = (2 * h, 2 * w);
    for pl in 0..planes {
        let g = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let gi = &mut grad_in[pl * h * w..(pl + 1) * h * w];
        for r in 0..oh {
            let ay = upsample_axis::<T>(r, h);
            for k in 0..ow {
                let ax = upsample_axis::<T>(k, w);
                let v = g[r * ow + k];
                gi[ay.lo * w + ax.lo] = gi[ay.lo * w + ax.lo] + v * (one - ay.frac) * (one - ax.frac);
                gi[ay.lo * w + ax.hi] = gi[ay.lo * w + ax.hi] + v * (one - ay.frac) * ax.frac;
                gi[ay.hi * w + ax.lo] = gi[ay.hi * w + ax.lo] + v * ay.frac * (one - ax.frac);
                gi[ay.hi * w + ax.hi] = gi[ay.hi * w + ax.hi] + v * ay.frac * ax.frac;
            }
        }
    }
}

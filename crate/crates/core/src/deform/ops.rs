//! Differentiable tensor versions of the field kernels (CPU).
//!
//! Tensors use `N x C x H x W` layout; displacement fields have two channels
//! `(row, col)`.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};
use num_traits::Float;

use super::kernels;

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("expected a contiguous tensor"),
    }
}

fn to_vec<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

/// `out[n, c, p] = img[n, c, p + phi[n, :, p]]`.
struct Warp;

impl Warp {
    fn fwd<T: Float + candle_core::WithDType>(
        img: &[T],
        phi: &[T],
        (n, c, h, w): (usize, usize, usize, usize),
    ) -> Vec<T> {
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        for b in 0..n {
            kernels::warp_forward(
                &img[b * c * hw..(b + 1) * c * hw],
                c,
                h,
                w,
                &phi[b * 2 * hw..(b + 1) * 2 * hw],
                &mut out[b * c * hw..(b + 1) * c * hw],
            );
        }
        out
    }

    fn bwd_impl<T: Float + candle_core::WithDType>(
        img: &Tensor,
        phi: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (n, c, h, w) = img.dims4()?;
        let hw = h * w;
        let iv = to_vec::<T>(img)?;
        let pv = to_vec::<T>(phi)?;
        let gv = to_vec::<T>(grad)?;
        let mut gi = vec![T::zero(); iv.len()];
        let mut gp = vec![T::zero(); pv.len()];
        for b in 0..n {
            kernels::warp_backward(
                &iv[b * c * hw..(b + 1) * c * hw],
                c,
                h,
                w,
                &pv[b * 2 * hw..(b + 1) * 2 * hw],
                &gv[b * c * hw..(b + 1) * c * hw],
                Some(&mut gi[b * c * hw..(b + 1) * c * hw]),
                Some(&mut gp[b * 2 * hw..(b + 1) * 2 * hw]),
            );
        }
        Ok((
            Tensor::from_vec(gi, img.shape(), img.device())?,
            Tensor::from_vec(gp, phi.shape(), phi.device())?,
        ))
    }
}

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (pn, pc, ph, pw) = l2.shape().dims4()?;
        if (pn, pc, ph, pw) != (dims.0, 2, dims.2, dims.3) {
            bail!("warp: field shape {:?} does not match image {:?}", l2.shape(), l1.shape());
        }
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(Self::fwd(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                dims,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(Self::fwd(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                dims,
            )),
            _ => bail!("warp: unsupported or mismatched dtypes"),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        img: &Tensor,
        phi: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gi, gp) = match img.dtype() {
            DType::F32 => Self::bwd_impl::<f32>(img, phi, grad)?,
            DType::F64 => Self::bwd_impl::<f64>(img, phi, grad)?,
            d => bail!("warp: unsupported dtype {d:?}"),
        };
        Ok((Some(gi), Some(gp)))
    }
}

/// Differentiable bilinear warp with border clamping.
pub fn warp(img: &Tensor, phi: &Tensor) -> candle_core::Result<Tensor> {
    img.contiguous()?.apply_op2(&phi.contiguous()?, Warp)
}

/// Differentiable scaling-and-squaring integration of `N x 2 x H x W`
/// velocities.
pub fn integrate(v: &Tensor, steps: u32) -> candle_core::Result<Tensor> {
    let mut phi = v.affine(0.5f64.powi(steps as i32), 0.0)?;
    for _ in 0..steps {
        phi = (&phi + warp(&phi, &phi)?)?;
    }
    Ok(phi)
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "bilinear-upsample-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let shape = Shape::from((n, c, 2 * h, 2 * w));
        let storage = match s {
            CpuStorage::F32(_) => {
                let mut out = vec![0f32; n * c * 4 * h * w];
                kernels::upsample2x_forward(contiguous_slice::<f32>(s, l)?, n * c, h, w, &mut out);
                CpuStorage::F32(out)
            }
            CpuStorage::F64(_) => {
                let mut out = vec![0f64; n * c * 4 * h * w];
                kernels::upsample2x_forward(contiguous_slice::<f64>(s, l)?, n * c, h, w, &mut out);
                CpuStorage::F64(out)
            }
            _ => bail!("upsample: unsupported dtype"),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let g = match arg.dtype() {
            DType::F32 => {
                let mut gi = vec![0f32; n * c * h * w];
                kernels::upsample2x_backward(&to_vec::<f32>(grad)?, n * c, h, w, &mut gi);
                Tensor::from_vec(gi, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let mut gi = vec![0f64; n * c * h * w];
                kernels::upsample2x_backward(&to_vec::<f64>(grad)?, n * c, h, w, &mut gi);
                Tensor::from_vec(gi, arg.shape(), arg.device())?
            }
            d => bail!("upsample: unsupported dtype {d:?}"),
        };
        Ok(Some(g))
    }
}

/// Differentiable bilinear ×2 upsampling with half-pixel centres.
pub fn upsample_bilinear2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Bilinear read of `field` (`N x C x H x W`) at one real point per batch
/// item, returning `N x C`. Differentiable with respect to `field`.
pub fn sample_points(field: &Tensor, points: &[[f64; 2]]) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = field.dims4()?;
    if points.len() != n {
        bail!("sample_points: {} points for batch of {n}", points.len());
    }
    let flat = field.reshape((n, c, h * w))?;
    let mut rows = Vec::with_capacity(n);
    for (b, p) in points.iter().enumerate() {
        let ay = kernels::axis(p[0], h);
        let ax = kernels::axis(p[1], w);
        let idx = [
            (ay.lo * w + ax.lo) as u32,
            (ay.lo * w + ax.hi) as u32,
            (ay.hi * w + ax.lo) as u32,
            (ay.hi * w + ax.hi) as u32,
        ];
        let wts = [
            (1.0 - ay.frac) * (1.0 - ax.frac),
            (1.0 - ay.frac) * ax.frac,
            ay.frac * (1.0 - ax.frac),
            ay.frac * ax.frac,
        ];
        let idx = Tensor::new(&idx, field.device())?;
        let wts = Tensor::new(&wts, field.device())?.to_dtype(field.dtype())?;
        // (C, 4) x (4, 1) -> (C, 1)
        let corners = flat.get(b)?.index_select(&idx, 1)?;
        rows.push(corners.matmul(&wts.unsqueeze(1)?)?.squeeze(1)?);
    }
    Tensor::stack(&rows, 0)
}

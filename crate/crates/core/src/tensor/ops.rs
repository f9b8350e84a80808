use super::{BatchNormSpec, Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;
use crate::par::for_each_chunk;

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor4<T>, bn: &BatchNormSpec<T>) -> Result<Tensor4<T>> {
    bn.validate()?;
    if x.c() != bn.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {}",
            bn.channels(),
            x.c()
        )));
    }
    let c = x.c();
    let mut out = x.clone();
    let hw = x.h() * x.w();
    for_each_chunk(out.data_mut(), hw, |idx, plane| {
        let ch = idx % c;
        let (g, b, m) = (bn.gamma[ch], bn.beta[ch], bn.running_mean[ch]);
        let denom = (bn.running_var[ch] + bn.eps).sqrt();
        for v in plane.iter_mut() {
            *v = g * (*v - m) / denom + b;
        }
    });
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Elementwise sum of two same-shaped tensors.
pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(o, &v)| *o += v);
    Ok(out)
}

/// Scale every `(n, c)` plane of `x` by `gates[n, c, 0, 0]`.
pub fn mul_channels<T: Scalar>(x: &Tensor4<T>, gates: &Tensor4<T>) -> Result<Tensor4<T>> {
    if gates.shape() != [x.n(), x.c(), 1, 1] {
        return Err(Error::Shape(format!(
            "channel gates {:?} do not match input {:?}",
            gates.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    let hw = x.h() * x.w();
    for (plane, &g) in out.data_mut().chunks_mut(hw.max(1)).zip(gates.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// Channel means, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    adaptive_avg_pool(x, 1, 1).expect("1x1 pooling is always valid")
}

/// Average pooling into an `oh x ow` grid with bins
/// `[floor(i * h / oh), ceil((i + 1) * h / oh))`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor4<T>, oh: usize, ow: usize) -> Result<Tensor4<T>> {
    if oh == 0 || ow == 0 || x.h() == 0 || x.w() == 0 {
        return Err(Error::Shape("adaptive pooling needs non-empty sizes".into()));
    }
    let (h, w) = (x.h(), x.w());
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    for n in 0..x.n() {
        for c in 0..x.c() {
            let plane = x.plane(n, c);
            for i in 0..oh {
                let (y0, y1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
                for j in 0..ow {
                    let (x0, x1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &plane[y * w + x0..y * w + x1] {
                            acc += *v;
                        }
                    }
                    let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                    out.set(n, c, i, j, acc / count);
                }
            }
        }
    }
    Ok(out)
}

/// Half-pixel source coordinate and its two neighbours for bilinear sampling.
fn bilinear_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resampling with half-pixel centers (align-corners = false).
///
/// Interpolates as `a + t * (b - a)`, so constant inputs stay exactly constant.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor4<T>, size: (usize, usize)) -> Result<Tensor4<T>> {
    let (oh, ow) = size;
    if oh == 0 || ow == 0 || x.h() == 0 || x.w() == 0 {
        return Err(Error::Shape("bilinear resampling needs non-empty sizes".into()));
    }
    let (h, w) = (x.h(), x.w());
    let ys: Vec<_> = (0..oh).map(|i| bilinear_axis(i, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|j| bilinear_axis(j, w, ow)).collect();
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    let c = x.c();
    for_each_chunk(out.data_mut(), oh * ow, |idx, plane| {
        let src = x.plane(idx / c, idx % c);
        for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
            let ty = T::of(ty);
            for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                let tx = T::of(tx);
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
                let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
                plane[i * ow + j] = lerp(top, bottom, ty);
            }
        }
    });
    Ok(out)
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Stack channels in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (n, h, w) = (first.n(), first.h(), first.w());
    if let Some(bad) = parts.iter().find(|p| (p.n(), p.h(), p.w()) != (n, h, w)) {
        return Err(Error::Shape(format!(
            "concat parts disagree: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let c_total: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for p in parts {
            let block = p.c() * h * w;
            data.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor4::from_vec([n, c_total, h, w], data)
}

/// Sum non-overlapping `factor x factor` blocks. Mass preserving.
pub fn sum_pool<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor == 0 || x.h() % factor != 0 || x.w() % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} is not divisible by pooling factor {factor}",
            x.h(),
            x.w()
        )));
    }
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    for n in 0..x.n() {
        for c in 0..x.c() {
            let plane = x.plane(n, c);
            for i in 0..oh {
                for j in 0..ow {
                    let block = (0..factor).flat_map(|dy| {
                        let row = (i * factor + dy) * w + j * factor;
                        plane[row..row + factor].iter().map(|v| v.as_f64())
                    });
                    out.set(n, c, i, j, T::of(neumaier_sum(block)));
                }
            }
        }
    }
    Ok(out)
}

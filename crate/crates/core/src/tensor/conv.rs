use super::{Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::par::for_each_chunk;
use crate::rng::SplitMix64;

/// Stride, dilation and zero padding of a 2-D convolution, `(vertical, horizontal)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    /// "Same" padding `d * (k - 1) / 2` for an odd square kernel.
    pub fn same(kernel: usize, dilation: usize, stride: usize) -> Self {
        Self {
            stride: (stride, stride),
            dilation: (dilation, dilation),
            padding: (dilation * (kernel - 1) / 2, dilation * (kernel - 1) / 2),
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            dilation: (1, 1),
            padding: (padding, padding),
        }
    }
}

/// Convolution parameters. Weights are `(out_ch, in_ch / groups, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    weights: Tensor4<T>,
    bias: Option<Vec<T>>,
    geometry: ConvGeometry,
    groups: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        weights: Tensor4<T>,
        bias: Option<Vec<T>>,
        geometry: ConvGeometry,
        groups: usize,
    ) -> Result<Self> {
        let [out_ch, in_per_group, kh, kw] = weights.shape();
        if groups == 0 || out_ch == 0 || in_per_group == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "degenerate conv weights {:?} with {groups} groups",
                weights.shape()
            )));
        }
        if out_ch % groups != 0 {
            return Err(Error::Shape(format!(
                "out_ch {out_ch} not divisible by groups {groups}"
            )));
        }
        let g = geometry;
        if g.stride.0 == 0 || g.stride.1 == 0 || g.dilation.0 == 0 || g.dilation.1 == 0 {
            return Err(Error::Geometry("stride and dilation must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.len() != out_ch {
                return Err(Error::Shape(format!(
                    "bias length {} != out_ch {out_ch}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            weights,
            bias,
            geometry,
            groups,
        })
    }

    /// Zero-initialized spec.
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 {
            return Err(Error::Shape(format!(
                "in_ch {in_ch} not divisible by groups {groups}"
            )));
        }
        let w = Tensor4::zeros([out_ch, in_ch / groups, kernel.0, kernel.1]);
        Self::new(w, bias.then(|| vec![T::zero(); out_ch]), geometry, groups)
    }

    /// Fan-in scaled uniform initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and bias alike, drawn in storage order.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        groups: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 {
            return Err(Error::Shape(format!(
                "in_ch {in_ch} not divisible by groups {groups}"
            )));
        }
        let fan_in = (in_ch / groups) * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor4::random_uniform(
            [out_ch, in_ch / groups, kernel.0, kernel.1],
            -bound,
            bound,
            rng,
        );
        let b = bias.then(|| {
            (0..out_ch)
                .map(|_| T::of(rng.uniform(-bound, bound)))
                .collect()
        });
        Self::new(w, b, geometry, groups)
    }

    pub fn weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.bias.as_mut()
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn out_ch(&self) -> usize {
        self.weights.n()
    }

    pub fn in_ch(&self) -> usize {
        self.weights.c() * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.h(), self.weights.w())
    }

    pub fn stride(&self) -> (usize, usize) {
        self.geometry.stride
    }

    pub fn dilation(&self) -> (usize, usize) {
        self.geometry.dilation
    }

    pub fn padding(&self) -> (usize, usize) {
        self.geometry.padding
    }

    /// Weight plus bias element count.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Multiply-accumulates for one forward over an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = output_shape(self, h, w)?;
        let (kh, kw) = self.kernel();
        Ok((oh * ow * self.out_ch()) as u64 * (self.weights.c() * kh * kw) as u64)
    }

    pub fn cast<U: Scalar>(&self) -> ConvSpec<U> {
        ConvSpec {
            weights: self.weights.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::of(v.as_f64())).collect()),
            geometry: self.geometry,
            groups: self.groups,
        }
    }
}

/// Inference-mode batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormSpec<T> {
    pub fn new(
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        eps: T,
    ) -> Result<Self> {
        let bn = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        };
        bn.validate()?;
        Ok(bn)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Shape("batch norm vectors differ in length".into()));
        }
        if self.running_var.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Numeric("batch norm variance must be >= 0".into()));
        }
        if !(self.eps >= T::zero()) {
            return Err(Error::Numeric("batch norm eps must be >= 0".into()));
        }
        Ok(())
    }

    /// gamma = 1, beta = 0, mean = 0, var = 1 with the given eps.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
        }
    }

    /// Plausible post-training statistics: gamma in [0.5, 1.5), beta and mean
    /// in [-0.1, 0.1), var in [0.5, 1.5). Drawn vector by vector.
    pub fn random(channels: usize, eps: T, rng: &mut SplitMix64) -> Self {
        let mut draw = |lo: f64, hi: f64| -> Vec<T> {
            (0..channels)
                .map(|_| T::of(rng.uniform(lo, hi)))
                .collect()
        };
        let gamma = draw(0.5, 1.5);
        let beta = draw(-0.1, 0.1);
        let running_mean = draw(-0.1, 0.1);
        let running_var = draw(0.5, 1.5);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormSpec<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        BatchNormSpec {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

/// Output spatial size: `floor((h + 2p - d(k - 1) - 1) / s) + 1` per axis.
pub fn output_shape<T: Scalar>(spec: &ConvSpec<T>, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("input size {h}x{w} must be positive")));
    }
    let g = spec.geometry();
    let (kh, kw) = spec.kernel();
    let axis = |len: usize, k: usize, s: usize, d: usize, p: usize| -> Option<usize> {
        let span = (len + 2 * p) as isize - (d * (k - 1)) as isize - 1;
        (span >= 0).then(|| span as usize / s + 1)
    };
    match (
        axis(h, kh, g.stride.0, g.dilation.0, g.padding.0),
        axis(w, kw, g.stride.1, g.dilation.1, g.padding.1),
    ) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::Geometry(format!(
            "kernel {kh}x{kw} (dilation {:?}, padding {:?}) does not fit a {h}x{w} input",
            g.dilation, g.padding
        ))),
    }
}

fn check_input<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<(usize, usize)> {
    if x.c() != spec.in_ch() {
        return Err(Error::Shape(format!(
            "input has {} channels, conv expects {}",
            x.c(),
            spec.in_ch()
        )));
    }
    output_shape(spec, x.h(), x.w())
}

/// Reference direct-sum cross-correlation.
///
/// Every output element accumulates from zero in the order input channel,
/// kernel row, kernel column, skipping taps that land in the zero padding,
/// then adds the bias. [`conv2d_direct`] reproduces this order exactly.
pub fn conv2d_naive<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    let (oh, ow) = check_input(x, spec)?;
    let out_ch = spec.out_ch();
    let (cin_g, cout_g) = (spec.weights.c(), out_ch / spec.groups);
    let (kh, kw) = spec.kernel();
    let g = spec.geometry;
    let (h, w) = (x.h() as isize, x.w() as isize);
    let wt = spec.weights.data();
    let mut out = Tensor4::zeros([x.n(), out_ch, oh, ow]);

    for_each_chunk(out.data_mut(), oh * ow, |plane_idx, plane| {
        let (n, o) = (plane_idx / out_ch, plane_idx % out_ch);
        let group = o / cout_g;
        let bias = spec.bias.as_ref().map(|b| b[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..cin_g {
                    let c = group * cin_g + ci;
                    for ky in 0..kh {
                        let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix =
                                (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let wv = wt[((o * cin_g + ci) * kh + ky) * kw + kx];
                            acc += wv * x.at(n, c, iy as usize, ix as usize);
                        }
                    }
                }
                plane[oy * ow + ox] = match bias {
                    Some(b) => acc + b,
                    None => acc,
                };
            }
        }
    });
    Ok(out)
}

/// Range of output indices whose tap `k` lands inside `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, s: usize, d: usize, p: usize) -> (usize, usize) {
    // o * s + k * d - p in [0, len)
    let off = (k * d) as isize - p as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let hi_excl = len as isize - off; // o * s < hi_excl
    let hi = if hi_excl <= 0 {
        0
    } else {
        ((hi_excl as usize).div_ceil(s)).min(out)
    };
    (lo.min(hi), hi)
}

/// Loop-interchanged direct convolution, bitwise identical to
/// [`conv2d_naive`] but vectorizable along output rows.
///
/// Used for grouped convolutions with few input channels per group
/// (depthwise large kernels), where GEMM lowering degenerates.
pub fn conv2d_direct<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    let (oh, ow) = check_input(x, spec)?;
    let out_ch = spec.out_ch();
    let (cin_g, cout_g) = (spec.weights.c(), out_ch / spec.groups);
    let (kh, kw) = spec.kernel();
    let g = spec.geometry;
    let (h, w) = (x.h(), x.w());
    let wt = spec.weights.data();
    let mut out = Tensor4::zeros([x.n(), out_ch, oh, ow]);

    let rows: Vec<(usize, usize)> = (0..kh)
        .map(|ky| valid_range(h, oh, ky, g.stride.0, g.dilation.0, g.padding.0))
        .collect();
    let cols: Vec<(usize, usize)> = (0..kw)
        .map(|kx| valid_range(w, ow, kx, g.stride.1, g.dilation.1, g.padding.1))
        .collect();

    for_each_chunk(out.data_mut(), oh * ow, |plane_idx, acc| {
        let (n, o) = (plane_idx / out_ch, plane_idx % out_ch);
        let group = o / cout_g;
        for ci in 0..cin_g {
            let input = x.plane(n, group * cin_g + ci);
            for ky in 0..kh {
                let (oy_lo, oy_hi) = rows[ky];
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = cols[kx];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = wt[((o * cin_g + ci) * kh + ky) * kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let in_row = &input[iy * w..(iy + 1) * w];
                        let out_row = &mut acc[oy * ow..(oy + 1) * ow];
                        let ix0 = ox_lo * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                        if g.stride.1 == 1 {
                            let len = ox_hi - ox_lo;
                            for (a, &v) in out_row[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&in_row[ix0..ix0 + len])
                            {
                                *a += wv * v;
                            }
                        } else {
                            for (i, a) in out_row[ox_lo..ox_hi].iter_mut().enumerate() {
                                *a += wv * in_row[ix0 + i * g.stride.1];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = &spec.bias {
            let b = b[o];
            acc.iter_mut().for_each(|v| *v = *v + b);
        }
    });
    Ok(out)
}

/// Columns of im2col processed per GEMM call, bounding scratch memory.
const IM2COL_BUDGET: usize = 1 << 22;
/// Output channels per parallel GEMM task.
const ROW_BLOCK: usize = 64;

/// im2col lowering followed by a matrix multiply per group.
///
/// 1x1 stride-1 unpadded convolutions multiply the input planes in place.
pub fn conv2d_gemm<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    let (oh, ow) = check_input(x, spec)?;
    let out_ch = spec.out_ch();
    let groups = spec.groups;
    let (cin_g, cout_g) = (spec.weights.c(), out_ch / groups);
    let (kh, kw) = spec.kernel();
    let g = spec.geometry;
    let (h, w) = (x.h(), x.w());
    let hw_out = oh * ow;
    let k_dim = cin_g * kh * kw;
    let wt = spec.weights.data();
    let mut out = Tensor4::zeros([x.n(), out_ch, oh, ow]);

    let pointwise = kh == 1 && kw == 1 && g.stride == (1, 1) && g.padding == (0, 0);
    let tile = if pointwise {
        hw_out
    } else {
        (IM2COL_BUDGET / k_dim.max(1)).clamp(64, hw_out.max(64)).min(hw_out)
    };
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k_dim * tile]
    };

    for n in 0..x.n() {
        for grp in 0..groups {
            let a = &wt[grp * cout_g * k_dim..(grp + 1) * cout_g * k_dim];
            let out_base = (n * out_ch + grp * cout_g) * hw_out;
            let out_group = &mut out.data_mut()[out_base..out_base + cout_g * hw_out];

            let mut t0 = 0;
            while t0 < hw_out {
                let tn = tile.min(hw_out - t0);
                let (b, rsb): (&[T], usize) = if pointwise {
                    let start = (n * x.c() + grp * cin_g) * h * w;
                    (&x.data()[start..start + cin_g * h * w], h * w)
                } else {
                    im2col_tile(x, n, grp * cin_g, cin_g, (kh, kw), g, (oh, ow), t0, tn, &mut cols);
                    (&cols[..k_dim * tn], tn)
                };
                let rows_per_block = ROW_BLOCK.min(cout_g).max(1);
                for_each_chunk(out_group, rows_per_block * hw_out, |blk, c_rows| {
                    let r0 = blk * rows_per_block;
                    let m = c_rows.len() / hw_out;
                    T::gemm(
                        m,
                        k_dim,
                        tn,
                        &a[r0 * k_dim..(r0 + m) * k_dim],
                        k_dim,
                        1,
                        b,
                        rsb,
                        1,
                        &mut c_rows[t0..],
                        hw_out,
                        1,
                    );
                });
                t0 += tn;
            }

            if let Some(bias) = &spec.bias {
                for (o, plane) in out_group.chunks_mut(hw_out).enumerate() {
                    let bv = bias[grp * cout_g + o];
                    plane.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
    }
    Ok(out)
}

/// Fill `cols` (row-major, `cin * kh * kw` rows by `tn` columns) with the
/// receptive fields of output positions `t0 .. t0 + tn`.
#[allow(clippy::too_many_arguments)]
fn im2col_tile<T: Scalar>(
    x: &Tensor4<T>,
    n: usize,
    c0: usize,
    cin: usize,
    (kh, kw): (usize, usize),
    g: ConvGeometry,
    (_oh, ow): (usize, usize),
    t0: usize,
    tn: usize,
    cols: &mut [T],
) {
    let (h, w) = (x.h() as isize, x.w() as isize);
    for ci in 0..cin {
        let plane = x.plane(n, c0 + ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * tn..(row + 1) * tn];
                for (j, d) in dst.iter_mut().enumerate() {
                    let p = t0 + j;
                    let (oy, ox) = (p / ow, p % ow);
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                    *d = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                        plane[iy as usize * w as usize + ix as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Fastest available path for the given geometry.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    if spec.groups > 1 && spec.weights.c() <= 2 {
        conv2d_direct(x, spec)
    } else {
        conv2d_gemm(x, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec64(w: Tensor4<f64>, bias: Option<Vec<f64>>, g: ConvGeometry, groups: usize) -> ConvSpec<f64> {
        ConvSpec::new(w, bias, g, groups).unwrap()
    }

    #[test]
    fn single_multiply() {
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor4::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let s = spec64(w, None, ConvGeometry::default(), 1);
        assert_eq!(conv2d_naive(&x, &s).unwrap().data(), &[6.0]);
        assert_eq!(conv2d_gemm(&x, &s).unwrap().data(), &[6.0]);
        assert_eq!(conv2d_direct(&x, &s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor4::<f64>::random_uniform([2, 1, 6, 5], -1.0, 1.0, &mut rng);
        let mut w = Tensor4::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let s = spec64(w, None, ConvGeometry::same(3, 1, 1), 1);
        assert_eq!(conv2d_naive(&x, &s).unwrap(), x);
        assert_eq!(conv2d_gemm(&x, &s).unwrap(), x);
    }

    #[test]
    fn output_shape_cases() {
        let stem = ConvSpec::<f32>::zeros(3, 8, (4, 4), ConvGeometry::strided(4, 0), 1, false).unwrap();
        assert_eq!(output_shape(&stem, 640, 480).unwrap(), (160, 120));
        let pw = ConvSpec::<f32>::zeros(3, 8, (1, 1), ConvGeometry::default(), 1, false).unwrap();
        assert_eq!(output_shape(&pw, 17, 9).unwrap(), (17, 9));
        let dil = ConvSpec::<f32>::zeros(1, 1, (3, 3), ConvGeometry::same(3, 24, 1), 1, false).unwrap();
        assert_eq!(output_shape(&dil, 20, 15).unwrap(), (20, 15));
        let big = ConvSpec::<f32>::zeros(1, 1, (7, 7), ConvGeometry::default(), 1, false).unwrap();
        assert!(matches!(output_shape(&big, 5, 5), Err(Error::Geometry(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        let s = ConvSpec::<f64>::zeros(3, 1, (1, 1), ConvGeometry::default(), 1, false).unwrap();
        assert!(matches!(conv2d_naive(&x, &s), Err(Error::Shape(_))));
        assert!(matches!(conv2d_gemm(&x, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(ConvSpec::<f32>::zeros(6, 4, (3, 3), ConvGeometry::default(), 4, false).is_err());
        let w = Tensor4::<f32>::zeros([6, 1, 3, 3]);
        assert!(ConvSpec::new(w, None, ConvGeometry::default(), 4).is_err());
    }

    #[test]
    fn valid_range_matches_scan() {
        for len in 1..12 {
            for s in 1..4 {
                for d in 1..4 {
                    for p in 0..6 {
                        for k in 0..4 {
                            let span = (len + 2 * p) as isize - (d * 3) as isize - 1;
                            if span < 0 {
                                continue;
                            }
                            let out = span as usize / s + 1;
                            let (lo, hi) = valid_range(len, out, k, s, d, p);
                            for o in 0..out {
                                let i = (o * s + k * d) as isize - p as isize;
                                let inside = i >= 0 && i < len as isize;
                                assert_eq!(inside, o >= lo && o < hi, "len {len} s {s} d {d} p {p} k {k} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn strided_depthwise_direct_matches_naive_bitwise() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor4::<f32>::random_uniform([1, 4, 13, 11], -1.0, 1.0, &mut rng);
        let g = ConvGeometry {
            stride: (2, 3),
            dilation: (2, 1),
            padding: (3, 2),
        };
        let s = ConvSpec::<f32>::random(4, 4, (5, 3), g, 4, true, &mut rng).unwrap();
        assert_eq!(conv2d_naive(&x, &s).unwrap(), conv2d_direct(&x, &s).unwrap());
    }
}

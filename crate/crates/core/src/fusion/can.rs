use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Parameters, Visitor, VisitorMut};
use crate::rng::SplitMix64;
use crate::tensor::{
    adaptive_avg_pool, bilinear_upsample, conv2d, global_avg_pool, mul_channels, relu, sigmoid, ConvGeometry,
    ConvSpec, Scalar, Tensor4,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanConfig {
    pub scales: Vec<usize>,
    pub reduction: usize,
}

impl Default for CanConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 3, 6],
            reduction: 16,
        }
    }
}

impl CanConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::config("can.scales", "need at least one positive scale"));
        }
        check_reduction(channels, self.reduction)
    }
}

fn check_reduction(channels: usize, r: usize) -> Result<()> {
    if r == 0 || channels % r != 0 || channels < r {
        return Err(Error::config(
            "can.reduction",
            format!("{channels} channels are not divisible by reduction {r}"),
        ));
    }
    Ok(())
}

/// Multi-scale contrast weighting followed by a squeeze-excitation gate.
///
/// For each scale `s`, `u_s = up(avgpool_s(f))` and the contrast `f - u_s`
/// drives a per-pixel weight `sigmoid(conv_s(f - u_s))`. Weights are
/// normalized across scales, `sum_s w_s * u_s` is formed, and the result is
/// scaled per channel by `sigmoid(restore(relu(reduce(gap(.)))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanSpec<T> {
    pub scales: Vec<usize>,
    pub reduction: usize,
    pub scale_weights: Vec<ConvSpec<T>>,
    pub reduce: ConvSpec<T>,
    pub restore: ConvSpec<T>,
}

impl<T: Scalar> CanSpec<T> {
    pub fn random(channels: usize, cfg: &CanConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate(channels)?;
        let one = ConvGeometry::default();
        let hidden = channels / cfg.reduction;
        let scale_weights = cfg
            .scales
            .iter()
            .map(|_| ConvSpec::random(channels, 1, (1, 1), one, 1, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales: cfg.scales.clone(),
            reduction: cfg.reduction,
            scale_weights,
            reduce: ConvSpec::random(channels, hidden, (1, 1), one, 1, true, rng)?,
            restore: ConvSpec::random(hidden, channels, (1, 1), one, 1, true, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_ch()
    }

    pub fn hidden(&self) -> usize {
        self.reduce.out_ch()
    }

    pub(crate) fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut total = 0;
        for c in &self.scale_weights {
            total += c.macs(h, w)?;
        }
        Ok(total + self.reduce.macs(1, 1)? + self.restore.macs(1, 1)?)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> CanSpec<U> {
        CanSpec {
            scales: self.scales.clone(),
            reduction: self.reduction,
            scale_weights: self.scale_weights.iter().map(ConvSpec::cast).collect(),
            reduce: self.reduce.cast(),
            restore: self.restore.cast(),
        }
    }
}

/// Intermediate results of [`can_forward`].
#[derive(Debug, Clone)]
pub struct CanTrace<T> {
    pub context: Vec<Tensor4<T>>,
    pub contrast: Vec<Tensor4<T>>,
    /// Normalized per-pixel scale weights, each `n x 1 x h x w`.
    pub weights: Vec<Tensor4<T>>,
    pub fused: Tensor4<T>,
    /// Channel gate, `n x c x 1 x 1`.
    pub gate: Tensor4<T>,
    pub output: Tensor4<T>,
}

pub fn can_trace<T: Scalar>(f: &Tensor4<T>, spec: &CanSpec<T>) -> Result<CanTrace<T>> {
    check_reduction(f.c(), spec.reduction)?;
    if f.c() != spec.channels() {
        return Err(Error::Shape(format!(
            "context module expects {} channels, got {}",
            spec.channels(),
            f.c()
        )));
    }
    let (n, c, h, w) = (f.n(), f.c(), f.h(), f.w());
    let mut context = Vec::with_capacity(spec.scales.len());
    let mut contrast = Vec::with_capacity(spec.scales.len());
    let mut raw = Vec::with_capacity(spec.scales.len());
    for (&s, conv) in spec.scales.iter().zip(&spec.scale_weights) {
        let up = bilinear_upsample(&adaptive_avg_pool(f, s, s)?, (h, w))?;
        let mut diff = f.clone();
        diff.data_mut()
            .iter_mut()
            .zip(up.data())
            .for_each(|(d, &u)| *d = *d - u);
        raw.push(sigmoid(&conv2d(&diff, conv)?));
        context.push(up);
        contrast.push(diff);
    }

    let hw = h * w;
    let mut total = Tensor4::<T>::zeros([n, 1, h, w]);
    for r in &raw {
        total.data_mut().iter_mut().zip(r.data()).for_each(|(t, &v)| *t += v);
    }
    let weights: Vec<Tensor4<T>> = raw
        .iter()
        .map(|r| {
            let mut out = r.clone();
            out.data_mut()
                .iter_mut()
                .zip(total.data())
                .for_each(|(v, &t)| *v = *v / t);
            out
        })
        .collect();

    let mut fused = Tensor4::<T>::zeros([n, c, h, w]);
    for (u, wt) in context.iter().zip(&weights) {
        for b in 0..n {
            let wplane = wt.plane(b, 0);
            for ch in 0..c {
                let start = (b * c + ch) * hw;
                let src = u.plane(b, ch);
                let dst = &mut fused.data_mut()[start..start + hw];
                for ((d, &s), &a) in dst.iter_mut().zip(src).zip(wplane) {
                    *d += a * s;
                }
            }
        }
    }

    let squeezed = relu(&conv2d(&global_avg_pool(&fused), &spec.reduce)?);
    let gate = sigmoid(&conv2d(&squeezed, &spec.restore)?);
    let output = mul_channels(&fused, &gate)?;
    Ok(CanTrace {
        context,
        contrast,
        weights,
        fused,
        gate,
        output,
    })
}

pub fn can_forward<T: Scalar>(f: &Tensor4<T>, spec: &CanSpec<T>) -> Result<Tensor4<T>> {
    Ok(can_trace(f, spec)?.output)
}

impl<T: Scalar> Parameters<T> for CanSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, c) in self.scale_weights.iter().enumerate() {
            c.visit(&join(prefix, &format!("scale{i}")), f);
        }
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.restore.visit(&join(prefix, "restore"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        for (i, c) in self.scale_weights.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("scale{i}")), f)?;
        }
        self.reduce.visit_mut(&join(prefix, "reduce"), f)?;
        self.restore.visit_mut(&join(prefix, "restore"), f)
    }
}

use serde::{Deserialize, Serialize};

use crate::backbone::ConvBn;
use crate::error::{Error, Result};
use crate::params::{join, Parameters, Visitor, VisitorMut};
use crate::rng::SplitMix64;
use crate::tensor::{bilinear_upsample, concat_channels, global_avg_pool, relu, ConvGeometry, Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsppConfig {
    pub rates: Vec<usize>,
    pub branch_ch: usize,
    pub out_ch: usize,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self {
            rates: vec![6, 12, 18, 24],
            branch_ch: 128,
            out_ch: 512,
        }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.rates.contains(&0) {
            return Err(Error::config("aspp.rates", "need at least one positive rate"));
        }
        if self.branch_ch == 0 {
            return Err(Error::config("aspp.branch_ch", "must be positive"));
        }
        if self.out_ch == 0 {
            return Err(Error::config("aspp.out_ch", "must be positive"));
        }
        Ok(())
    }
}

/// Dilated 3x3 branches, a 1x1 branch and a pooled branch, each
/// conv+BN+ReLU, concatenated and projected by a 1x1 conv+BN+ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct AsppSpec<T> {
    pub rates: Vec<usize>,
    pub dilated: Vec<ConvBn<T>>,
    pub pointwise: ConvBn<T>,
    pub pooled: ConvBn<T>,
    pub project: ConvBn<T>,
}

impl<T: Scalar> AsppSpec<T> {
    pub fn random(in_ch: usize, cfg: &AsppConfig, eps: T, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.branch_ch;
        let dilated = cfg
            .rates
            .iter()
            .map(|&r| ConvBn::random(in_ch, b, 3, ConvGeometry::same(3, r, 1), eps, rng))
            .collect::<Result<Vec<_>>>()?;
        let one = ConvGeometry::default();
        Ok(Self {
            rates: cfg.rates.clone(),
            dilated,
            pointwise: ConvBn::random(in_ch, b, 1, one, eps, rng)?,
            pooled: ConvBn::random(in_ch, b, 1, one, eps, rng)?,
            project: ConvBn::random(b * (cfg.rates.len() + 2), cfg.out_ch, 1, one, eps, rng)?,
        })
    }

    pub fn branch_count(&self) -> usize {
        self.dilated.len() + 2
    }

    pub fn out_ch(&self) -> usize {
        self.project.out_ch()
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        self.dilated
            .iter_mut()
            .chain([&mut self.pointwise, &mut self.pooled, &mut self.project])
    }

    pub(crate) fn reparameterize(&mut self) -> Result<()> {
        self.layers_mut().try_for_each(ConvBn::reparameterize)
    }

    pub(crate) fn strip(&mut self) -> Result<()> {
        self.layers_mut().try_for_each(ConvBn::strip)
    }

    pub(crate) fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut total = 0;
        for d in &self.dilated {
            total += d.macs(h, w)?.0;
        }
        total += self.pointwise.macs(h, w)?.0;
        total += self.pooled.macs(1, 1)?.0;
        total += self.project.macs(h, w)?.0;
        Ok(total)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> AsppSpec<U> {
        AsppSpec {
            rates: self.rates.clone(),
            dilated: self.dilated.iter().map(ConvBn::cast).collect(),
            pointwise: self.pointwise.cast(),
            pooled: self.pooled.cast(),
            project: self.project.cast(),
        }
    }
}

/// Branch outputs before concatenation, in order: one per rate, 1x1, pooled.
pub fn aspp_branches<T: Scalar>(f: &Tensor4<T>, spec: &AsppSpec<T>, merged: bool) -> Result<Vec<Tensor4<T>>> {
    let mut out = Vec::with_capacity(spec.branch_count());
    for d in &spec.dilated {
        out.push(relu(&d.forward(f, merged)?));
    }
    out.push(relu(&spec.pointwise.forward(f, merged)?));
    let pooled = relu(&spec.pooled.forward(&global_avg_pool(f), merged)?);
    out.push(bilinear_upsample(&pooled, (f.h(), f.w()))?);
    Ok(out)
}

pub fn aspp_forward<T: Scalar>(f: &Tensor4<T>, spec: &AsppSpec<T>, merged: bool) -> Result<Tensor4<T>> {
    let branches = aspp_branches(f, spec, merged)?;
    let refs: Vec<&Tensor4<T>> = branches.iter().collect();
    Ok(relu(&spec.project.forward(&concat_channels(&refs)?, merged)?))
}

impl<T: Scalar> Parameters<T> for AsppSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, d) in self.dilated.iter().enumerate() {
            d.visit(&join(prefix, &format!("rate{i}")), f);
        }
        self.pointwise.visit(&join(prefix, "pointwise"), f);
        self.pooled.visit(&join(prefix, "pooled"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        for (i, d) in self.dilated.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("rate{i}")), f)?;
        }
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f)?;
        self.pooled.visit_mut(&join(prefix, "pooled"), f)?;
        self.project.visit_mut(&join(prefix, "project"), f)
    }
}

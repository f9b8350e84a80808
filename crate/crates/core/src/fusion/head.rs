use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::params::{join, Parameters, Visitor, VisitorMut};
use crate::rng::SplitMix64;
use crate::tensor::{concat_channels, conv2d, relu, ConvGeometry, ConvSpec, Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 256 }
    }
}

/// `relu(out(relu(fuse(concat(f4, aspp, can)))))`, one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHeadSpec<T> {
    pub fuse: ConvSpec<T>,
    pub out: ConvSpec<T>,
}

impl<T: Scalar> DensityHeadSpec<T> {
    pub fn random(in_ch: usize, cfg: &HeadConfig, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::config("head.hidden", "must be positive"));
        }
        let one = ConvGeometry::default();
        Ok(Self {
            fuse: ConvSpec::random(in_ch, cfg.hidden, (1, 1), one, 1, true, rng)?,
            out: ConvSpec::random(cfg.hidden, 1, (1, 1), one, 1, true, rng)?,
        })
    }

    pub(crate) fn macs(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.fuse.macs(h, w)? + self.out.macs(h, w)?)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> DensityHeadSpec<U> {
        DensityHeadSpec {
            fuse: self.fuse.cast(),
            out: self.out.cast(),
        }
    }
}

/// Batched head, `n x 1 x h x w`, non-negative.
pub fn head_forward<T: Scalar>(
    f4: &Tensor4<T>,
    aspp: &Tensor4<T>,
    can: &Tensor4<T>,
    spec: &DensityHeadSpec<T>,
) -> Result<Tensor4<T>> {
    let cat = concat_channels(&[f4, aspp, can])?;
    let hidden = relu(&conv2d(&cat, &spec.fuse)?);
    Ok(relu(&conv2d(&hidden, &spec.out)?))
}

pub fn fusion_head<T: Scalar>(
    f4: &Tensor4<T>,
    aspp: &Tensor4<T>,
    can: &Tensor4<T>,
    spec: &DensityHeadSpec<T>,
) -> Result<DensityMap> {
    DensityMap::from_tensor(&head_forward(f4, aspp, can, spec)?)
}

impl<T: Scalar> Parameters<T> for DensityHeadSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        self.fuse.visit_mut(&join(prefix, "fuse"), f)?;
        self.out.visit_mut(&join(prefix, "out"), f)
    }
}

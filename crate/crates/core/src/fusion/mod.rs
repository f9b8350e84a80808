//! Multi-scale fusion on the stride-32 features and the density head.
//!
//! `f4 -> ASPP -> CAN`, then `concat(f4, aspp, can)` feeds a 1x1 head with a
//! ReLU output, giving a non-negative `H/32 x W/32` density map.

mod aspp;
mod can;
mod head;

pub use aspp::{aspp_branches, aspp_forward, AsppConfig, AsppSpec};
pub use can::{can_forward, can_trace, CanConfig, CanSpec, CanTrace};
pub use head::{fusion_head, head_forward, DensityHeadSpec, HeadConfig};

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, build_backbone, check_input, check_size, BackboneConfig, BackboneSpec};
use crate::density::DensityMap;
use crate::error::Result;
use crate::params::{join, Parameters, Visitor, VisitorMut};
use crate::reparam::RepBlockSpec;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor4};

/// Side of the square footprint of a `k x k` kernel dilated by `rate`.
pub fn effective_receptive_field(k: usize, rate: usize) -> usize {
    k + (k - 1) * (rate - 1)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub aspp: AsppConfig,
    pub can: CanConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Small network for tests and demos; `width` must be a multiple of 4.
    pub fn tiny(width: usize) -> Self {
        Self {
            backbone: BackboneConfig::tiny(width),
            aspp: AsppConfig {
                branch_ch: width,
                out_ch: width,
                ..Default::default()
            },
            can: CanConfig {
                reduction: 4,
                ..Default::default()
            },
            head: HeadConfig { hidden: width },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.aspp.validate()?;
        self.can.validate(self.aspp.out_ch)?;
        if self.head.hidden == 0 {
            return Err(crate::Error::config("head.hidden", "must be positive"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.backbone.seed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepSfNet<T> {
    pub config: ModelConfig,
    pub backbone: BackboneSpec<T>,
    pub aspp: AsppSpec<T>,
    pub can: CanSpec<T>,
    pub head: DensityHeadSpec<T>,
}

/// Deterministic in `cfg.backbone.seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<RepSfNet<T>> {
    cfg.validate()?;
    let backbone = build_backbone(&cfg.backbone)?;
    let mut rng = SplitMix64::new(cfg.seed()).fork();
    let f4 = backbone.out_channels();
    let aspp = AsppSpec::random(f4, &cfg.aspp, T::of(cfg.backbone.bn_eps), &mut rng)?;
    let can = CanSpec::random(aspp.out_ch(), &cfg.can, &mut rng)?;
    let head = DensityHeadSpec::random(f4 + 2 * aspp.out_ch(), &cfg.head, &mut rng)?;
    Ok(RepSfNet {
        config: cfg.clone(),
        backbone,
        aspp,
        can,
        head,
    })
}

/// Batched forward, `n x 1 x H/32 x W/32`.
pub fn model_forward<T: Scalar>(image: &Tensor4<T>, model: &RepSfNet<T>, merged: bool) -> Result<Tensor4<T>> {
    check_input(image)?;
    let features = backbone_forward(&model.backbone, image, merged)?;
    let f4 = &features[3];
    let a = aspp_forward(f4, &model.aspp, merged)?;
    let c = can_forward(&a, &model.can)?;
    head_forward(f4, &a, &c, &model.head)
}

/// Density map for a single `1 x 3 x H x W` image.
pub fn repsfnet_forward<T: Scalar>(image: &Tensor4<T>, model: &RepSfNet<T>, merged: bool) -> Result<DensityMap> {
    DensityMap::from_tensor(&model_forward(image, model, merged)?)
}

impl<T: Scalar> RepSfNet<T> {
    /// Compute merged forms for every foldable layer, keeping branch forms.
    pub fn reparameterize(&mut self) -> Result<()> {
        self.backbone.reparameterize()?;
        self.aspp.reparameterize()
    }

    /// Drop branch forms; requires [`RepSfNet::reparameterize`] first.
    pub fn strip_branches(&mut self) -> Result<()> {
        self.backbone.strip_branches()?;
        self.aspp.strip()
    }

    pub fn is_merged_only(&self) -> bool {
        self.backbone.is_merged_only()
    }

    pub fn rep_blocks(&self) -> impl Iterator<Item = &RepBlockSpec<T>> {
        self.backbone.rep_blocks()
    }

    /// Learned parameters of the branch or merged form.
    pub fn count_params(&self, merged: bool) -> Result<usize> {
        if merged == self.is_merged_only() {
            return Ok(self.param_count());
        }
        if !merged {
            return Err(crate::Error::State("branch form is unavailable".into()));
        }
        let mut m = self.clone();
        m.reparameterize()?;
        m.strip_branches()?;
        Ok(m.param_count())
    }

    /// Multiply-accumulates of every convolution for an `h x w` input.
    pub fn count_macs(&self, h: usize, w: usize, merged: bool) -> Result<u64> {
        check_size(h, w)?;
        let (fh, fw) = (h / 32, w / 32);
        Ok(self.backbone.count_macs(h, w, merged)?
            + self.aspp.macs(fh, fw)?
            + self.can.macs(fh, fw)?
            + self.head.macs(fh, fw)?)
    }

    pub fn cast<U: Scalar>(&self) -> RepSfNet<U> {
        RepSfNet {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            aspp: self.aspp.cast(),
            can: self.can.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for RepSfNet<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.aspp.visit(&join(prefix, "aspp"), f);
        self.can.visit(&join(prefix, "can"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        self.backbone.visit_mut(&join(prefix, "backbone"), f)?;
        self.aspp.visit_mut(&join(prefix, "aspp"), f)?;
        self.can.visit_mut(&join(prefix, "can"), f)?;
        self.head.visit_mut(&join(prefix, "head"), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{concat_channels, conv2d_naive, relu};
    use crate::Error;

    #[test]
    fn receptive_field_arithmetic() {
        assert_eq!(effective_receptive_field(3, 6), 13);
        assert_eq!(effective_receptive_field(3, 24), 49);
        assert_eq!(effective_receptive_field(5, 1), 5);
        for r in 1..40 {
            assert!(effective_receptive_field(3, r + 1) > effective_receptive_field(3, r));
        }
    }

    #[test]
    fn aspp_constant_in_constant_out_on_small_maps() {
        // Every off-center tap of every dilated branch falls in the padding,
        // so each branch acts pointwise.
        let mut rng = SplitMix64::new(1);
        let spec = AsppSpec::<f64>::random(8, &AsppConfig { branch_ch: 4, out_ch: 6, ..Default::default() }, 1e-5, &mut rng).unwrap();
        let x = Tensor4::full([1, 8, 5, 6], 0.7);
        let y = aspp_forward(&x, &spec, false).unwrap();
        assert_eq!(y.shape(), [1, 6, 5, 6]);
        for c in 0..6 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|&v| v == p[0]), "channel {c} not constant");
        }
    }

    #[test]
    fn aspp_channel_mismatch() {
        let mut rng = SplitMix64::new(2);
        let spec = AsppSpec::<f64>::random(8, &AsppConfig::default(), 1e-5, &mut rng).unwrap();
        let x = Tensor4::zeros([1, 4, 3, 3]);
        assert!(matches!(aspp_forward(&x, &spec, false), Err(Error::Shape(_))));
    }

    #[test]
    fn can_hidden_width_and_divisibility() {
        let mut rng = SplitMix64::new(3);
        let spec = CanSpec::<f32>::random(512, &CanConfig::default(), &mut rng).unwrap();
        assert_eq!(spec.hidden(), 32);
        assert!(matches!(
            CanSpec::<f32>::random(40, &CanConfig::default(), &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn can_constant_input_has_zero_contrast() {
        let mut rng = SplitMix64::new(4);
        let spec = CanSpec::<f64>::random(16, &CanConfig::default(), &mut rng).unwrap();
        let x = Tensor4::full([1, 16, 7, 5], -1.25);
        let t = can_trace(&x, &spec).unwrap();
        for c in &t.contrast {
            assert!(c.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn can_scale_weights_sum_to_one() {
        let mut rng = SplitMix64::new(5);
        let spec = CanSpec::<f64>::random(8, &CanConfig { reduction: 4, ..Default::default() }, &mut rng).unwrap();
        let x = Tensor4::random_uniform([2, 8, 9, 7], -2.0, 2.0, &mut rng);
        let t = can_trace(&x, &spec).unwrap();
        for i in 0..2 * 9 * 7 {
            let s: f64 = t.weights.iter().map(|w| w.data()[i]).sum();
            assert!((s - 1.0).abs() <= 1e-14, "{s}");
        }
    }

    #[test]
    fn head_all_zero() {
        let mut rng = SplitMix64::new(6);
        let mut spec = DensityHeadSpec::<f64>::random(12, &HeadConfig { hidden: 5 }, &mut rng).unwrap();
        spec.fuse.bias_mut().unwrap().fill(0.0);
        spec.out.bias_mut().unwrap().fill(0.0);
        let z = Tensor4::zeros([1, 4, 20, 15]);
        let dm = fusion_head(&z, &z, &z, &spec).unwrap();
        assert_eq!((dm.h(), dm.w()), (20, 15));
        assert_eq!(dm.count(), 0.0);
    }

    #[test]
    fn head_matches_manual_composition() {
        let mut rng = SplitMix64::new(7);
        let spec = DensityHeadSpec::<f64>::random(9, &HeadConfig { hidden: 6 }, &mut rng).unwrap();
        let a = Tensor4::random_uniform([1, 3, 4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor4::random_uniform([1, 2, 4, 5], -1.0, 1.0, &mut rng);
        let c = Tensor4::random_uniform([1, 4, 4, 5], -1.0, 1.0, &mut rng);
        let got = head_forward(&a, &b, &c, &spec).unwrap();
        let cat = concat_channels(&[&a, &b, &c]).unwrap();
        let want = relu(&conv2d_naive(&relu(&conv2d_naive(&cat, &spec.fuse).unwrap()), &spec.out).unwrap());
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        let bad = Tensor4::zeros([1, 4, 4, 4]);
        assert!(matches!(head_forward(&a, &b, &bad, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn tiny_model_end_to_end() {
        let mut model = build_model::<f32>(&ModelConfig::tiny(8)).unwrap();
        let mut rng = SplitMix64::new(8);
        let x = Tensor4::random_uniform([1, 3, 64, 96], -1.0, 1.0, &mut rng);
        let a = repsfnet_forward(&x, &model, false).unwrap();
        assert_eq!((a.h(), a.w()), (2, 3));
        model.reparameterize().unwrap();
        let b = repsfnet_forward(&x, &model, true).unwrap();
        let diff = a.values().iter().zip(b.values()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-4, "{diff}");
        assert!(model.count_params(true).unwrap() < model.count_params(false).unwrap());
        assert!(model.count_macs(64, 96, true).unwrap() < model.count_macs(64, 96, false).unwrap());
    }
}

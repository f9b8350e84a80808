//! Convolutional stem plus four large-kernel stages, overall stride 32.
//!
//! Layout per stage: an optional transition (1x1 channel change, or a 3x3
//! stride-2 downsample), then `depth` blocks of
//!
//! ```text
//! x + BN(pw_project(ReLU(RepLK(ReLU(BN(pw_expand(x)))))))
//! ```
//!
//! where RepLK is a depthwise multi-branch large-kernel block from
//! [`crate::reparam`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Parameters, Visitor, VisitorMut};
use crate::reparam::{fold_bn, merge_rep_block, RepBlockShape, RepBlockSpec};
use crate::rng::SplitMix64;
use crate::tensor::{add, batchnorm_infer, conv2d, relu, BatchNormSpec, ConvGeometry, ConvSpec, Scalar, Tensor4};

pub const STEM_KERNEL: usize = 4;
pub const STEM_STRIDE: usize = 4;
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_out_ch: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_kernels: [usize; 4],
    /// Parallel small kernel; `null` drops the small branch.
    pub small_kernel: Option<usize>,
    pub downsample: [bool; 4],
    pub expansion: usize,
    /// Add a batch-norm shortcut branch to every large-kernel block.
    pub identity_branch: bool,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_out_ch: 64,
            stage_channels: [256, 256, 384, 512],
            stage_depths: [2, 2, 2, 2],
            stage_kernels: [13, 11, 9, 7],
            small_kernel: Some(3),
            downsample: [false, true, true, true],
            expansion: 2,
            identity_branch: true,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Small network for tests and demos.
    pub fn tiny(width: usize) -> Self {
        Self {
            stem_out_ch: width,
            stage_channels: [width; 4],
            stage_depths: [1; 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_out_ch == 0 {
            return Err(Error::config("stem_out_ch", "must be positive"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage_channels", "must be positive"));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(
                "stage_channels",
                format!("must be non-decreasing, got {:?}", self.stage_channels),
            ));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::config("stage_depths", "every stage needs at least one block"));
        }
        if let Some(&k) = self
            .stage_kernels
            .iter()
            .find(|&&k| k % 2 == 0 || !(7..=13).contains(&k))
        {
            return Err(Error::config(
                "stage_kernels",
                format!("kernel {k} must be odd and within [7, 13]"),
            ));
        }
        if let Some(k) = self.small_kernel {
            let min_large = *self.stage_kernels.iter().min().unwrap_or(&7);
            if k % 2 == 0 || k > min_large {
                return Err(Error::config(
                    "small_kernel",
                    format!("kernel {k} must be odd and at most {min_large}"),
                ));
            }
        }
        if self.downsample[0] || self.downsample.iter().filter(|&&d| d).count() != 3 {
            return Err(Error::config(
                "downsample",
                format!(
                    "stages 2-4 must downsample and stage 1 must not, got {:?}",
                    self.downsample
                ),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion", "must be positive"));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::config("bn_eps", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Convolution followed by batch norm, or its folded single convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvBn<T> {
    Branch {
        conv: ConvSpec<T>,
        bn: BatchNormSpec<T>,
        fused: Option<ConvSpec<T>>,
    },
    Fused(ConvSpec<T>),
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        eps: T,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let conv = ConvSpec::random(in_ch, out_ch, (kernel, kernel), geometry, 1, false, rng)?;
        let bn = BatchNormSpec::random(out_ch, eps, rng);
        Ok(ConvBn::Branch { conv, bn, fused: None })
    }

    pub fn forward(&self, x: &Tensor4<T>, merged: bool) -> Result<Tensor4<T>> {
        match (self, merged) {
            (ConvBn::Branch { conv, bn, .. }, false) => batchnorm_infer(&conv2d(x, conv)?, bn),
            (ConvBn::Branch { fused: Some(f), .. }, true) | (ConvBn::Fused(f), true) => conv2d(x, f),
            (ConvBn::Branch { fused: None, .. }, true) => {
                Err(Error::State("layer has not been reparameterized".into()))
            }
            (ConvBn::Fused(_), false) => Err(Error::State(
                "branch form is unavailable for a merged-only layer".into(),
            )),
        }
    }

    fn conv(&self) -> &ConvSpec<T> {
        match self {
            ConvBn::Branch { conv, .. } => conv,
            ConvBn::Fused(f) => f,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.conv().out_ch()
    }

    pub(crate) fn reparameterize(&mut self) -> Result<()> {
        if let ConvBn::Branch { conv, bn, fused } = self {
            *fused = Some(fold_bn(conv, bn)?);
        }
        Ok(())
    }

    pub(crate) fn strip(&mut self) -> Result<()> {
        if let ConvBn::Branch { fused, .. } = self {
            let f = fused
                .take()
                .ok_or_else(|| Error::State("layer has not been reparameterized".into()))?;
            *self = ConvBn::Fused(f);
        }
        Ok(())
    }

    pub(crate) fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        let c = self.conv();
        let (oh, ow) = crate::tensor::output_shape(c, h, w)?;
        Ok((c.macs(h, w)?, oh, ow))
    }

    pub(crate) fn cast<U: Scalar>(&self) -> ConvBn<U> {
        match self {
            ConvBn::Branch { conv, bn, fused } => ConvBn::Branch {
                conv: conv.cast(),
                bn: bn.cast(),
                fused: fused.as_ref().map(ConvSpec::cast),
            },
            ConvBn::Fused(f) => ConvBn::Fused(f.cast()),
        }
    }
}

impl<T: Scalar> Parameters<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        match self {
            ConvBn::Branch { conv, bn, .. } => {
                conv.visit(&join(prefix, "conv"), f);
                bn.visit(&join(prefix, "bn"), f);
            }
            ConvBn::Fused(c) => c.visit(&join(prefix, "fused"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        match self {
            ConvBn::Branch { conv, bn, fused } => {
                *fused = None;
                conv.visit_mut(&join(prefix, "conv"), f)?;
                bn.visit_mut(&join(prefix, "bn"), f)
            }
            ConvBn::Fused(c) => c.visit_mut(&join(prefix, "fused"), f),
        }
    }
}

/// The depthwise large-kernel mixer of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<T> {
    Branches(RepBlockSpec<T>),
    Merged(ConvSpec<T>),
}

impl<T: Scalar> Mixer<T> {
    fn forward(&self, x: &Tensor4<T>, merged: bool) -> Result<Tensor4<T>> {
        match (self, merged) {
            (Mixer::Branches(b), false) => b.forward_branches(x, conv2d),
            (Mixer::Branches(b), true) => b.forward_merged(x, conv2d),
            (Mixer::Merged(m), true) => conv2d(x, m),
            (Mixer::Merged(_), false) => Err(Error::State(
                "branch form is unavailable for a merged-only block".into(),
            )),
        }
    }

    fn macs(&self, h: usize, w: usize, merged: bool) -> Result<u64> {
        match (self, merged) {
            (Mixer::Branches(b), false) => b.branch_macs(h, w),
            (Mixer::Branches(b), true) => b.merged_macs(h, w),
            (Mixer::Merged(m), _) => m.macs(h, w),
        }
    }
}

impl<T: Scalar> Parameters<T> for Mixer<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        match self {
            Mixer::Branches(b) => {
                b.large.0.visit(&join(prefix, "large.conv"), f);
                b.large.1.visit(&join(prefix, "large.bn"), f);
                if let Some((c, bn)) = &b.small {
                    c.visit(&join(prefix, "small.conv"), f);
                    bn.visit(&join(prefix, "small.bn"), f);
                }
                if let Some(bn) = &b.identity {
                    bn.visit(&join(prefix, "identity.bn"), f);
                }
            }
            Mixer::Merged(m) => m.visit(&join(prefix, "merged"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        match self {
            Mixer::Branches(b) => {
                b.merged = None;
                b.large.0.visit_mut(&join(prefix, "large.conv"), f)?;
                b.large.1.visit_mut(&join(prefix, "large.bn"), f)?;
                if let Some((c, bn)) = &mut b.small {
                    c.visit_mut(&join(prefix, "small.conv"), f)?;
                    bn.visit_mut(&join(prefix, "small.bn"), f)?;
                }
                if let Some(bn) = &mut b.identity {
                    bn.visit_mut(&join(prefix, "identity.bn"), f)?;
                }
                Ok(())
            }
            Mixer::Merged(m) => m.visit_mut(&join(prefix, "merged"), f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepLkBlock<T> {
    pub expand: ConvBn<T>,
    pub mixer: Mixer<T>,
    pub project: ConvBn<T>,
}

impl<T: Scalar> RepLkBlock<T> {
    fn forward(&self, x: &Tensor4<T>, merged: bool) -> Result<Tensor4<T>> {
        let h = relu(&self.expand.forward(x, merged)?);
        let h = relu(&self.mixer.forward(&h, merged)?);
        add(x, &self.project.forward(&h, merged)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    /// Followed by ReLU.
    pub transition: Option<ConvBn<T>>,
    pub blocks: Vec<RepLkBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec<T> {
    pub config: BackboneConfig,
    /// Followed by ReLU.
    pub stem: ConvBn<T>,
    pub stages: Vec<Stage<T>>,
}

/// Deterministic construction from `cfg.seed`.
pub fn build_backbone<T: Scalar>(cfg: &BackboneConfig) -> Result<BackboneSpec<T>> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let eps = T::of(cfg.bn_eps);
    let stem = ConvBn::random(
        3,
        cfg.stem_out_ch,
        STEM_KERNEL,
        ConvGeometry::strided(STEM_STRIDE, 0),
        eps,
        &mut rng,
    )?;
    let mut in_ch = cfg.stem_out_ch;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let ch = cfg.stage_channels[s];
        let transition = if cfg.downsample[s] {
            Some(ConvBn::random(in_ch, ch, 3, ConvGeometry::strided(2, 1), eps, &mut rng)?)
        } else if in_ch != ch {
            Some(ConvBn::random(in_ch, ch, 1, ConvGeometry::default(), eps, &mut rng)?)
        } else {
            None
        };
        let hidden = ch * cfg.expansion;
        let shape = RepBlockShape {
            in_ch: hidden,
            out_ch: hidden,
            groups: hidden,
            large_kernel: cfg.stage_kernels[s],
            small_kernel: cfg.small_kernel,
            identity: cfg.identity_branch,
            stride: 1,
        };
        let blocks = (0..cfg.stage_depths[s])
            .map(|_| {
                Ok(RepLkBlock {
                    expand: ConvBn::random(ch, hidden, 1, ConvGeometry::default(), eps, &mut rng)?,
                    mixer: Mixer::Branches(RepBlockSpec::random(&shape, eps, &mut rng)?),
                    project: ConvBn::random(hidden, ch, 1, ConvGeometry::default(), eps, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { transition, blocks });
        in_ch = ch;
    }
    Ok(BackboneSpec {
        config: cfg.clone(),
        stem,
        stages,
    })
}

pub(crate) fn check_input<T: Scalar>(x: &Tensor4<T>) -> Result<()> {
    if x.c() != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {}", x.c())));
    }
    check_size(x.h(), x.w())
}

pub(crate) fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::Geometry(format!(
            "input {h}x{w} is not a positive multiple of {OUTPUT_STRIDE}"
        )));
    }
    Ok(())
}

/// Stage outputs `f1..f4` at strides 4, 8, 16, 32.
pub fn backbone_forward<T: Scalar>(spec: &BackboneSpec<T>, x: &Tensor4<T>, merged: bool) -> Result<Vec<Tensor4<T>>> {
    check_input(x)?;
    let mut h = relu(&spec.stem.forward(x, merged)?);
    let mut features = Vec::with_capacity(spec.stages.len());
    for stage in &spec.stages {
        if let Some(t) = &stage.transition {
            h = relu(&t.forward(&h, merged)?);
        }
        for block in &stage.blocks {
            h = block.forward(&h, merged)?;
        }
        features.push(h.clone());
    }
    Ok(features)
}

impl<T: Scalar> BackboneSpec<T> {
    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        std::iter::once(&mut self.stem).chain(self.stages.iter_mut().flat_map(|s| {
            s.transition
                .iter_mut()
                .chain(s.blocks.iter_mut().flat_map(|b| [&mut b.expand, &mut b.project]))
        }))
    }

    fn mixers_mut(&mut self) -> impl Iterator<Item = &mut Mixer<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut().map(|b| &mut b.mixer))
    }

    /// Compute merged forms for every layer, keeping the branch forms.
    pub fn reparameterize(&mut self) -> Result<()> {
        for layer in self.layers_mut() {
            layer.reparameterize()?;
        }
        for mixer in self.mixers_mut() {
            if let Mixer::Branches(b) = mixer {
                merge_rep_block(b)?;
            }
        }
        Ok(())
    }

    /// Drop branch forms, leaving only the merged network.
    pub fn strip_branches(&mut self) -> Result<()> {
        for layer in self.layers_mut() {
            layer.strip()?;
        }
        for mixer in self.mixers_mut() {
            if let Mixer::Branches(b) = mixer {
                let m = b
                    .merged
                    .take()
                    .ok_or_else(|| Error::State("block has not been merged".into()))?;
                *mixer = Mixer::Merged(m);
            }
        }
        Ok(())
    }

    /// True when the branch form is gone.
    pub fn is_merged_only(&self) -> bool {
        matches!(self.stem, ConvBn::Fused(_))
    }

    pub fn rep_blocks(&self) -> impl Iterator<Item = &RepBlockSpec<T>> {
        self.stages.iter().flat_map(|s| {
            s.blocks.iter().filter_map(|b| match &b.mixer {
                Mixer::Branches(r) => Some(r),
                Mixer::Merged(_) => None,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.stage_channels[3]
    }

    /// Learned parameters of the requested form: weights, biases and
    /// batch-norm affine terms for branches, weights and biases when merged.
    pub fn count_params(&self, merged: bool) -> Result<usize> {
        if merged && !self.is_merged_only() {
            let mut m = self.clone();
            m.reparameterize()?;
            m.strip_branches()?;
            return Ok(m.param_count());
        }
        if !merged && self.is_merged_only() {
            return Err(Error::State("branch form is unavailable".into()));
        }
        Ok(self.param_count())
    }

    pub fn count_macs(&self, h: usize, w: usize, merged: bool) -> Result<u64> {
        if !merged && self.is_merged_only() {
            return Err(Error::State("branch form is unavailable".into()));
        }
        let (mut total, mut h, mut w) = self.stem.macs(h, w)?;
        for stage in &self.stages {
            if let Some(t) = &stage.transition {
                let (m, oh, ow) = t.macs(h, w)?;
                total += m;
                (h, w) = (oh, ow);
            }
            for b in &stage.blocks {
                total += b.expand.macs(h, w)?.0;
                total += b.mixer.macs(h, w, merged)?;
                total += b.project.macs(h, w)?.0;
            }
        }
        Ok(total)
    }

    pub fn cast<U: Scalar>(&self) -> BackboneSpec<U> {
        BackboneSpec {
            config: self.config.clone(),
            stem: self.stem.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    transition: s.transition.as_ref().map(ConvBn::cast),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| RepLkBlock {
                            expand: b.expand.cast(),
                            mixer: match &b.mixer {
                                Mixer::Branches(r) => Mixer::Branches(r.cast()),
                                Mixer::Merged(m) => Mixer::Merged(m.cast()),
                            },
                            project: b.project.cast(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for BackboneSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{}", s + 1));
            if let Some(t) = &stage.transition {
                t.visit(&join(&sp, "transition"), f);
            }
            for (i, b) in stage.blocks.iter().enumerate() {
                let bp = join(&sp, &format!("block{i}"));
                b.expand.visit(&join(&bp, "expand"), f);
                b.mixer.visit(&join(&bp, "mixer"), f);
                b.project.visit(&join(&bp, "project"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        self.stem.visit_mut(&join(prefix, "stem"), f)?;
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{}", s + 1));
            if let Some(t) = &mut stage.transition {
                t.visit_mut(&join(&sp, "transition"), f)?;
            }
            for (i, b) in stage.blocks.iter_mut().enumerate() {
                let bp = join(&sp, &format!("block{i}"));
                b.expand.visit_mut(&join(&bp, "expand"), f)?;
                b.mixer.visit_mut(&join(&bp, "mixer"), f)?;
                b.project.visit_mut(&join(&bp, "project"), f)?;
            }
        }
        Ok(())
    }
}

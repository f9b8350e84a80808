//! Structural reparameterization of multi-branch convolution blocks.
//!
//! A block is trained as a sum of parallel branches, each a convolution
//! followed by inference-mode batch norm:
//!
//! ```text
//! y = BN_L(conv_KxK(x)) + BN_s(conv_kxk(x)) + BN_id(x)
//! ```
//!
//! Every branch is affine in `x`, so the sum collapses into one `K x K`
//! convolution with bias: fold each batch norm into its convolution, zero-pad
//! the small kernel (and the identity, written as a Dirac kernel) to `K x K`,
//! then add weights and biases. Branches are always summed in the order
//! large, small, identity.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    add, batchnorm_infer, conv2d_naive, BatchNormSpec, ConvGeometry, ConvSpec, Scalar, Tensor4,
};

/// A convolution routine; lets callers pick the reference or fast path.
pub type ConvFn<T> = fn(&Tensor4<T>, &ConvSpec<T>) -> Result<Tensor4<T>>;

/// Fold inference batch norm into the preceding convolution.
///
/// `W'_o = W_o * s_o`, `b'_o = beta_o + (b_o - mean_o) * s_o` with
/// `s_o = gamma_o / sqrt(var_o + eps)`.
pub fn fold_bn<T: Scalar>(conv: &ConvSpec<T>, bn: &BatchNormSpec<T>) -> Result<ConvSpec<T>> {
    bn.validate()?;
    let out_ch = conv.out_ch();
    if bn.channels() != out_ch {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, conv produces {out_ch}",
            bn.channels()
        )));
    }
    let mut scales = Vec::with_capacity(out_ch);
    for o in 0..out_ch {
        let denom = (bn.running_var[o] + bn.eps).sqrt();
        if !(denom > T::zero()) {
            return Err(Error::Numeric(format!(
                "channel {o}: var + eps must be positive to fold batch norm"
            )));
        }
        scales.push(bn.gamma[o] / denom);
    }

    let per_out = conv.weights().len() / out_ch;
    let mut weights = conv.weights().clone();
    for (o, chunk) in weights.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|w| *w *= scales[o]);
    }
    let bias = (0..out_ch)
        .map(|o| {
            let b = conv.bias().map_or(T::zero(), |b| b[o]);
            bn.beta[o] + (b - bn.running_mean[o]) * scales[o]
        })
        .collect();
    ConvSpec::new(weights, Some(bias), conv.geometry(), conv.groups())
}

fn require_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        Err(Error::Parity(k))
    } else {
        Ok(())
    }
}

fn require_same_padding<T: Scalar>(conv: &ConvSpec<T>) -> Result<()> {
    let (kh, kw) = conv.kernel();
    let (dh, dw) = conv.dilation();
    if conv.padding() != (dh * (kh - 1) / 2, dw * (kw - 1) / 2) {
        return Err(Error::Structure(format!(
            "kernel {kh}x{kw} needs \"same\" padding, has {:?}",
            conv.padding()
        )));
    }
    Ok(())
}

/// Zero-pad a centered `k x k` kernel to `K x K`, keeping "same" padding.
pub fn embed_kernel<T: Scalar>(conv: &ConvSpec<T>, target: usize) -> Result<ConvSpec<T>> {
    let (kh, kw) = conv.kernel();
    require_odd(kh)?;
    require_odd(kw)?;
    require_odd(target)?;
    if kh != kw {
        return Err(Error::Structure(format!("kernel {kh}x{kw} is not square")));
    }
    if target < kh {
        return Err(Error::Structure(format!(
            "cannot embed a {kh}x{kh} kernel into {target}x{target}"
        )));
    }
    require_same_padding(conv)?;
    if target == kh {
        return Ok(conv.clone());
    }

    let off = (target - kh) / 2;
    let src = conv.weights();
    let mut w = Tensor4::zeros([src.n(), src.c(), target, target]);
    for o in 0..src.n() {
        for i in 0..src.c() {
            for y in 0..kh {
                for x in 0..kw {
                    w.set(o, i, y + off, x + off, src.at(o, i, y, x));
                }
            }
        }
    }
    let (dh, dw) = conv.dilation();
    let geometry = ConvGeometry {
        stride: conv.stride(),
        dilation: conv.dilation(),
        padding: (dh * (target - 1) / 2, dw * (target - 1) / 2),
    };
    ConvSpec::new(w, conv.bias().map(<[T]>::to_vec), geometry, conv.groups())
}

fn identity_kernel<T: Scalar>(
    channels: usize,
    groups: usize,
    kernel: usize,
    dilation: usize,
) -> Result<ConvSpec<T>> {
    require_odd(kernel)?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Shape(format!(
            "{channels} channels not divisible by {groups} groups"
        )));
    }
    let per_group = channels / groups;
    let center = kernel / 2;
    let mut w = Tensor4::zeros([channels, per_group, kernel, kernel]);
    for o in 0..channels {
        w.set(o, o % per_group, center, center, T::one());
    }
    ConvSpec::new(w, None, ConvGeometry::same(kernel, dilation, 1), groups)
}

/// `K x K` convolution computing the identity map at stride 1.
pub fn identity_as_conv<T: Scalar>(channels: usize, groups: usize, kernel: usize) -> Result<ConvSpec<T>> {
    identity_kernel(channels, groups, kernel, 1)
}

/// Sum parallel convolutions with identical geometry into one.
pub fn merge_parallel<T: Scalar>(convs: &[ConvSpec<T>]) -> Result<ConvSpec<T>> {
    let first = convs
        .first()
        .ok_or_else(|| Error::Shape("no branches to merge".into()))?;
    for (i, c) in convs.iter().enumerate().skip(1) {
        if c.weights().shape() != first.weights().shape()
            || c.geometry() != first.geometry()
            || c.groups() != first.groups()
        {
            return Err(Error::Shape(format!(
                "branch {i} geometry differs: {:?}/{:?}/groups {} vs {:?}/{:?}/groups {}",
                c.weights().shape(),
                c.geometry(),
                c.groups(),
                first.weights().shape(),
                first.geometry(),
                first.groups()
            )));
        }
    }
    let mut weights = first.weights().clone();
    for c in &convs[1..] {
        weights
            .data_mut()
            .iter_mut()
            .zip(c.weights().data())
            .for_each(|(a, &b)| *a += b);
    }
    let bias = if convs.iter().any(|c| c.bias().is_some()) {
        let mut acc = vec![T::zero(); first.out_ch()];
        for c in convs {
            if let Some(b) = c.bias() {
                acc.iter_mut().zip(b).for_each(|(a, &v)| *a += v);
            }
        }
        Some(acc)
    } else {
        None
    };
    ConvSpec::new(weights, bias, first.geometry(), first.groups())
}

/// Shape parameters for generating a random [`RepBlockSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepBlockShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub large_kernel: usize,
    pub small_kernel: Option<usize>,
    pub identity: bool,
    pub stride: usize,
}

/// A multi-branch large-kernel block and, once merged, its single-kernel form.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlockSpec<T> {
    pub large: (ConvSpec<T>, BatchNormSpec<T>),
    pub small: Option<(ConvSpec<T>, BatchNormSpec<T>)>,
    pub identity: Option<BatchNormSpec<T>>,
    pub merged: Option<ConvSpec<T>>,
}

impl<T: Scalar> RepBlockSpec<T> {
    pub fn new(
        large: (ConvSpec<T>, BatchNormSpec<T>),
        small: Option<(ConvSpec<T>, BatchNormSpec<T>)>,
        identity: Option<BatchNormSpec<T>>,
    ) -> Result<Self> {
        let block = Self {
            large,
            small,
            identity,
            merged: None,
        };
        block.validate()?;
        Ok(block)
    }

    /// Random block with fan-in uniform weights and random batch-norm statistics.
    pub fn random(shape: &RepBlockShape, eps: T, rng: &mut SplitMix64) -> Result<Self> {
        let s = shape;
        let large = ConvSpec::random(
            s.in_ch,
            s.out_ch,
            (s.large_kernel, s.large_kernel),
            ConvGeometry::same(s.large_kernel, 1, s.stride),
            s.groups,
            false,
            rng,
        )?;
        let large_bn = BatchNormSpec::random(s.out_ch, eps, rng);
        let small = match s.small_kernel {
            Some(k) => {
                let conv = ConvSpec::random(
                    s.in_ch,
                    s.out_ch,
                    (k, k),
                    ConvGeometry::same(k, 1, s.stride),
                    s.groups,
                    false,
                    rng,
                )?;
                Some((conv, BatchNormSpec::random(s.out_ch, eps, rng)))
            }
            None => None,
        };
        let identity = s
            .identity
            .then(|| BatchNormSpec::random(s.out_ch, eps, rng));
        Self::new((large, large_bn), small, identity)
    }

    pub fn validate(&self) -> Result<()> {
        let (lc, lbn) = &self.large;
        let (k, kw) = lc.kernel();
        if k != kw {
            return Err(Error::Structure(format!("large kernel {k}x{kw} is not square")));
        }
        require_odd(k)?;
        require_same_padding(lc)?;
        if lbn.channels() != lc.out_ch() {
            return Err(Error::Shape("large-branch batch norm width differs".into()));
        }
        if let Some((sc, sbn)) = &self.small {
            let (sk, skw) = sc.kernel();
            if sk != skw {
                return Err(Error::Structure(format!("small kernel {sk}x{skw} is not square")));
            }
            require_odd(sk)?;
            require_same_padding(sc)?;
            if sk > k {
                return Err(Error::Structure(format!(
                    "small kernel {sk} exceeds large kernel {k}"
                )));
            }
            if sc.in_ch() != lc.in_ch()
                || sc.out_ch() != lc.out_ch()
                || sc.groups() != lc.groups()
                || sc.stride() != lc.stride()
                || sc.dilation() != lc.dilation()
            {
                return Err(Error::Structure(
                    "small branch must share channels, groups, stride and dilation".into(),
                ));
            }
            if sbn.channels() != sc.out_ch() {
                return Err(Error::Shape("small-branch batch norm width differs".into()));
            }
        }
        if let Some(ibn) = &self.identity {
            if lc.in_ch() != lc.out_ch() || lc.stride() != (1, 1) {
                return Err(Error::Structure(format!(
                    "identity branch needs in_ch == out_ch and stride 1 (have {} -> {}, stride {:?})",
                    lc.in_ch(),
                    lc.out_ch(),
                    lc.stride()
                )));
            }
            if ibn.channels() != lc.out_ch() {
                return Err(Error::Shape("identity batch norm width differs".into()));
            }
        }
        Ok(())
    }

    pub fn in_ch(&self) -> usize {
        self.large.0.in_ch()
    }

    pub fn out_ch(&self) -> usize {
        self.large.0.out_ch()
    }

    pub fn kernel(&self) -> usize {
        self.large.0.kernel().0
    }

    pub fn groups(&self) -> usize {
        self.large.0.groups()
    }

    pub fn stride(&self) -> usize {
        self.large.0.stride().0
    }

    /// Multi-branch forward, summing large, small, identity in that order.
    pub fn forward_branches(&self, x: &Tensor4<T>, conv: ConvFn<T>) -> Result<Tensor4<T>> {
        let (lc, lbn) = &self.large;
        let mut y = batchnorm_infer(&conv(x, lc)?, lbn)?;
        if let Some((sc, sbn)) = &self.small {
            y = add(&y, &batchnorm_infer(&conv(x, sc)?, sbn)?)?;
        }
        if let Some(ibn) = &self.identity {
            y = add(&y, &batchnorm_infer(x, ibn)?)?;
        }
        Ok(y)
    }

    pub fn forward_merged(&self, x: &Tensor4<T>, conv: ConvFn<T>) -> Result<Tensor4<T>> {
        let merged = self
            .merged
            .as_ref()
            .ok_or_else(|| Error::State("block has not been merged".into()))?;
        conv(x, merged)
    }

    /// Conv weights and biases plus batch-norm affine parameters of the branch form.
    pub fn branch_param_count(&self) -> usize {
        let bn = |b: &BatchNormSpec<T>| 2 * b.channels();
        let mut n = self.large.0.param_count() + bn(&self.large.1);
        if let Some((c, b)) = &self.small {
            n += c.param_count() + bn(b);
        }
        if let Some(b) = &self.identity {
            n += bn(b);
        }
        n
    }

    /// Parameters of the merged single kernel (weights plus bias).
    pub fn merged_param_count(&self) -> usize {
        self.large.0.weights().len() + self.out_ch()
    }

    pub fn branch_macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut macs = self.large.0.macs(h, w)?;
        if let Some((c, _)) = &self.small {
            macs += c.macs(h, w)?;
        }
        Ok(macs)
    }

    pub fn merged_macs(&self, h: usize, w: usize) -> Result<u64> {
        self.large.0.macs(h, w)
    }

    pub fn cast<U: Scalar>(&self) -> RepBlockSpec<U> {
        RepBlockSpec {
            large: (self.large.0.cast(), self.large.1.cast()),
            small: self.small.as_ref().map(|(c, b)| (c.cast(), b.cast())),
            identity: self.identity.as_ref().map(BatchNormSpec::cast),
            merged: self.merged.as_ref().map(ConvSpec::cast),
        }
    }
}

/// Collapse a block into one `K x K` convolution, store it in `block.merged`
/// and return it.
pub fn merge_rep_block<T: Scalar>(block: &mut RepBlockSpec<T>) -> Result<ConvSpec<T>> {
    block.validate()?;
    let k = block.kernel();
    let mut parts = vec![fold_bn(&block.large.0, &block.large.1)?];
    if let Some((conv, bn)) = &block.small {
        parts.push(embed_kernel(&fold_bn(conv, bn)?, k)?);
    }
    if let Some(bn) = &block.identity {
        let dilation = block.large.0.dilation().0;
        let id = identity_kernel(block.in_ch(), block.groups(), k, dilation)?;
        parts.push(fold_bn(&id, bn)?);
    }
    let merged = merge_parallel(&parts)?;
    block.merged = Some(merged.clone());
    Ok(merged)
}

/// Outcome of comparing merged and multi-branch forwards on random inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    /// `max_abs_diff` relative to the largest branch-form output magnitude.
    pub max_rel_diff: f64,
    pub passed: bool,
    pub tolerance: f64,
    /// Set when `trials == 0`; the pass is then vacuous.
    pub zero_trials: bool,
}

impl EquivalenceReport {
    pub fn from_diffs(trials: usize, max_abs: f64, max_ref: f64, tolerance: f64) -> Self {
        Self {
            trials,
            max_abs_diff: max_abs,
            max_rel_diff: if max_ref > 0.0 { max_abs / max_ref } else { max_abs },
            passed: max_abs <= tolerance,
            tolerance,
            zero_trials: trials == 0,
        }
    }
}

/// Spatial side of the random probe inputs used by [`equivalence_check`].
pub const PROBE_SIDE: usize = 16;

/// Run `trials` seeded `U(-1, 1)` inputs of size `PROBE_SIDE x PROBE_SIDE`
/// through both forms with the reference convolution.
pub fn equivalence_check<T: Scalar>(
    block: &RepBlockSpec<T>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if block.merged.is_none() {
        return Err(Error::State("block has not been merged".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let x = Tensor4::random_uniform([1, block.in_ch(), PROBE_SIDE, PROBE_SIDE], -1.0, 1.0, &mut rng);
        let reference = block.forward_branches(&x, conv2d_naive)?;
        let merged = block.forward_merged(&x, conv2d_naive)?;
        max_abs = max_abs.max(reference.max_abs_diff(&merged)?);
        max_ref = reference
            .data()
            .iter()
            .fold(max_ref, |m, v| m.max(v.as_f64().abs()));
    }
    Ok(EquivalenceReport::from_diffs(trials, max_abs, max_ref, tol))
}

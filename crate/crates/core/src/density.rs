//! Ground-truth density maps from head-point annotations.
//!
//! Every point contributes a square-truncated isotropic Gaussian sampled at
//! pixel centers (`x + 0.5`). With renormalization on, each contribution is
//! rescaled to sum to one after truncation and border clipping, so the map
//! integrates to the point count.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;
use crate::tensor::{sum_pool, Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotations {
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotations {
    pub fn new(width: usize, height: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        let ann = Self { width, height, points };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        for (i, &(x, y)) in self.points.iter().enumerate() {
            let inside = (0.0..self.width as f64).contains(&x) && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err(Error::Validation(format!(
                    "point {i} at ({x}, {y}) lies outside the {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Non-negative row-major `h x w` grid of densities.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w} map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!(
                "density value {} at index {i} is negative or non-finite",
                values[i]
            )));
        }
        Ok(Self { h, w, values })
    }

    /// From a `1 x 1 x h x w` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        if t.n() != 1 || t.c() != 1 {
            return Err(Error::Shape(format!(
                "density tensors are 1x1xHxW, got {:?}",
                t.shape()
            )));
        }
        Self::new(t.h(), t.w(), t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_vec([1, 1, self.h, self.w], self.values.iter().map(|&v| T::of(v)).collect())
            .expect("length checked at construction")
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn count(&self) -> f64 {
        neumaier_sum(self.values.iter().copied())
    }

    /// Multiply every value by `s >= 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.h, self.w, self.values.iter().map(|v| v * s).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    pub mode: SigmaMode,
    /// Bandwidth in pixels; also the adaptive fallback.
    pub sigma: f64,
    /// Half-width of the square window, in sigmas.
    pub truncate: f64,
    pub k_nn: usize,
    pub beta: f64,
    pub renormalize: bool,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            mode: SigmaMode::Fixed,
            sigma: 4.0,
            truncate: 4.0,
            k_nn: 3,
            beta: 0.3,
            renormalize: true,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be positive and finite"));
        }
        if !(self.truncate >= 1.0 && self.truncate.is_finite()) {
            return Err(Error::config("truncate", "must be at least 1"));
        }
        if self.mode == SigmaMode::Adaptive {
            if self.k_nn == 0 {
                return Err(Error::config("k_nn", "must be positive"));
            }
            if !(self.beta > 0.0 && self.beta.is_finite()) {
                return Err(Error::config("beta", "must be positive and finite"));
            }
        }
        Ok(())
    }
}

struct Dist(f64);

impl PartialEq for Dist {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `beta` times the mean distance to the `k_nn` nearest other points.
///
/// Fewer than two points, or a point whose neighbors all coincide with it,
/// gets `fallback`.
pub fn adaptive_sigmas(ann: &PointAnnotations, k_nn: usize, beta: f64, fallback: f64) -> Vec<f64> {
    let pts = &ann.points;
    if pts.len() < 2 || k_nn == 0 {
        return vec![fallback; pts.len()];
    }
    let k = k_nn.min(pts.len() - 1);
    pts.iter()
        .enumerate()
        .map(|(i, &(xi, yi))| {
            let mut heap = BinaryHeap::with_capacity(k + 1);
            for (j, &(xj, yj)) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                heap.push(Dist((xi - xj).hypot(yi - yj)));
                if heap.len() > k {
                    heap.pop();
                }
            }
            let mut nearest: Vec<f64> = heap.into_iter().map(|d| d.0).collect();
            nearest.sort_by(f64::total_cmp);
            let sigma = beta * nearest.iter().sum::<f64>() / k as f64;
            if sigma > 0.0 {
                sigma
            } else {
                fallback
            }
        })
        .collect()
}

/// 1-D Gaussian weights over pixels whose centers lie within `radius` of `p`,
/// clipped to `[0, len)`. Returns the first pixel index and the weights.
///
/// Offsets are formed from the integer and fractional parts of `p`
/// separately, so integer translations reproduce identical weights.
fn axis_weights(p: f64, sigma: f64, radius: f64, len: usize) -> (usize, Vec<f64>) {
    let ip = p.floor();
    let fp = p - ip;
    let lo = (fp - 0.5 - radius).ceil() as i64;
    let hi = (fp - 0.5 + radius).floor() as i64;
    let base = ip as i64;
    let start = (base + lo).max(0);
    let end = (base + hi).min(len as i64 - 1);
    if end < start {
        // Window narrower than a pixel: the containing pixel takes everything.
        return ((base.max(0) as usize).min(len - 1), vec![1.0]);
    }
    let two_var = 2.0 * sigma * sigma;
    let weights = (start..=end)
        .map(|j| {
            let d = ((j - base) as f64 + 0.5) - fp;
            (-d * d / two_var).exp()
        })
        .collect();
    (start as usize, weights)
}

/// Exponent `m` of the quantum `2^-m` used for renormalized maps: the
/// largest such that `points * 2^m <= 2^53`, so every partial sum of the map
/// is an exactly representable multiple of the quantum.
pub fn quantum_exponent(points: usize) -> u32 {
    let bits = usize::BITS - points.max(1).saturating_sub(1).leading_zeros();
    53 - bits.min(53)
}

/// Split `2^m` quanta over the window in proportion to `gx[i] * gy[j] / norm`,
/// rounding by largest remainder so the integer total is exact.
fn quantize_point(gx: &[f64], gy: &[f64], norm: f64, m: u32) -> Vec<u64> {
    let scale = (m as f64).exp2();
    let mut units = Vec::with_capacity(gx.len() * gy.len());
    let mut rems = Vec::with_capacity(units.capacity());
    for &wy in gy {
        for &wx in gx {
            let v = wx * wy / norm * scale;
            let f = v.floor();
            units.push(f as u64);
            rems.push(v - f);
        }
    }
    let target = 1u64 << m;
    let have: u64 = units.iter().sum();
    let mut order: Vec<usize> = (0..units.len()).collect();
    if have < target {
        order.sort_by(|&a, &b| rems[b].total_cmp(&rems[a]).then(a.cmp(&b)));
        let need = (target - have) as usize;
        for &i in order.iter().cycle().take(need) {
            units[i] += 1;
        }
    } else if have > target {
        order.sort_by(|&a, &b| rems[a].total_cmp(&rems[b]).then(a.cmp(&b)));
        let mut excess = have - target;
        while excess > 0 {
            for &i in &order {
                if excess > 0 && units[i] > 0 {
                    units[i] -= 1;
                    excess -= 1;
                }
            }
        }
    }
    units
}

/// Render the annotations as a density map.
///
/// With `renormalize` the map is built on a dyadic grid of spacing
/// `2^-quantum_exponent(n)`: each point contributes exactly `2^m` quanta, so
/// the count is exactly the number of points and any re-association of the
/// sum (such as [`align_to_output`]) gives the same total. Each pixel deviates
/// from the unquantized Gaussian by less than one quantum per overlapping
/// point.
pub fn generate_density(ann: &PointAnnotations, cfg: &GaussianConfig) -> Result<DensityMap> {
    ann.validate()?;
    cfg.validate()?;
    let sigmas = match cfg.mode {
        SigmaMode::Fixed => vec![cfg.sigma; ann.points.len()],
        SigmaMode::Adaptive => adaptive_sigmas(ann, cfg.k_nn, cfg.beta, cfg.sigma),
    };
    let (h, w) = (ann.height, ann.width);
    let m = quantum_exponent(ann.points.len());
    let mut units = vec![0u64; if cfg.renormalize { h * w } else { 0 }];
    let mut values = vec![0.0; h * w];
    for (&(px, py), &sigma) in ann.points.iter().zip(&sigmas) {
        let radius = cfg.truncate * sigma;
        let (x0, gx) = axis_weights(px, sigma, radius, w);
        let (y0, gy) = axis_weights(py, sigma, radius, h);
        if cfg.renormalize {
            let norm = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
            let q = quantize_point(&gx, &gy, norm, m);
            for (dy, row) in q.chunks(gx.len()).enumerate() {
                let dst = &mut units[(y0 + dy) * w + x0..][..gx.len()];
                dst.iter_mut().zip(row).for_each(|(d, &u)| *d += u);
            }
        } else {
            let norm = 2.0 * std::f64::consts::PI * sigma * sigma;
            for (dy, &wy) in gy.iter().enumerate() {
                let row = &mut values[(y0 + dy) * w + x0..][..gx.len()];
                for (v, &wx) in row.iter_mut().zip(&gx) {
                    *v += wx * wy / norm;
                }
            }
        }
    }
    if cfg.renormalize {
        let quantum = (-(m as f64)).exp2();
        values.iter_mut().zip(&units).for_each(|(v, &u)| *v = u as f64 * quantum);
    }
    DensityMap::new(h, w, values)
}

/// Sum-pool by `stride`, preserving the count.
pub fn align_to_output(dm: &DensityMap, stride: usize) -> Result<DensityMap> {
    if stride == 0 || dm.h % stride != 0 || dm.w % stride != 0 {
        return Err(Error::Geometry(format!(
            "{}x{} map is not divisible by stride {stride}",
            dm.h, dm.w
        )));
    }
    if stride == 1 {
        return Ok(dm.clone());
    }
    let pooled = sum_pool(&dm.to_tensor::<f64>(), stride)?;
    DensityMap::from_tensor(&pooled)
}

//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations: a density map from clicked points, Sinkhorn transport
//! between two clicked point sets, and merging a random large-kernel block
//! into one kernel. The plain functions return library errors so they can be
//! tested natively; the `#[wasm_bindgen]` wrappers turn those into `JsError`.

use repsfnet::density::{generate_density, DensityMap, GaussianConfig, PointAnnotations, SigmaMode};
use repsfnet::fusion::effective_receptive_field;
use repsfnet::loss::{exact_ot_oracle, ground_cost, ot_loss, SinkhornConfig};
use repsfnet::reparam::{embed_kernel, equivalence_check, fold_bn, merge_rep_block, RepBlockShape, RepBlockSpec};
use repsfnet::{Error, Result, SplitMix64};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn pairs(flat: &[f64]) -> Result<Vec<(f64, f64)>> {
    if flat.len() % 2 != 0 {
        return Err(Error::Validation("point list must hold x, y pairs".into()));
    }
    Ok(flat.chunks(2).map(|p| (p[0], p[1])).collect())
}

#[wasm_bindgen]
pub struct DensityView {
    width: usize,
    height: usize,
    values: Vec<f64>,
    count: f64,
    peak: f64,
}

#[wasm_bindgen]
impl DensityView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major densities.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> f64 {
        self.count
    }

    #[wasm_bindgen(getter)]
    pub fn peak(&self) -> f64 {
        self.peak
    }
}

/// Density map over a `width x height` image from flat `x, y` pairs.
pub fn density(width: usize, height: usize, points: &[f64], sigma: f64, adaptive: bool) -> Result<DensityView> {
    let ann = PointAnnotations::new(width, height, pairs(points)?)?;
    let cfg = GaussianConfig {
        mode: if adaptive { SigmaMode::Adaptive } else { SigmaMode::Fixed },
        sigma,
        ..Default::default()
    };
    let dm = generate_density(&ann, &cfg)?;
    Ok(DensityView {
        width,
        height,
        count: dm.count(),
        peak: dm.values().iter().fold(0.0, |m, &v| m.max(v)),
        values: dm.values().to_vec(),
    })
}

#[wasm_bindgen(js_name = densityFromPoints)]
pub fn density_from_points(
    width: usize,
    height: usize,
    points: &[f64],
    sigma: f64,
    adaptive: bool,
) -> std::result::Result<DensityView, JsError> {
    density(width, height, points, sigma, adaptive).map_err(js)
}

#[wasm_bindgen]
pub struct TransportView {
    value: f64,
    exact: f64,
    iterations: usize,
    violation: f64,
    converged: bool,
    flows: Vec<f64>,
}

#[wasm_bindgen]
impl TransportView {
    /// Transport cost of the entropic plan.
    #[wasm_bindgen(getter)]
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Exact assignment cost, or NaN when the instance is too large.
    #[wasm_bindgen(getter)]
    pub fn exact(&self) -> f64 {
        self.exact
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    #[wasm_bindgen(getter)]
    pub fn violation(&self) -> f64 {
        self.violation
    }

    #[wasm_bindgen(getter)]
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Plan entries above 1% of the largest, as `from_cell, to_cell, mass` triples.
    #[wasm_bindgen(getter)]
    pub fn flows(&self) -> Vec<f64> {
        self.flows.clone()
    }
}

fn atoms(side: usize, points: &[(f64, f64)], what: &str) -> Result<DensityMap> {
    if points.is_empty() {
        return Err(Error::Validation(format!("place at least one {what} point")));
    }
    let mut v = vec![0.0; side * side];
    for &(x, y) in points {
        if !(0.0..1.0).contains(&x) || !(0.0..1.0).contains(&y) {
            return Err(Error::Validation(format!("{what} point ({x}, {y}) outside the unit square")));
        }
        v[(y * side as f64) as usize * side + (x * side as f64) as usize] += 1.0;
    }
    DensityMap::new(side, side, v)
}

/// Sinkhorn transport between unit atoms dropped on a `side x side` grid.
/// Points are flat `x, y` pairs in `[0, 1)`.
pub fn transport(side: usize, pred: &[f64], gt: &[f64], epsilon: f64) -> Result<TransportView> {
    let p = atoms(side, &pairs(pred)?, "predicted")?;
    let q = atoms(side, &pairs(gt)?, "ground-truth")?;
    let cfg = SinkhornConfig {
        epsilon,
        max_iters: 2000,
        ..Default::default()
    };
    let r = ot_loss(&p, &q, &cfg)?;
    let (pm, qm) = (p.count(), q.count());
    let rows: Vec<usize> = (0..side * side).filter(|&i| p.values()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..side * side).filter(|&j| q.values()[j] > 0.0).collect();
    let mut entries = Vec::new();
    for &i in &rows {
        for &j in &cols {
            let c = ground_cost(side, side, i, j);
            let mass = p.values()[i] / pm * q.values()[j] / qm * ((r.f[i] + r.g[j] - c) / epsilon).exp();
            entries.push((i, j, mass));
        }
    }
    let largest = entries.iter().fold(0.0f64, |m, e| m.max(e.2));
    let flows = entries
        .into_iter()
        .filter(|e| e.2 >= 0.01 * largest)
        .flat_map(|(i, j, m)| [i as f64, j as f64, m])
        .collect();
    Ok(TransportView {
        value: r.value,
        exact: exact_ot_oracle(&p, &q).unwrap_or(f64::NAN),
        iterations: r.iterations,
        violation: r.marginal_violation,
        converged: r.converged,
        flows,
    })
}

#[wasm_bindgen(js_name = sinkhornTransport)]
pub fn sinkhorn_transport(
    side: usize,
    pred: &[f64],
    gt: &[f64],
    epsilon: f64,
) -> std::result::Result<TransportView, JsError> {
    transport(side, pred, gt, epsilon).map_err(js)
}

#[wasm_bindgen]
pub struct MergeView {
    kernel: usize,
    large: Vec<f64>,
    small: Vec<f64>,
    identity: Vec<f64>,
    merged: Vec<f64>,
    bias: f64,
    max_abs_diff: f64,
    branch_params: usize,
    merged_params: usize,
}

#[wasm_bindgen]
impl MergeView {
    #[wasm_bindgen(getter)]
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Folded large-kernel branch, `kernel x kernel` row-major.
    #[wasm_bindgen(getter)]
    pub fn large(&self) -> Vec<f64> {
        self.large.clone()
    }

    /// Folded small-kernel branch, zero-padded to `kernel x kernel`.
    #[wasm_bindgen(getter)]
    pub fn small(&self) -> Vec<f64> {
        self.small.clone()
    }

    /// Batch-norm shortcut as a centered single tap.
    #[wasm_bindgen(getter)]
    pub fn identity(&self) -> Vec<f64> {
        self.identity.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn merged(&self) -> Vec<f64> {
        self.merged.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Largest output difference between the two forms on random inputs.
    #[wasm_bindgen(getter, js_name = maxAbsDiff)]
    pub fn max_abs_diff(&self) -> f64 {
        self.max_abs_diff
    }

    #[wasm_bindgen(getter, js_name = branchParams)]
    pub fn branch_params(&self) -> usize {
        self.branch_params
    }

    #[wasm_bindgen(getter, js_name = mergedParams)]
    pub fn merged_params(&self) -> usize {
        self.merged_params
    }
}

/// Random single-channel block with a `large` kernel, an optional `small`
/// kernel and a batch-norm shortcut, merged into one kernel.
pub fn merge(large: usize, small: Option<usize>, seed: u64) -> Result<MergeView> {
    let shape = RepBlockShape {
        in_ch: 1,
        out_ch: 1,
        groups: 1,
        large_kernel: large,
        small_kernel: small,
        identity: true,
        stride: 1,
    };
    let mut rng = SplitMix64::new(seed);
    let mut block = RepBlockSpec::<f64>::random(&shape, 1e-5, &mut rng)?;
    let embedded = |conv, bn| -> Result<Vec<f64>> {
        Ok(embed_kernel(&fold_bn(conv, bn)?, large)?.weights().data().to_vec())
    };
    let large_k = embedded(&block.large.0, &block.large.1)?;
    let small_k = match &block.small {
        Some((c, bn)) => embedded(c, bn)?,
        None => vec![0.0; large * large],
    };
    let mut identity = vec![0.0; large * large];
    if let Some(bn) = &block.identity {
        identity[large * large / 2] = bn.gamma[0] / (bn.running_var[0] + bn.eps).sqrt();
    }
    let merged = merge_rep_block(&mut block)?;
    let report = equivalence_check(&block, 3, 1e-10, seed)?;
    Ok(MergeView {
        kernel: large,
        large: large_k,
        small: small_k,
        identity,
        merged: merged.weights().data().to_vec(),
        bias: merged.bias().map_or(0.0, |b| b[0]),
        max_abs_diff: report.max_abs_diff,
        branch_params: block.branch_param_count(),
        merged_params: block.merged_param_count(),
    })
}

#[wasm_bindgen(js_name = mergeBlock)]
pub fn merge_block(large: usize, small: usize, seed: u64) -> std::result::Result<MergeView, JsError> {
    merge(large, (small > 0).then_some(small), seed).map_err(js)
}

#[wasm_bindgen(js_name = receptiveField)]
pub fn receptive_field(k: usize, rate: usize) -> usize {
    effective_receptive_field(k, rate)
}

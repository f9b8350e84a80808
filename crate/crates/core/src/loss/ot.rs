//! Entropic optimal transport between normalized density maps.
//!
//! Both maps are normalized to unit mass and transport runs between their
//! supports (pixels with positive mass). The ground cost is the squared
//! distance between pixel centers in coordinates where the image diagonal
//! has length one: `C = ((dx)^2 + (dy)^2) / (h^2 + w^2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, neumaier_sum};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once both marginal L1 violations are at most this.
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 500,
            tolerance: 1e-6,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Result of [`ot_loss`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OtReport {
    /// Transport cost `<P, C>` of the final plan, without the entropy term.
    pub value: f64,
    /// Potential on the prediction grid, row-major; `P = a b^T exp((f + g - C) / eps)`.
    pub f: Vec<f64>,
    /// Potential on the ground-truth grid, row-major.
    pub g: Vec<f64>,
    pub iterations: usize,
    /// Larger of the row and column L1 marginal violations.
    pub marginal_violation: f64,
    pub converged: bool,
}

/// Squared normalized distance between the centers of pixels `i` and `j`
/// of an `h x w` grid.
pub fn ground_cost(h: usize, w: usize, i: usize, j: usize) -> f64 {
    let (yi, xi) = ((i / w) as f64, (i % w) as f64);
    let (yj, xj) = ((j / w) as f64, (j % w) as f64);
    let (dy, dx) = (yi - yj, xi - xj);
    (dx * dx + dy * dy) / ((h * h + w * w) as f64)
}

/// Unit-mass weights and their support indices.
pub(crate) fn normalize(dm: &DensityMap, side: &str) -> Result<(Vec<usize>, Vec<f64>, f64)> {
    let total = dm.count();
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("{side} map has zero mass")));
    }
    let (idx, mass): (Vec<usize>, Vec<f64>) = dm
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (i, v / total))
        .unzip();
    Ok((idx, mass, total))
}

/// Converged problem on the two supports.
pub(crate) struct Solved {
    pub h: usize,
    pub w: usize,
    pub eps: f64,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub pred_mass: f64,
    /// Potentials without reference measure: `P_ij = exp((F_i + G_j - C_ij) / eps)`.
    pub big_f: Vec<f64>,
    pub big_g: Vec<f64>,
    pub cost: Vec<f64>,
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
}

impl Solved {
    pub fn plan(&self) -> Vec<f64> {
        plan_of(&self.big_f, &self.big_g, &self.cost, self.eps)
    }

    pub fn value(&self, plan: &[f64]) -> f64 {
        neumaier_sum(plan.iter().zip(&self.cost).map(|(p, c)| p * c))
    }
}

fn marginal_violations(plan: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let m = b.len();
    let mut cols = vec![0.0; m];
    let mut row_err = 0.0;
    for (i, row) in plan.chunks(m).enumerate() {
        row_err += (row.iter().sum::<f64>() - a[i]).abs();
        cols.iter_mut().zip(row).for_each(|(c, &p)| *c += p);
    }
    let col_err = cols.iter().zip(b).map(|(c, bj)| (c - bj).abs()).sum();
    (row_err, col_err)
}

pub(crate) fn solve(pred: &DensityMap, gt: &DensityMap, cfg: &SinkhornConfig) -> Result<Solved> {
    cfg.validate()?;
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    let (h, w) = (pred.h(), pred.w());
    let (rows, a, pred_mass) = normalize(pred, "prediction")?;
    let (cols, b, _) = normalize(gt, "ground-truth")?;
    let (n, m) = (rows.len(), cols.len());
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| ground_cost(h, w, i, j)))
        .collect();
    let eps = cfg.epsilon;

    let mut big_f = vec![0.0; n];
    let mut big_g = vec![0.0; m];
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    if cfg.log_domain {
        let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
        let max_cost = cost.iter().fold(0.0f64, |acc, &c| acc.max(c));
        let schedule = epsilon_schedule(max_cost, eps);
        let mut col = vec![0.0; n];
        for (stage, &e) in schedule.iter().enumerate() {
            let last = stage + 1 == schedule.len();
            let target = if last { cfg.tolerance } else { ANNEAL_TOLERANCE };
            let mut sweeps = 0;
            while iterations < cfg.max_iters && (last || sweeps < ANNEAL_SWEEPS) {
                iterations += 1;
                sweeps += 1;
                for i in 0..n {
                    let row = &cost[i * m..(i + 1) * m];
                    let lse = log_sum_exp(big_g.iter().zip(row).map(|(g, c)| (g - c) / e));
                    big_f[i] = e * (la[i] - lse);
                }
                for j in 0..m {
                    for i in 0..n {
                        col[i] = (big_f[i] - cost[i * m + j]) / e;
                    }
                    big_g[j] = e * (lb[j] - log_sum_exp(col.iter().copied()));
                }
                let (r, c) = marginal_violations(&plan_of(&big_f, &big_g, &cost, e), &a, &b);
                violation = r.max(c);
                if violation <= target {
                    break;
                }
                if sweeps % NEWTON_EVERY == 0 && n.min(m) <= NEWTON_MAX_SUPPORT {
                    let (mut best, mut idle) = (violation, 0);
                    while iterations < cfg.max_iters && idle < NEWTON_PATIENCE {
                        if !newton_step(&mut big_f, &mut big_g, &a, &b, &cost, e) {
                            break;
                        }
                        iterations += 1;
                        let (r, c) = marginal_violations(&plan_of(&big_f, &big_g, &cost, e), &a, &b);
                        violation = r.max(c);
                        if violation <= target {
                            break;
                        }
                        if violation < 0.5 * best {
                            (best, idle) = (violation, 0);
                        } else {
                            idle += 1;
                        }
                    }
                    if violation <= target {
                        break;
                    }
                }
            }
        }
    } else {
        let kernel: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        while iterations < cfg.max_iters {
            iterations += 1;
            for i in 0..n {
                let kv: f64 = kernel[i * m..(i + 1) * m].iter().zip(&v).map(|(k, v)| k * v).sum();
                u[i] = a[i] / kv;
            }
            for j in 0..m {
                let ku: f64 = (0..n).map(|i| kernel[i * m + j] * u[i]).sum();
                v[j] = b[j] / ku;
            }
            if u.iter().chain(&v).any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "kernel-domain scaling overflowed at epsilon {eps}; use the log domain"
                )));
            }
            let plan: Vec<f64> = (0..n * m).map(|k| u[k / m] * kernel[k] * v[k % m]).collect();
            let (r, c) = marginal_violations(&plan, &a, &b);
            violation = r.max(c);
            if violation <= cfg.tolerance {
                break;
            }
        }
        big_f = u.iter().map(|x| eps * x.ln()).collect();
        big_g = v.iter().map(|x| eps * x.ln()).collect();
    }
    let converged = violation <= cfg.tolerance;
    Ok(Solved {
        h,
        w,
        eps,
        rows,
        cols,
        a,
        b,
        pred_mass,
        big_f,
        big_g,
        cost,
        iterations,
        violation,
        converged,
    })
}

/// Solves `[diag(r) P; P^T diag(c)] [x; y] = [p; q]` with `y_0 = 0`.
fn block_solve(plan: &[f64], r: &[f64], c: &[f64], p: &[f64], q: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (r.len(), c.len());
    let mut y = vec![0.0; m];
    if m > 1 {
        let k = m - 1;
        let mut schur = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for j in 1..m {
            let mut acc = q[j];
            for i in 0..n {
                acc -= plan[i * m + j] * p[i] / r[i];
            }
            rhs[j - 1] = acc;
        }
        for i in 0..n {
            let row = &plan[i * m..(i + 1) * m];
            for j in 1..m {
                let pj = row[j] / r[i];
                if pj == 0.0 {
                    continue;
                }
                for l in 1..m {
                    schur[(j - 1, l - 1)] -= pj * row[l];
                }
            }
        }
        for j in 1..m {
            schur[(j - 1, j - 1)] += c[j];
        }
        let sol = schur.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        y[1..].copy_from_slice(sol.as_slice());
    }
    let x = (0..n)
        .map(|i| {
            let row = &plan[i * m..(i + 1) * m];
            (p[i] - row.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()) / r[i]
        })
        .collect();
    Some((x, y))
}

fn marginals(plan: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![0.0; n];
    let mut c = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            r[i] += plan[i * m + j];
            c[j] += plan[i * m + j];
        }
    }
    (r, c)
}

/// Ratio between consecutive epsilons of the annealing schedule.
const ANNEAL_FACTOR: f64 = 0.25;
/// Sweep budget of each intermediate annealing stage.
const ANNEAL_SWEEPS: usize = 20;
/// Marginal violation that ends an intermediate stage early.
const ANNEAL_TOLERANCE: f64 = 1e-4;

/// Geometric schedule from the largest cost down to `eps`, ending at `eps`.
fn epsilon_schedule(max_cost: f64, eps: f64) -> Vec<f64> {
    let mut schedule = Vec::new();
    let mut e = max_cost;
    while e > eps {
        schedule.push(e);
        e *= ANNEAL_FACTOR;
    }
    schedule.push(eps);
    schedule
}

/// Supports above this size skip the Newton refinement.
const NEWTON_MAX_SUPPORT: usize = 512;
/// Sinkhorn sweeps between Newton attempts.
const NEWTON_EVERY: usize = 20;
/// Sufficient-increase constant of the backtracking line search.
const ARMIJO: f64 = 1e-4;
/// Newton steps in a row allowed without halving the best residual.
const NEWTON_PATIENCE: usize = 4;
/// Largest potential change per Newton step, in units of epsilon.
const NEWTON_MAX_STEP: f64 = 10.0;

/// One Newton ascent step on the entropic dual. Weakly coupled blocks of the
/// plan make the system nearly singular, so the step is tried under several
/// Levenberg-Marquardt dampings, each with a backtracking line search, and the
/// largest objective gain wins. Returns `false` when no damping yields a
/// sufficient increase.
fn newton_step(f: &mut [f64], g: &mut [f64], a: &[f64], b: &[f64], cost: &[f64], eps: f64) -> bool {
    let (n, m) = (f.len(), g.len());
    let plan = plan_of(f, g, cost, eps);
    let (r, c) = marginals(&plan, n, m);
    if r.iter().chain(&c).any(|&x| !(x > 0.0)) {
        return false;
    }
    let p: Vec<f64> = a.iter().zip(&r).map(|(x, y)| eps * (x - y)).collect();
    let q: Vec<f64> = b.iter().zip(&c).map(|(x, y)| eps * (x - y)).collect();
    let (vr, vc) = marginal_violations(&plan, a, b);
    let base_violation = vr.max(vc);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for damping in [0.0, 1e-4, 1e-2, 1.0, 1e2] {
        let lambda = damping * base_violation;
        let rd: Vec<f64> = r.iter().map(|x| x + lambda).collect();
        let cd: Vec<f64> = c.iter().map(|x| x + lambda).collect();
        let Some((df, dg)) = block_solve(&plan, &rd, &cd, &p, &q) else {
            continue;
        };
        let slope = neumaier_sum(p.iter().zip(&df).chain(q.iter().zip(&dg)).map(|(x, d)| x * d)) / eps;
        if !(slope > 0.0) {
            continue;
        }
        let largest = df.iter().chain(&dg).fold(0.0f64, |acc, d| acc.max(d.abs()));
        let mut t = (NEWTON_MAX_STEP * eps / largest).min(1.0);
        for _ in 0..30 {
            let gain = objective_gain(&plan, &df, &dg, t, a, b, eps);
            if gain.is_finite() && gain >= ARMIJO * t * slope {
                if best.as_ref().is_none_or(|(bg, _, _)| gain > *bg) {
                    let nf = f.iter().zip(&df).map(|(x, d)| x + t * d).collect();
                    let ng = g.iter().zip(&dg).map(|(x, d)| x + t * d).collect();
                    best = Some((gain, nf, ng));
                }
                break;
            }
            t *= 0.5;
        }
    }
    match best {
        Some((_, nf, ng)) => {
            f.copy_from_slice(&nf);
            g.copy_from_slice(&ng);
            true
        }
        None => false,
    }
}

/// Increase of the dual objective along `t * (df, dg)`, evaluated through
/// `expm1` so that small steps stay resolvable.
fn objective_gain(plan: &[f64], df: &[f64], dg: &[f64], t: f64, a: &[f64], b: &[f64], eps: f64) -> f64 {
    let m = dg.len();
    let linear = df.iter().zip(a).chain(dg.iter().zip(b)).map(|(d, w)| t * d * w);
    let mass = plan
        .iter()
        .enumerate()
        .map(|(k, &pk)| -eps * pk * (t * (df[k / m] + dg[k % m]) / eps).exp_m1());
    neumaier_sum(linear.chain(mass))
}

fn plan_of(big_f: &[f64], big_g: &[f64], cost: &[f64], eps: f64) -> Vec<f64> {
    let m = big_g.len();
    let mut p = Vec::with_capacity(big_f.len() * m);
    for (i, &fi) in big_f.iter().enumerate() {
        for (j, &gj) in big_g.iter().enumerate() {
            p.push(((fi + gj - cost[i * m + j]) / eps).exp());
        }
    }
    p
}

/// Transport cost between `pred / |pred|` and `gt / |gt|`.
///
/// Non-convergence within `max_iters` is reported through `converged`, not
/// as an error.
pub fn ot_loss(pred: &DensityMap, gt: &DensityMap, cfg: &SinkhornConfig) -> Result<OtReport> {
    let s = solve(pred, gt, cfg)?;
    let plan = s.plan();
    let value = s.value(&plan).max(0.0);
    let hw = s.h * s.w;
    let eps = s.eps;
    let lb: Vec<f64> = s.b.iter().map(|v| v.ln()).collect();
    let la: Vec<f64> = s.a.iter().map(|v| v.ln()).collect();
    // Reference-measure potentials: g_j = G_j - eps ln b_j, f by c-transform
    // everywhere so off-support pixels get a value too.
    let g_sup: Vec<f64> = s.big_g.iter().zip(&lb).map(|(g, l)| g - eps * l).collect();
    let f: Vec<f64> = (0..hw)
        .map(|k| {
            -eps * log_sum_exp(
                s.cols
                    .iter()
                    .enumerate()
                    .map(|(j, &col)| lb[j] + (g_sup[j] - ground_cost(s.h, s.w, k, col)) / eps),
            )
        })
        .collect();
    let f_sup: Vec<f64> = s.big_f.iter().zip(&la).map(|(f, l)| f - eps * l).collect();
    let g: Vec<f64> = (0..hw)
        .map(|k| {
            -eps * log_sum_exp(
                s.rows
                    .iter()
                    .enumerate()
                    .map(|(i, &row)| la[i] + (f_sup[i] - ground_cost(s.h, s.w, row, k)) / eps),
            )
        })
        .collect();
    Ok(OtReport {
        value,
        f,
        g,
        iterations: s.iterations,
        marginal_violation: s.violation,
        converged: s.converged,
    })
}

/// Gradient of [`ot_loss`]'s value with respect to the unnormalized
/// prediction, as a `1 x 1 x h x w` tensor.
///
/// The plan is differentiated implicitly through its marginal constraints.
/// With `r`, `c` the plan's marginals, `u_i = sum_j C_ij P_ij` and
/// `v_j = sum_i C_ij P_ij`, the sensitivity `alpha = dL/da` solves
///
/// ```text
/// [diag(r)  P      ] [alpha]   [u]
/// [P^T      diag(c)] [beta ] = [v]
/// ```
///
/// up to a shared constant, which the normalization projection removes:
/// `dL/dz = (alpha - <alpha, a>) / |z|`. Pixels with zero predicted mass use
/// the one-sided limit `alpha_k = sum_j pi_kj (C_kj - beta_j)` where `pi_k`
/// is the softmax row the plan would give a vanishing mass at `k`.
pub fn ot_gradient(pred: &DensityMap, gt: &DensityMap, cfg: &SinkhornConfig) -> Result<Tensor4<f64>> {
    let s = solve(pred, gt, cfg)?;
    let plan = s.plan();
    let (n, m) = (s.rows.len(), s.cols.len());
    let (r, c) = marginals(&plan, n, m);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let pc = plan[i * m + j] * s.cost[i * m + j];
            u[i] += pc;
            v[j] += pc;
        }
    }
    if r.iter().chain(&c).any(|&x| !(x > 0.0)) {
        return Err(Error::Numeric(
            "transport plan has an empty row or column; increase epsilon".into(),
        ));
    }
    let (_, beta) = block_solve(&plan, &r, &c, &u, &v)
        .ok_or_else(|| Error::Numeric("singular transport sensitivity system".into()))?;

    let hw = s.h * s.w;
    let mut alpha = vec![0.0; hw];
    let mut on_support = vec![usize::MAX; hw];
    for (i, &k) in s.rows.iter().enumerate() {
        on_support[k] = i;
    }
    for (k, slot) in alpha.iter_mut().enumerate() {
        *slot = if on_support[k] != usize::MAX {
            let i = on_support[k];
            let row = &plan[i * m..(i + 1) * m];
            row.iter()
                .zip(&s.cost[i * m..(i + 1) * m])
                .zip(&beta)
                .map(|((p, c), b)| p * (c - b))
                .sum::<f64>()
                / r[i]
        } else {
            let logits: Vec<f64> = s
                .cols
                .iter()
                .enumerate()
                .map(|(j, &col)| (s.big_g[j] - ground_cost(s.h, s.w, k, col)) / s.eps)
                .collect();
            let lse = log_sum_exp(logits.iter().copied());
            s.cols
                .iter()
                .enumerate()
                .map(|(j, &col)| (logits[j] - lse).exp() * (ground_cost(s.h, s.w, k, col) - beta[j]))
                .sum()
        };
    }
    let mean: f64 = s.rows.iter().zip(&s.a).map(|(&k, a)| a * alpha[k]).sum();
    let grad = alpha.iter().map(|x| (x - mean) / s.pred_mass).collect();
    Tensor4::from_vec([1, 1, s.h, s.w], grad)
}

//! Acceptance criteria 1 to 11, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the report is printed by a plain
//! `cargo test`. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use repsfnet::density::{align_to_output, generate_density, DensityMap, GaussianConfig, PointAnnotations, SigmaMode};
use repsfnet::fusion::{build_model, effective_receptive_field, model_forward, ModelConfig};
use repsfnet::io::{decode_bundle, decode_tensor, encode_bundle, encode_raw, encode_tensor, TensorData};
use repsfnet::loss::{eval_metrics, exact_ot_oracle, ot_gradient, ot_loss, SinkhornConfig};
use repsfnet::reparam::{equivalence_check, merge_rep_block, RepBlockShape, RepBlockSpec};
use repsfnet::tensor::{conv2d, conv2d_gemm, conv2d_naive, BatchNormSpec, ConvGeometry, ConvSpec};
use repsfnet::{Error, SplitMix64, Tensor4};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Test-side oracles

/// Zero-pads the input explicitly, then sums input channel, kernel row,
/// kernel column, and adds the bias last.
fn oracle_conv(x: &Tensor4<f64>, spec: &ConvSpec<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = x.shape();
    let [oc, cpg, kh, kw] = spec.weights().shape();
    let ConvGeometry { stride: (sy, sx), dilation: (dy, dx), padding: (py, px) } = spec.geometry();
    let (hp, wp) = (h + 2 * py, w + 2 * px);
    let mut padded = vec![0.0; n * c * hp * wp];
    for i in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                padded[(i * hp + y + py) * wp + xx + px] = x.data()[(i * h + y) * w + xx];
            }
        }
    }
    let oh = (hp - dy * (kh - 1) - 1) / sy + 1;
    let ow = (wp - dx * (kw - 1) - 1) / sx + 1;
    let opg = oc / spec.groups();
    let wt = spec.weights().data();
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let v = padded[((b * c + ch) * hp + oy * sy + ky * dy) * wp + ox * sx + kx * dx];
                                // Padded taps contribute nothing; skipping them keeps -0.0 sums intact.
                                let (iy, ix) = (oy * sy + ky * dy, ox * sx + kx * dx);
                                if iy < py || iy >= h + py || ix < px || ix >= w + px {
                                    continue;
                                }
                                acc += wt[((o * cpg + ci) * kh + ky) * kw + kx] * v;
                            }
                        }
                    }
                    if let Some(bias) = spec.bias() {
                        acc += bias[o];
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor4::from_vec([n, oc, oh, ow], out).unwrap()
}

fn oracle_bn(x: &Tensor4<f64>, bn: &BatchNormSpec<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = x.shape();
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let scale = bn.gamma[ch] / (bn.running_var[ch] + bn.eps).sqrt();
            for v in &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                *v = (*v - bn.running_mean[ch]) * scale + bn.beta[ch];
            }
        }
    }
    Tensor4::from_vec([n, c, h, w], out).unwrap()
}

fn oracle_branches(x: &Tensor4<f64>, block: &RepBlockSpec<f64>) -> Tensor4<f64> {
    let mut y = oracle_bn(&oracle_conv(x, &block.large.0), &block.large.1).into_data();
    if let Some((c, bn)) = &block.small {
        for (a, b) in y.iter_mut().zip(oracle_bn(&oracle_conv(x, c), bn).data()) {
            *a += b;
        }
    }
    if let Some(bn) = &block.identity {
        for (a, b) in y.iter_mut().zip(oracle_bn(x, bn).data()) {
            *a += b;
        }
    }
    let shape = oracle_conv(x, &block.large.0).shape();
    Tensor4::from_vec(shape, y).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Truncated Gaussian per point, normalized by its own in-image sum; an
/// empty window puts the unit mass on the containing pixel.
fn oracle_density(ann: &PointAnnotations, sigmas: &[f64], truncate: f64) -> Vec<f64> {
    let (w, h) = (ann.width, ann.height);
    let mut out = vec![0.0; w * h];
    for (&(px, py), &s) in ann.points.iter().zip(sigmas) {
        let r = truncate * s;
        let mut k = vec![0.0; w * h];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                if dx.abs() <= r && dy.abs() <= r {
                    k[y * w + x] = (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                    total += k[y * w + x];
                }
            }
        }
        if total == 0.0 {
            out[py as usize * w + px as usize] += 1.0;
        } else {
            for (o, v) in out.iter_mut().zip(&k) {
                *o += v / total;
            }
        }
    }
    out
}

fn oracle_sigmas(ann: &PointAnnotations, cfg: &GaussianConfig) -> Vec<f64> {
    let pts = &ann.points;
    if cfg.mode == SigmaMode::Fixed || pts.len() < 2 {
        return vec![cfg.sigma; pts.len()];
    }
    let k = cfg.k_nn.min(pts.len() - 1);
    pts.iter()
        .enumerate()
        .map(|(i, &(xi, yi))| {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            let s = cfg.beta * d[..k].iter().sum::<f64>() / k as f64;
            if s > 0.0 {
                s
            } else {
                cfg.sigma
            }
        })
        .collect()
}

fn atoms(rng: &mut SplitMix64, h: usize, w: usize, k: usize) -> DensityMap {
    let mut v = vec![0.0; h * w];
    for _ in 0..k {
        v[rng.below(h * w)] += 1.0;
    }
    DensityMap::new(h, w, v).unwrap()
}

fn positive_map(rng: &mut SplitMix64, h: usize, w: usize) -> DensityMap {
    DensityMap::new(h, w, (0..h * w).map(|_| rng.uniform(0.1, 2.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria

fn c01_reparam_equivalence() -> Outcome {
    let mut rng = SplitMix64::new(0xC01);
    let (mut worst64, mut worst_oracle, mut worst32) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200u64 {
        let large_kernel = [7, 9, 11, 13][rng.below(4)];
        let small_kernel = Some([1, 3, 5][rng.below(3)]);
        let in_ch = 1 + rng.below(4);
        let depthwise = rng.below(2) == 0;
        let out_ch = if depthwise { in_ch } else { 1 + rng.below(4) };
        let stride = 1 + rng.below(2);
        let shape = RepBlockShape {
            in_ch,
            out_ch,
            groups: if depthwise { in_ch } else { 1 },
            large_kernel,
            small_kernel,
            identity: stride == 1 && in_ch == out_ch && rng.below(2) == 0,
            stride,
        };

        let mut b64 = RepBlockSpec::<f64>::random(&shape, 1e-5, &mut rng).map_err(|e| e.to_string())?;
        merge_rep_block(&mut b64).map_err(|e| e.to_string())?;
        let r = equivalence_check(&b64, 2, 1e-10, i).map_err(|e| e.to_string())?;
        worst64 = worst64.max(r.max_abs_diff);
        ensure(r.passed, || format!("block {i} {shape:?}: binary64 diff {:e}", r.max_abs_diff))?;

        let x = Tensor4::<f64>::random_uniform([1, in_ch, 16, 16], -1.0, 1.0, &mut rng);
        let merged = conv2d(&x, b64.merged.as_ref().unwrap()).map_err(|e| e.to_string())?;
        let d = max_abs_diff(merged.data(), oracle_branches(&x, &b64).data());
        worst_oracle = worst_oracle.max(d);
        ensure(d <= 1e-10, || format!("block {i} {shape:?}: merged vs loop oracle {d:e}"))?;

        let mut b32 = RepBlockSpec::<f32>::random(&shape, 1e-5, &mut rng).map_err(|e| e.to_string())?;
        merge_rep_block(&mut b32).map_err(|e| e.to_string())?;
        let r = equivalence_check(&b32, 2, 1e-4, i).map_err(|e| e.to_string())?;
        worst32 = worst32.max(r.max_abs_diff);
        ensure(r.passed, || format!("block {i} {shape:?}: binary32 diff {:e}", r.max_abs_diff))?;
    }
    Ok(format!(
        "200 blocks; max |diff| f64 {worst64:.2e} (loop oracle {worst_oracle:.2e}) <= 1e-10, f32 {worst32:.2e} <= 1e-4"
    ))
}

fn c02_end_to_end_merged() -> Outcome {
    let cfg = ModelConfig::default();
    let mut model = build_model::<f32>(&cfg).map_err(|e| e.to_string())?;
    model.reparameterize().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(0xC02);
    let x = Tensor4::<f32>::random_uniform([1, 3, 320, 320], 0.0, 1.0, &mut rng);
    let branch = model_forward(&x, &model, false).map_err(|e| e.to_string())?;
    let merged = model_forward(&x, &model, true).map_err(|e| e.to_string())?;
    let d = branch.max_abs_diff(&merged).map_err(|e| e.to_string())?;
    let mb = model.count_macs(320, 320, false).map_err(|e| e.to_string())?;
    let mm = model.count_macs(320, 320, true).map_err(|e| e.to_string())?;
    ensure(d <= 1e-4, || format!("merged vs branch diff {d:e} > 1e-4"))?;
    ensure(mm < mb, || format!("merged MACs {mm} not below branch MACs {mb}"))?;
    Ok(format!("320x320 f32 max |diff| {d:.2e} <= 1e-4; MACs merged {mm} < branch {mb}"))
}

fn c03_conv_correctness() -> Outcome {
    let mut rng = SplitMix64::new(0xC03);
    let mut worst_gemm = 0.0f64;
    for i in 0..100 {
        let groups = 1 + rng.below(3);
        let (cin, cout) = (groups * (1 + rng.below(3)), groups * (1 + rng.below(3)));
        let k = (1 + rng.below(5), 1 + rng.below(5));
        let geometry = ConvGeometry {
            stride: (1 + rng.below(3), 1 + rng.below(3)),
            dilation: (1 + rng.below(2), 1 + rng.below(2)),
            padding: (rng.below(4), rng.below(4)),
        };
        let h = 1 + rng.below(12) + geometry.dilation.0 * (k.0 - 1);
        let w = 1 + rng.below(12) + geometry.dilation.1 * (k.1 - 1);
        let spec = ConvSpec::<f64>::random(cin, cout, k, geometry, groups, rng.below(2) == 0, &mut rng)
            .map_err(|e| e.to_string())?;
        let x = Tensor4::random_uniform([1 + rng.below(2), cin, h, w], -1.0, 1.0, &mut rng);
        let naive = conv2d_naive(&x, &spec).map_err(|e| e.to_string())?;
        let gemm = conv2d_gemm(&x, &spec).map_err(|e| e.to_string())?;
        let oracle = oracle_conv(&x, &spec);
        ensure(naive.shape() == oracle.shape() && gemm.shape() == oracle.shape(), || {
            format!("geometry {i}: shapes {:?} {:?} {:?}", naive.shape(), gemm.shape(), oracle.shape())
        })?;
        let exact = naive.data().iter().zip(oracle.data()).all(|(a, b)| a == b);
        ensure(exact, || format!("geometry {i}: naive differs from loop oracle"))?;
        let d = max_abs_diff(gemm.data(), naive.data());
        worst_gemm = worst_gemm.max(d);
        ensure(d <= 1e-12, || format!("geometry {i}: gemm vs naive {d:e}"))?;
    }
    Ok(format!("100 geometries; naive == loop oracle bitwise, gemm vs naive max {worst_gemm:.2e}"))
}

fn c04_shape_contract() -> Outcome {
    let mut model = build_model::<f32>(&ModelConfig::default()).map_err(|e| e.to_string())?;
    model.reparameterize().map_err(|e| e.to_string())?;
    model.strip_branches().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(0xC04);
    let mut seen = Vec::new();
    for (w, h, expect) in [(640, 480, (15, 20)), (1280, 960, (30, 40)), (1600, 1184, (37, 50))] {
        let x = Tensor4::<f32>::random_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let y = model_forward(&x, &model, true).map_err(|e| e.to_string())?;
        ensure((y.h(), y.w()) == expect, || format!("{w}x{h} gave {}x{}", y.w(), y.h()))?;
        ensure(y.data().iter().all(|&v| v >= 0.0), || format!("{w}x{h}: negative density"))?;
        seen.push(format!("{w}x{h}->{}x{}", y.w(), y.h()));
    }
    let x = Tensor4::<f32>::zeros([1, 3, 1200, 1600]);
    match model_forward(&x, &model, true) {
        Err(Error::Geometry(_)) => {}
        other => return Err(format!("1600x1200 should be a geometry error, got {:?}", other.map(|t| t.shape()))),
    }
    Ok(format!("{}; 1600x1200 rejected (geometry); all non-negative", seen.join(", ")))
}

fn c05_receptive_field() -> Outcome {
    let a = effective_receptive_field(3, 6);
    let b = effective_receptive_field(3, 24);
    ensure(a == 13 && b == 49, || format!("got {a} and {b}"))?;
    Ok("erf(3,6) = 13, erf(3,24) = 49".into())
}

fn c06_density() -> Outcome {
    let mut rng = SplitMix64::new(0xC06);
    let (mut worst_count, mut worst_pixel) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let (w, h) = (1 + rng.below(48), 1 + rng.below(40));
        let n = rng.below(25);
        let pts = (0..n)
            .map(|_| (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64)))
            .filter(|&(x, y)| x < w as f64 && y < h as f64)
            .collect();
        let ann = PointAnnotations::new(w, h, pts).map_err(|e| e.to_string())?;
        let cfg = GaussianConfig {
            mode: if i % 4 == 0 { SigmaMode::Adaptive } else { SigmaMode::Fixed },
            sigma: rng.uniform(0.3, 6.0),
            ..Default::default()
        };
        let dm = generate_density(&ann, &cfg).map_err(|e| e.to_string())?;
        let dc = (dm.count() - ann.points.len() as f64).abs();
        worst_count = worst_count.max(dc);
        ensure(dc <= 1e-9, || format!("set {i}: count off by {dc:e}"))?;
        let oracle = oracle_density(&ann, &oracle_sigmas(&ann, &cfg), cfg.truncate);
        let d = max_abs_diff(dm.values(), &oracle);
        worst_pixel = worst_pixel.max(d);
        ensure(d <= 1e-12, || format!("set {i}: pixel diff {d:e}"))?;

        let stride = 1 + rng.below(4);
        let (cw, ch) = (w - w % stride, h - h % stride);
        if cw > 0 && ch > 0 {
            let cropped: Vec<f64> = (0..ch).flat_map(|y| dm.values()[y * w..y * w + cw].to_vec()).collect();
            let dm = DensityMap::new(ch, cw, cropped).map_err(|e| e.to_string())?;
            let pooled = align_to_output(&dm, stride).map_err(|e| e.to_string())?;
            ensure(pooled.count() == dm.count(), || {
                format!("set {i}: alignment changed count {} -> {}", dm.count(), pooled.count())
            })?;
        }
    }
    Ok(format!(
        "1000 sets; max |count - points| {worst_count:.1e}, max pixel diff {worst_pixel:.2e} <= 1e-12, alignment exact"
    ))
}

fn c07_ot_loss() -> Outcome {
    let mut rng = SplitMix64::new(0xC07);
    let cfg = SinkhornConfig { epsilon: 1e-3, ..Default::default() };
    let (mut worst_rel, mut worst_scale, mut worst_violation, mut most_iters) = (0.0f64, 0.0f64, 0.0f64, 0);
    let mut done = 0;
    while done < 50 {
        let (h, w) = (2 + rng.below(7), 2 + rng.below(7));
        let k = 1 + rng.below(8);
        let (p, q) = (atoms(&mut rng, h, w, k), atoms(&mut rng, h, w, k));
        let exact = exact_ot_oracle(&p, &q).map_err(|e| e.to_string())?;
        if exact == 0.0 {
            continue;
        }
        let r = ot_loss(&p, &q, &cfg).map_err(|e| e.to_string())?;
        ensure(r.converged, || format!("instance {done}: no convergence, violation {:e}", r.marginal_violation))?;
        worst_violation = worst_violation.max(r.marginal_violation);
        ensure(r.marginal_violation <= 1e-6, || format!("violation {:e}", r.marginal_violation))?;
        most_iters = most_iters.max(r.iterations);
        let rel = (r.value - exact).abs() / exact;
        worst_rel = worst_rel.max(rel);
        ensure(rel <= 0.02, || format!("instance {done}: {} vs exact {exact} ({rel:e})", r.value))?;

        let (a, b) = (rng.uniform(0.01, 100.0), rng.uniform(0.01, 100.0));
        let scaled = ot_loss(&p.scaled(a).unwrap(), &q.scaled(b).unwrap(), &cfg).map_err(|e| e.to_string())?;
        let d = (scaled.value - r.value).abs();
        worst_scale = worst_scale.max(d);
        ensure(d <= 1e-10, || format!("instance {done}: scale invariance off by {d:e}"))?;
        done += 1;
    }
    Ok(format!(
        "50 instances at eps 1e-3; max rel err {worst_rel:.2e} <= 2%, scale diff {worst_scale:.1e} <= 1e-10, \
         violation {worst_violation:.1e} <= 1e-6, max {most_iters} iterations"
    ))
}

fn c08_ot_gradient() -> Outcome {
    let mut rng = SplitMix64::new(0xC08);
    let cfg = SinkhornConfig { epsilon: 1e-2, tolerance: 1e-13, max_iters: 20_000, ..Default::default() };
    let step = 1e-5;
    let (mut worst_rel, mut worst_orth) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let p = positive_map(&mut rng, 6, 6);
        let q = positive_map(&mut rng, 6, 6);
        let g = ot_gradient(&p, &q, &cfg).map_err(|e| e.to_string())?;
        let dir: Vec<f64> = (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let shifted = |s: f64| {
            let v = p.values().iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            ot_loss(&DensityMap::new(6, 6, v).unwrap(), &q, &cfg).map(|r| r.value)
        };
        let fd = (shifted(step).map_err(|e| e.to_string())? - shifted(-step).map_err(|e| e.to_string())?) / (2.0 * step);
        let an: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let rel = (fd - an).abs() / an.abs().max(fd.abs());
        worst_rel = worst_rel.max(rel);
        ensure(rel <= 1e-4, || format!("pair {i}: finite difference {fd:e} vs analytic {an:e}"))?;

        let dot: f64 = g.data().iter().zip(p.values()).map(|(a, b)| a * b).sum();
        let gn = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let pn = p.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let orth = dot.abs() / (gn * pn);
        worst_orth = worst_orth.max(orth);
        ensure(orth <= 1e-9, || format!("pair {i}: <grad, pred> / (|grad||pred|) = {orth:e}"))?;
    }
    Ok(format!("20 pairs 6x6; max rel FD err {worst_rel:.2e} <= 1e-4, max |cos(grad, pred)| {worst_orth:.1e}"))
}

fn c09_metrics() -> Outcome {
    let m = eval_metrics(&[10.0, 20.0], &[12.0, 17.0]).map_err(|e| e.to_string())?;
    ensure(m.mae == 2.5 && m.n == 2, || format!("{m:?}"))?;
    ensure((m.mse - 6.5f64.sqrt()).abs() <= 1e-12 && format!("{:.4}", m.mse) == "2.5495", || format!("{m:?}"))?;
    let mut rng = SplitMix64::new(0xC09);
    for i in 0..1000 {
        let n = 1 + rng.below(50);
        let p: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1e3)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1e3)).collect();
        let m = eval_metrics(&p, &g).map_err(|e| e.to_string())?;
        ensure(m.mae <= m.mse, || format!("list {i}: mae {} > mse {}", m.mae, m.mse))?;
    }
    Ok(format!("([10,20],[12,17]) -> mae {}, mse {:.4}; mae <= mse on 1000 lists", m.mae, m.mse))
}

fn c10_serialization() -> Outcome {
    let mut rng = SplitMix64::new(0xC10);
    for i in 0..100 {
        let dims: Vec<usize> = (0..1 + rng.below(5)).map(|_| 1 + rng.below(4)).collect();
        let len: usize = dims.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.normal() * 1e3).collect();
        let bytes = encode_raw(&dims, &data).map_err(|e| e.to_string())?;
        let back = decode_tensor(&bytes).map_err(|e| e.to_string())?;
        let same = matches!(&back.data, TensorData::F64(v) if v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        ensure(back.dims == dims && same, || format!("f64 tensor {i} changed in round trip"))?;
        let t = Tensor4::<f32>::random_uniform([1, 1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5)], -9.0, 9.0, &mut rng);
        let enc = encode_tensor(&t).map_err(|e| e.to_string())?;
        let back = decode_tensor(&enc).and_then(|r| r.into_tensor4::<f32>()).map_err(|e| e.to_string())?;
        ensure(back == t, || format!("f32 tensor {i} changed in round trip"))?;
        ensure(encode_tensor(&back).unwrap() == enc, || format!("f32 tensor {i} re-encodes differently"))?;
    }

    let f32_model = build_model::<f32>(&ModelConfig::tiny(8)).map_err(|e| e.to_string())?;
    let mut merged = build_model::<f64>(&ModelConfig::tiny(8)).map_err(|e| e.to_string())?;
    merged.reparameterize().map_err(|e| e.to_string())?;
    merged.strip_branches().map_err(|e| e.to_string())?;
    let bundles = [encode_bundle(&f32_model).map_err(|e| e.to_string())?, encode_bundle(&merged).map_err(|e| e.to_string())?];
    for b in &bundles {
        let (_, model) = decode_bundle(b).map_err(|e| e.to_string())?;
        let again = match model {
            repsfnet::io::AnyModel::F32(m) => encode_bundle(&m),
            repsfnet::io::AnyModel::F64(m) => encode_bundle(&m),
        }
        .map_err(|e| e.to_string())?;
        ensure(&again == b, || "bundle re-encodes differently".into())?;
    }

    // Structural corruption of tensor files and any corruption of bundles.
    let tensor = encode_tensor(&Tensor4::<f64>::random_uniform([1, 2, 5, 7], -1.0, 1.0, &mut rng)).unwrap();
    let header_len = 8 + 8 * 4;
    let mut format_errors = 0;
    for case in 0..10_000 {
        let (mut bytes, is_bundle) = if case % 2 == 0 {
            (tensor.clone(), false)
        } else {
            (bundles[rng.below(2)].clone(), true)
        };
        match rng.below(3) {
            0 => {
                let limit = if is_bundle { bytes.len() } else { header_len };
                let i = rng.below(limit);
                bytes[i] ^= 1 << rng.below(8);
            }
            1 => bytes.truncate(rng.below(bytes.len())),
            _ => {
                let at = if is_bundle { rng.below(bytes.len() + 1) } else { bytes.len() };
                bytes.insert(at, rng.below(256) as u8);
            }
        }
        let result = catch_unwind(|| {
            if is_bundle {
                decode_bundle(&bytes).map(|_| ())
            } else {
                decode_tensor(&bytes).map(|_| ())
            }
        });
        match result {
            Ok(Err(Error::Format { .. })) => format_errors += 1,
            Ok(Err(e)) => return Err(format!("case {case}: non-format error {e}")),
            Ok(Ok(())) => return Err(format!("case {case}: corrupt file accepted")),
            Err(_) => return Err(format!("case {case}: decoder panicked")),
        }
    }
    ensure(format_errors == 10_000, || "fuzz count mismatch".into())?;
    Ok("tensor and bundle round trips bitwise; 10000 corrupt files -> 10000 format errors, 0 panics".into())
}

fn c11_reporting() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_repsfnet"))
        .args(["stats", "--size", "640x480"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    ensure(text.contains("62.59 G / 26.06 M"), || format!("reference values missing:\n{text}"))?;
    let gaps: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("gap"))
        .map(|l| l.split("gap").nth(1).unwrap().trim())
        .collect();
    ensure(gaps.len() == 2, || format!("gap lines missing:\n{text}"))?;
    Ok(format!(
        "stats 640x480 prints reference 62.59 G / 26.06 M; params gap {}, MACs gap {}",
        gaps[0], gaps[1]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("reparameterization equivalence", c01_reparam_equivalence),
        ("end-to-end merged network", c02_end_to_end_merged),
        ("convolution correctness", c03_conv_correctness),
        ("shape contract", c04_shape_contract),
        ("receptive-field anchors", c05_receptive_field),
        ("density ground truth", c06_density),
        ("OT loss", c07_ot_loss),
        ("OT gradient", c08_ot_gradient),
        ("metrics", c09_metrics),
        ("serialization", c10_serialization),
        ("reporting anchors", c11_reporting),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::fmt;
use std::path::Path;
use std::time::Instant;

use repsfnet::backbone::Mixer;
use repsfnet::density::{align_to_output, generate_density, GaussianConfig, SigmaMode};
use repsfnet::fusion::{build_model, model_forward, ModelConfig, RepSfNet};
use repsfnet::io::{
    config_to_json, export_pgm, load_annotations, load_bundle, load_config, load_density, load_tensor,
    save_bundle, save_density, save_tensor, AnyModel, PgmScale, RawTensor,
};
use repsfnet::loss::{eval_metrics, total_loss, CountLoss, LossWeights, SinkhornConfig};
use repsfnet::params::Parameters;
use repsfnet::reparam::{equivalence_check, EquivalenceReport};
use repsfnet::{DType, Error, Scalar, SplitMix64, Tensor4};
use serde_json::{json, Value};

use crate::{BenchArgs, EquivArgs, EvalArgs, ForwardArgs, GenDensityArgs, InitArgs, LossArgs, ReparamArgs, StatsArgs};

/// Parameter count reported for the reference model, in units.
pub const REFERENCE_PARAMS: f64 = 26.06e6;
/// Multiply-accumulates reported for the reference model.
pub const REFERENCE_MACS: f64 = 62.59e9;
/// Input sizes for `bench --table-sizes`, as (width, height).
pub const TABLE_SIZES: [(usize, usize); 3] = [(640, 480), (1280, 960), (1600, 1184)];

pub enum Failure {
    Lib(Error),
    /// Bad flag combination or value; exit 1.
    Usage(String),
    /// A check ran and failed; exit 3.
    Check(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Lib(e) => e.exit_code() as u8,
            Failure::Usage(_) => 1,
            Failure::Check(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn echo(resolved: Value) {
    eprintln!("resolved {resolved}");
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// `WIDTHxHEIGHT` to `(height, width)`.
pub fn parse_size(s: &str) -> Outcome<(usize, usize)> {
    let bad = || Failure::Usage(format!("size `{s}` is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub fn configure_threads() -> Outcome {
    match std::env::var("REPSF_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::Usage(format!("REPSF_THREADS=`{v}` is not a positive integer")))?;
            repsfnet::set_worker_threads(n)?;
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

fn load_model_config(path: Option<&Path>) -> Outcome<ModelConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => ModelConfig::default(),
    })
}

pub fn init(a: InitArgs) -> Outcome {
    let mut cfg = load_model_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.backbone.seed = seed;
    }
    echo(json!({
        "command": "init",
        "config": serde_json::from_str::<Value>(&config_to_json(&cfg)).expect("valid JSON"),
        "dtype": a.dtype,
        "out": path_str(&a.out),
    }));
    let params = match a.dtype {
        DType::F32 => write_new::<f32>(&cfg, &a.out)?,
        DType::F64 => write_new::<f64>(&cfg, &a.out)?,
    };
    println!("wrote {} ({params} parameters, branch form)", a.out.display());
    Ok(())
}

fn write_new<T: Scalar>(cfg: &ModelConfig, out: &Path) -> Outcome<usize> {
    let model = build_model::<T>(cfg)?;
    save_bundle(out, &model)?;
    Ok(model.param_count())
}

pub fn reparam(a: ReparamArgs) -> Outcome {
    echo(json!({"command": "reparam", "weights": path_str(&a.weights), "out": path_str(&a.out)}));
    let (manifest, model) = load_bundle(&a.weights)?;
    if manifest.merged {
        return Err(Error::State("bundle is already merged".into()).into());
    }
    let (before, after) = match model {
        AnyModel::F32(m) => merge_and_save(m, &a.out)?,
        AnyModel::F64(m) => merge_and_save(m, &a.out)?,
    };
    println!(
        "{}",
        json!({"out": path_str(&a.out), "params_before": before, "params_after": after, "merged": true})
    );
    Ok(())
}

fn merge_and_save<T: Scalar>(mut m: RepSfNet<T>, out: &Path) -> Outcome<(usize, usize)> {
    let before = m.param_count();
    m.reparameterize()?;
    m.strip_branches()?;
    save_bundle(out, &m)?;
    Ok((before, m.param_count()))
}

pub fn equiv(a: EquivArgs) -> Outcome {
    let (h, w) = parse_size(&a.size)?;
    let (_, model) = load_bundle(&a.weights)?;
    let reference = match &a.reference {
        Some(p) => Some(load_bundle(p)?.1),
        None => None,
    };
    let tol = a.tol.unwrap_or(match model.dtype() {
        DType::F32 => 1e-4,
        DType::F64 => 1e-10,
    });
    echo(json!({
        "command": "equiv",
        "weights": path_str(&a.weights),
        "reference": a.reference.as_deref().map(path_str),
        "trials": a.trials,
        "tol": tol,
        "seed": a.seed,
        "size": {"width": w, "height": h},
    }));
    let report = match model {
        AnyModel::F32(m) => equiv_model(m, reference.map(AnyModel::into_model), &a, tol, (h, w))?,
        AnyModel::F64(m) => equiv_model(m, reference.map(AnyModel::into_model), &a, tol, (h, w))?,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    if report["passed"] == Value::Bool(true) {
        Ok(())
    } else {
        Err(Failure::Check(format!("merged outputs differ from branch outputs beyond {tol}")))
    }
}

fn equiv_model<T: Scalar>(
    model: RepSfNet<T>,
    reference: Option<RepSfNet<T>>,
    a: &EquivArgs,
    tol: f64,
    (h, w): (usize, usize),
) -> Outcome<Value> {
    let (branch, merged) = if model.is_merged_only() {
        let r = reference
            .ok_or_else(|| Failure::Usage("a merged-only bundle needs --reference with the branch form".into()))?;
        if r.is_merged_only() {
            return Err(Failure::Usage("--reference must be a branch-form bundle".into()));
        }
        if r.config != model.config {
            return Err(Failure::Usage("--reference was built from a different config".into()));
        }
        (r, model)
    } else {
        if reference.is_some() {
            return Err(Failure::Usage("--reference only applies to merged-only bundles".into()));
        }
        let mut m = model.clone();
        m.reparameterize()?;
        m.strip_branches()?;
        (model, m)
    };

    let mut blocks = Vec::new();
    let mut all = true;
    let mut index = 0u64;
    for (s, (bs, ms)) in branch.backbone.stages.iter().zip(&merged.backbone.stages).enumerate() {
        for (i, (bb, mb)) in bs.blocks.iter().zip(&ms.blocks).enumerate() {
            let (Mixer::Branches(rep), Mixer::Merged(conv)) = (&bb.mixer, &mb.mixer) else {
                return Err(Failure::Usage("bundles disagree on block structure".into()));
            };
            let mut probe = rep.clone();
            probe.merged = Some(conv.clone());
            let r = equivalence_check(&probe, a.trials, tol, a.seed.wrapping_add(index))?;
            all &= r.passed;
            blocks.push(json!({"name": format!("stage{}.block{i}", s + 1), "report": r}));
            index += 1;
        }
    }

    let mut rng = SplitMix64::new(a.seed);
    let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
    for _ in 0..a.trials {
        let x = Tensor4::<T>::random_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let yb = model_forward(&x, &branch, false)?;
        let ym = model_forward(&x, &merged, true)?;
        max_abs = max_abs.max(yb.max_abs_diff(&ym)?);
        max_ref = yb.data().iter().fold(max_ref, |m, v| m.max(v.as_f64().abs()));
    }
    let end_to_end = EquivalenceReport::from_diffs(a.trials, max_abs, max_ref, tol);
    all &= end_to_end.passed;
    Ok(json!({
        "dtype": T::DTYPE,
        "tolerance": tol,
        "blocks": blocks,
        "end_to_end": end_to_end,
        "passed": all,
    }))
}

pub fn gen_density(a: GenDensityArgs) -> Outcome {
    let cfg = GaussianConfig {
        mode: if a.adaptive { SigmaMode::Adaptive } else { SigmaMode::Fixed },
        sigma: a.sigma,
        truncate: a.truncate,
        k_nn: a.k,
        beta: a.beta,
        renormalize: true,
    };
    echo(json!({
        "command": "gen-density",
        "ann": path_str(&a.ann),
        "gaussian": cfg,
        "out": path_str(&a.out),
        "pgm": a.pgm.as_deref().map(path_str),
        "pgm_cap": a.pgm_cap,
        "stride": a.stride,
    }));
    let ann = load_annotations(&a.ann)?.to_annotations()?;
    if a.adaptive && ann.points.len() < 2 {
        eprintln!(
            "warning: adaptive bandwidth needs at least two points, using fixed sigma {}",
            a.sigma
        );
    }
    let mut dm = generate_density(&ann, &cfg)?;
    if let Some(stride) = a.stride {
        dm = align_to_output(&dm, stride)?;
    }
    save_density(&a.out, &dm)?;
    if let Some(p) = &a.pgm {
        let scale = a.pgm_cap.map_or(PgmScale::Auto, PgmScale::Fixed);
        export_pgm(&dm, p, scale)?;
    }
    println!("count {:.6}", dm.count());
    println!("size {}x{}", dm.w(), dm.h());
    Ok(())
}

pub fn forward(a: ForwardArgs) -> Outcome {
    echo(json!({
        "command": "forward",
        "weights": path_str(&a.weights),
        "input": path_str(&a.input),
        "out": path_str(&a.out),
        "merged": a.merged,
    }));
    let (_, model) = load_bundle(&a.weights)?;
    let input = load_tensor(&a.input)?;
    let y = match model {
        AnyModel::F32(m) => run_forward(m, input, a.merged)?,
        AnyModel::F64(m) => run_forward(m, input, a.merged)?,
    };
    save_tensor(&a.out, &y)?;
    let plane = y.h() * y.w();
    let counts: Vec<f64> = y.data().chunks(plane).map(|c| c.iter().sum()).collect();
    println!("{}", json!({"shape": y.shape(), "counts": counts}));
    Ok(())
}

fn run_forward<T: Scalar>(mut model: RepSfNet<T>, input: RawTensor, merged: bool) -> Outcome<Tensor4<f64>> {
    let merged = merged || model.is_merged_only();
    if merged && !model.is_merged_only() {
        model.reparameterize()?;
    }
    let x = input.into_tensor4::<T>()?;
    Ok(model_forward(&x, &model, merged)?.cast())
}

pub fn loss(a: LossArgs) -> Outcome {
    let mode = match a.count_loss.as_str() {
        "l1" => CountLoss::L1,
        "l2" => CountLoss::L2,
        other => return Err(Failure::Usage(format!("--count-loss must be l1 or l2, got `{other}`"))),
    };
    let cfg = SinkhornConfig {
        epsilon: a.epsilon,
        max_iters: a.iters,
        tolerance: a.tol,
        log_domain: true,
    };
    let weights = LossWeights { count: a.count_weight, ot: a.ot_weight };
    echo(json!({
        "command": "loss",
        "pred": path_str(&a.pred),
        "gt": path_str(&a.gt),
        "sinkhorn": cfg,
        "count_loss": mode,
        "weights": weights,
    }));
    let pred = load_density(&a.pred)?;
    let gt = load_density(&a.gt)?;
    let report = total_loss(&pred, &gt, &cfg, weights, mode)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    if report.converged {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "Sinkhorn did not converge in {} iterations (marginal violation {:e})",
            report.iterations, report.marginal_violation
        )))
    }
}

fn read_counts(list: &Path) -> Outcome<Vec<f64>> {
    let text = std::fs::read_to_string(list).map_err(Error::from)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", list.display()),
    })?;
    let items = value.as_array().ok_or_else(|| Error::Format {
        offset: 0,
        message: format!("{}: expected a JSON array", list.display()),
    })?;
    let base = list.parent().unwrap_or(Path::new("."));
    items
        .iter()
        .map(|item| match item {
            Value::Number(n) => Ok(n.as_f64().expect("JSON numbers are finite")),
            Value::String(p) => {
                let t = load_tensor(base.join(p))?.into_tensor4::<f64>()?;
                Ok(t.sum())
            }
            other => Err(Error::Format {
                offset: 0,
                message: format!("{}: entries must be numbers or paths, got {other}", list.display()),
            }
            .into()),
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Outcome {
    echo(json!({"command": "eval", "pred_list": path_str(&a.pred_list), "gt_list": path_str(&a.gt_list)}));
    let pred = read_counts(&a.pred_list)?;
    let gt = read_counts(&a.gt_list)?;
    let report = eval_metrics(&pred, &gt)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

pub fn stats(a: StatsArgs) -> Outcome {
    let (h, w) = parse_size(&a.size)?;
    let cfg = load_model_config(a.config.as_deref())?;
    echo(json!({
        "command": "stats",
        "config": serde_json::from_str::<Value>(&config_to_json(&cfg)).expect("valid JSON"),
        "size": {"width": w, "height": h},
    }));
    let model = build_model::<f32>(&cfg)?;
    let pb = model.count_params(false)? as f64;
    let pm = model.count_params(true)? as f64;
    let mb = model.count_macs(h, w, false)? as f64;
    let mm = model.count_macs(h, w, true)? as f64;
    if a.json {
        let row = |branch: f64, merged: f64, reference: f64| {
            json!({"branch": branch, "merged": merged, "reference": reference, "gap": merged - reference})
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "size": {"width": w, "height": h},
                "params": row(pb, pm, REFERENCE_PARAMS),
                "macs": row(mb, mm, REFERENCE_MACS),
            }))
            .expect("serializable")
        );
        return Ok(());
    }
    println!("input              {w}x{h}");
    println!(
        "reference          {:.2} G / {:.2} M",
        REFERENCE_MACS / 1e9,
        REFERENCE_PARAMS / 1e6
    );
    println!("params  branch     {:>9.2} M", pb / 1e6);
    println!("params  merged     {:>9.2} M", pm / 1e6);
    println!(
        "params  reference  {:>9.2} M   gap {:+.2} M ({:.1}% of reference)",
        REFERENCE_PARAMS / 1e6,
        (pm - REFERENCE_PARAMS) / 1e6,
        100.0 * pm / REFERENCE_PARAMS
    );
    println!("MACs    branch     {:>9.2} G", mb / 1e9);
    println!("MACs    merged     {:>9.2} G", mm / 1e9);
    println!(
        "MACs    reference  {:>9.2} G   gap {:+.2} G ({:.1}% of reference)",
        REFERENCE_MACS / 1e9,
        (mm - REFERENCE_MACS) / 1e9,
        100.0 * mm / REFERENCE_MACS
    );
    Ok(())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench(a: BenchArgs) -> Outcome {
    let sizes = if a.table_sizes {
        TABLE_SIZES.iter().map(|&(w, h)| (h, w)).collect()
    } else {
        vec![parse_size(&a.size)?]
    };
    let modes: &[bool] = match a.mode.as_str() {
        "merged" => &[true],
        "branch" => &[false],
        "both" => &[false, true],
        other => return Err(Failure::Usage(format!("--mode must be merged, branch or both, got `{other}`"))),
    };
    if a.runs == 0 {
        return Err(Failure::Usage("--runs must be positive".into()));
    }
    echo(json!({
        "command": "bench",
        "weights": path_str(&a.weights),
        "sizes": sizes.iter().map(|&(h, w)| format!("{w}x{h}")).collect::<Vec<_>>(),
        "runs": a.runs,
        "warmup": a.warmup,
        "mode": a.mode,
    }));
    let (_, model) = load_bundle(&a.weights)?;
    match model {
        AnyModel::F32(m) => bench_model(m, &sizes, modes, &a),
        AnyModel::F64(m) => bench_model(m, &sizes, modes, &a),
    }
}

fn bench_model<T: Scalar>(mut model: RepSfNet<T>, sizes: &[(usize, usize)], modes: &[bool], a: &BenchArgs) -> Outcome {
    let has_branches = !model.is_merged_only();
    if has_branches {
        model.reparameterize()?;
    }
    let mut rng = SplitMix64::new(0);
    for &(h, w) in sizes {
        let x = Tensor4::<T>::random_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        for &merged in modes {
            if !merged && !has_branches {
                eprintln!("warning: bundle is merged-only, skipping branch mode");
                continue;
            }
            for _ in 0..a.warmup {
                model_forward(&x, &model, merged)?;
            }
            let mut times = Vec::with_capacity(a.runs);
            for _ in 0..a.runs {
                let t = Instant::now();
                model_forward(&x, &model, merged)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            println!(
                "{}",
                json!({
                    "size": format!("{w}x{h}"),
                    "mode": if merged { "merged" } else { "branch" },
                    "runs": a.runs,
                    "median_ms": percentile(&times, 50.0),
                    "p95_ms": percentile(&times, 95.0),
                })
            );
        }
    }
    Ok(())
}

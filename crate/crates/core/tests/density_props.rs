use proptest::prelude::*;
use repsfnet::density::{
    adaptive_sigmas, align_to_output, generate_density, DensityMap, GaussianConfig, PointAnnotations, SigmaMode,
};
use repsfnet::Error;

/// Per-point truncated Gaussian evaluated pixel by pixel and normalized by
/// its own in-image sum.
fn brute_force(ann: &PointAnnotations, sigmas: &[f64], truncate: f64) -> Vec<f64> {
    let (w, h) = (ann.width, ann.height);
    let mut out = vec![0.0; w * h];
    for (&(px, py), &s) in ann.points.iter().zip(sigmas) {
        let r = truncate * s;
        let mut contrib = vec![0.0; w * h];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                if dx.abs() <= r && dy.abs() <= r {
                    let v = (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                    contrib[y * w + x] = v;
                    total += v;
                }
            }
        }
        if total == 0.0 {
            out[py.floor() as usize * w + px.floor() as usize] += 1.0;
            continue;
        }
        for (o, c) in out.iter_mut().zip(&contrib) {
            *o += c / total;
        }
    }
    out
}

fn annotations() -> impl Strategy<Value = PointAnnotations> {
    (1usize..48, 1usize..40).prop_flat_map(|(w, h)| {
        prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..24)
            .prop_map(move |points| PointAnnotations::new(w, h, points).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn count_is_exact_and_matches_oracle(ann in annotations(), sigma in 0.3f64..6.0) {
        let cfg = GaussianConfig { sigma, ..Default::default() };
        let dm = generate_density(&ann, &cfg).unwrap();
        prop_assert_eq!(dm.count(), ann.points.len() as f64);
        prop_assert!(dm.values().iter().all(|&v| v >= 0.0));
        let oracle = brute_force(&ann, &vec![sigma; ann.points.len()], cfg.truncate);
        for (a, b) in dm.values().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn adaptive_matches_oracle(ann in annotations()) {
        let cfg = GaussianConfig { mode: SigmaMode::Adaptive, ..Default::default() };
        let dm = generate_density(&ann, &cfg).unwrap();
        prop_assert_eq!(dm.count(), ann.points.len() as f64);
        let sigmas = adaptive_sigmas(&ann, cfg.k_nn, cfg.beta, cfg.sigma);
        let oracle = brute_force(&ann, &sigmas, cfg.truncate);
        for (a, b) in dm.values().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn alignment_preserves_count(ann in annotations(), stride in 1usize..5) {
        let (w, h) = (ann.width - ann.width % stride, ann.height - ann.height % stride);
        prop_assume!(w > 0 && h > 0);
        let points = ann.points.iter().copied().filter(|&(x, y)| x < w as f64 && y < h as f64).collect();
        let ann = PointAnnotations::new(w, h, points).unwrap();
        let dm = generate_density(&ann, &GaussianConfig::default()).unwrap();
        let pooled = align_to_output(&dm, stride).unwrap();
        prop_assert_eq!((pooled.h(), pooled.w()), (h / stride, w / stride));
        prop_assert_eq!(pooled.count(), dm.count());
    }

    #[test]
    fn integer_translation_shifts_map(ann in annotations(), dx in 0usize..6, dy in 0usize..6) {
        // Dyadic coordinates keep the fractional parts exact under shifts.
        let snap = |v: f64| (v * 1024.0).floor() / 1024.0;
        let big = PointAnnotations::new(
            ann.width + 40,
            ann.height + 40,
            ann.points.iter().map(|&(x, y)| (snap(x) + 20.0, snap(y) + 20.0)).collect(),
        )
        .unwrap();
        let moved = PointAnnotations::new(
            big.width,
            big.height,
            big.points.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect(),
        )
        .unwrap();
        let cfg = GaussianConfig { sigma: 1.5, truncate: 3.0, ..Default::default() };
        let a = generate_density(&big, &cfg).unwrap();
        let b = generate_density(&moved, &cfg).unwrap();
        for y in 0..big.height - dy {
            for x in 0..big.width - dx {
                prop_assert_eq!(a.at(y, x), b.at(y + dy, x + dx));
            }
        }
    }
}

#[test]
fn unnormalized_gaussian_integrates_near_one() {
    let ann = PointAnnotations::new(64, 64, vec![(32.3, 31.7)]).unwrap();
    let cfg = GaussianConfig { renormalize: false, sigma: 3.0, ..Default::default() };
    let dm = generate_density(&ann, &cfg).unwrap();
    assert!((dm.count() - 1.0).abs() < 1e-3);
}

#[test]
fn coincident_points_use_fallback_sigma() {
    let ann = PointAnnotations::new(10, 10, vec![(5.0, 5.0), (5.0, 5.0)]).unwrap();
    assert_eq!(adaptive_sigmas(&ann, 1, 0.3, 4.0), vec![4.0, 4.0]);
    let single = PointAnnotations::new(10, 10, vec![(5.0, 5.0)]).unwrap();
    assert_eq!(adaptive_sigmas(&single, 3, 0.3, 2.5), vec![2.5]);
}

#[test]
fn alignment_geometry_errors() {
    let dm = DensityMap::zeros(15, 20);
    assert!(matches!(align_to_output(&dm, 4), Err(Error::Geometry(_))));
    assert!(matches!(align_to_output(&dm, 0), Err(Error::Geometry(_))));
    assert_eq!(align_to_output(&dm, 5).unwrap().h(), 3);
}

use proptest::prelude::*;
use repsfnet::density::DensityMap;
use repsfnet::fusion::{build_model, ModelConfig, RepSfNet};
use repsfnet::io::{
    decode_bundle, decode_tensor, encode_bundle, encode_pgm, encode_raw, encode_tensor, load_annotations,
    load_density, save_density, AnnotationDoc, PgmScale, TensorData,
};
use repsfnet::{Error, SplitMix64, Tensor4};

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<f32>().prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f64_round_trip_any_rank(dims in prop::collection::vec(1usize..4, 1..6), seed in any::<u64>(), fill in finite_f64()) {
        let count: usize = dims.iter().product();
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f64> = (0..count).map(|i| if i == 0 { fill } else { f64::from_bits(rng.next_u64() >> 2) }).collect();
        let bytes = encode_raw(&dims, &data).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(&back.dims, &dims);
        match back.data {
            TensorData::F64(v) => prop_assert!(v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits())),
            TensorData::F32(_) => prop_assert!(false, "dtype changed"),
        }
    }

    #[test]
    fn f32_tensor4_round_trip(shape in (1usize..3, 1usize..4, 1usize..6, 1usize..6), v in finite_f32()) {
        let shape = [shape.0, shape.1, shape.2, shape.3];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| v / (i + 1) as f32).collect();
        let t = Tensor4::from_vec(shape, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap().into_tensor4::<f32>().unwrap();
        prop_assert_eq!(back.shape(), shape);
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mutated_tensor_never_panics(seed in any::<u64>(), flips in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let t = Tensor4::<f32>::random_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut bytes = encode_tensor(&t).unwrap();
        for _ in 0..flips {
            let i = rng.below(bytes.len());
            bytes[i] ^= 1 << rng.below(8);
        }
        if rng.below(3) == 0 {
            bytes.truncate(rng.below(bytes.len()));
        }
        match decode_tensor(&bytes) {
            Ok(raw) => {
                // Only payload bits can change without a structural error.
                prop_assert_eq!(raw.dims, vec![1, 2, 3, 3]);
                prop_assert_eq!(bytes.len(), encode_tensor(&t).unwrap().len());
            }
            Err(Error::Format { offset, .. }) => prop_assert!(offset <= bytes.len()),
            Err(other) => prop_assert!(false, "unexpected error {:?}", other),
        }
    }
}

fn tiny() -> RepSfNet<f32> {
    build_model(&ModelConfig::tiny(8)).unwrap()
}

#[test]
fn every_bundle_mutation_is_a_format_error() {
    let bytes = encode_bundle(&tiny()).unwrap();
    let mut rng = SplitMix64::new(99);
    for trial in 0..300 {
        let mut b = bytes.clone();
        match trial % 3 {
            0 => {
                let i = rng.below(b.len());
                b[i] ^= 1 << rng.below(8);
            }
            1 => b.truncate(rng.below(b.len())),
            _ => {
                let i = rng.below(b.len());
                b.insert(i, rng.below(256) as u8);
            }
        }
        match decode_bundle(&b) {
            Err(Error::Format { .. }) => {}
            other => panic!("trial {trial}: expected format error, got {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn bundle_forward_matches_original() {
    let m = tiny();
    let (_, back) = decode_bundle(&encode_bundle(&m).unwrap()).unwrap();
    let back = back.into_model::<f32>();
    let mut rng = SplitMix64::new(2);
    let x = Tensor4::<f32>::random_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let a = repsfnet::fusion::model_forward(&x, &m, false).unwrap();
    let b = repsfnet::fusion::model_forward(&x, &back, false).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dm = DensityMap::new(2, 3, vec![0.0, 0.25, 0.5, 1.0, 0.125, 3.0]).unwrap();
    let path = dir.path().join("gt.rsft");
    save_density(&path, &dm).unwrap();
    assert_eq!(load_density(&path).unwrap(), dm);

    let ann = dir.path().join("a.json");
    let doc = AnnotationDoc { image: "x.jpg".into(), width: 640, height: 480, points: vec![[640.0, 100.0]] };
    std::fs::write(&ann, serde_json::to_string(&doc).unwrap()).unwrap();
    assert!(matches!(load_annotations(&ann), Err(Error::Validation(_))));
    assert!(matches!(load_annotations(dir.path().join("missing.json")), Err(Error::Io(_))));
}

#[test]
fn pgm_header_for_output_grid() {
    let bytes = encode_pgm(&DensityMap::zeros(15, 20), PgmScale::Auto).unwrap();
    assert!(bytes.starts_with(b"P5 20 15 65535\n"));
    assert_eq!(bytes.len(), 15 + 600);
}

mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use slca_core::data::{
    decode_svol, encode_svol, generate_phantom, normalize, normalize_tensor, read_image, read_labels, read_svol,
    split, write_svol, PhantomSpec, SvolData, SvolError,
};
use slca_core::metrics::region_masks;
use slca_core::{Error, LabelVolume, MultiModalVolume, Tensor32, Tensor64};

fn small_image() -> MultiModalVolume {
    let data = vec![1.0, -0.0, f32::MIN_POSITIVE / 4.0, 3.5e-20, -7.25, f32::MAX, 0.1, 42.0];
    MultiModalVolume::new(Tensor32::new(vec![2, 2, 2], data).unwrap(), vec![0.5, 1.25]).unwrap()
}

fn small_labels() -> LabelVolume {
    LabelVolume::new(vec![1, 2, 3], vec![0, 1, 2, 3, 2, 1], vec![1.0, 2.0, 3.0]).unwrap()
}

// ---------------------------------------------------------------- SVOL

#[test]
fn golden_bytes_label_file() {
    #[rustfmt::skip]
    let golden: Vec<u8> = vec![
        b'S', b'V', b'O', b'L', b'1', 0,
        1, 0, 0, 0,            // dtype u8 labels
        1, 0, 0, 0,            // channels
        3, 0, 0, 0,            // rank
        1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0,
        0x00, 0x00, 0x80, 0x3f, // 1.0f32
        0x00, 0x00, 0x00, 0x40, // 2.0f32
        0x00, 0x00, 0x40, 0x40, // 3.0f32
        0, 1, 2, 3, 2, 1,
    ];
    let labels = small_labels();
    assert_eq!(encode_svol(&labels.clone().into()), golden);
    assert_eq!(decode_svol(&golden).unwrap(), SvolData::Labels(labels));
}

#[test]
fn golden_bytes_image_file() {
    let v = MultiModalVolume::new(Tensor32::new(vec![1, 1, 2], vec![1.0, -2.0]).unwrap(), vec![1.0, 0.5]).unwrap();
    #[rustfmt::skip]
    let golden: Vec<u8> = vec![
        b'S', b'V', b'O', b'L', b'1', 0,
        0, 0, 0, 0,
        1, 0, 0, 0,
        2, 0, 0, 0,
        1, 0, 0, 0, 2, 0, 0, 0,
        0x00, 0x00, 0x80, 0x3f,
        0x00, 0x00, 0x00, 0x3f,
        0x00, 0x00, 0x80, 0x3f,
        0x00, 0x00, 0x00, 0xc0,
    ];
    assert_eq!(encode_svol(&v.clone().into()), golden);
    assert_eq!(decode_svol(&golden).unwrap(), SvolData::Image(v));
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.img.svol");
    let lbl = dir.path().join("a.lbl.svol");
    let v = small_image();
    write_svol(&img, &v.clone().into()).unwrap();
    write_svol(&lbl, &small_labels().into()).unwrap();
    let back = read_image(&img).unwrap();
    let bits = |t: &Tensor32| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.image()), bits(v.image()));
    assert_eq!(back.spacing(), v.spacing());
    assert_eq!(read_labels(&lbl).unwrap(), small_labels());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2, "no temporary files left behind");
}

#[test]
fn phantom_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (v, l) = generate_phantom(&PhantomSpec { extent: 16, seed: 3, ..PhantomSpec::default() }).unwrap();
    let p = dir.path().join("p.svol");
    write_svol(&p, &v.clone().into()).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(encode_svol(&read_svol(&p).unwrap()), bytes);
    write_svol(&p, &l.clone().into()).unwrap();
    assert_eq!(read_labels(&p).unwrap(), l);
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = encode_svol(&small_labels().into());
    bytes[0] = b'X';
    assert!(matches!(decode_svol(&bytes), Err(SvolError::BadMagic)));
    assert!(matches!(decode_svol(b"SVO"), Err(SvolError::BadMagic)));
}

#[test]
fn truncated_payload_is_rejected() {
    let bytes = encode_svol(&small_image().into());
    for cut in [1, 4, 20] {
        let short = &bytes[..bytes.len() - cut];
        assert!(matches!(decode_svol(short), Err(SvolError::Truncated { .. })), "cut {cut}");
    }
    // inside the header
    assert!(matches!(decode_svol(&bytes[..12]), Err(SvolError::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_svol(&long), Err(SvolError::Truncated { .. })));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.svol");
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_svol(&p), Err(SvolError::Truncated { .. })));
}

#[test]
fn dtype_mismatch_and_unknown_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.svol");
    write_svol(&p, &small_image().into()).unwrap();
    assert!(matches!(read_labels(&p), Err(SvolError::DtypeMismatch { .. })));
    write_svol(&p, &small_labels().into()).unwrap();
    assert!(matches!(read_image(&p), Err(SvolError::DtypeMismatch { .. })));
    let mut bytes = encode_svol(&small_labels().into());
    bytes[6] = 9;
    assert!(matches!(decode_svol(&bytes), Err(SvolError::UnknownDtype(9))));
}

#[test]
fn out_of_range_labels_in_file_are_rejected() {
    let mut bytes = encode_svol(&small_labels().into());
    let n = bytes.len();
    bytes[n - 1] = 4;
    assert!(matches!(decode_svol(&bytes), Err(SvolError::Malformed(_))));
}

#[test]
fn failed_write_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("missing").join("x.svol");
    assert!(matches!(write_svol(&p, &small_labels().into()), Err(SvolError::Io { .. })));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

// ---------------------------------------------------------------- phantoms

#[test]
fn phantom_is_deterministic() {
    let spec = PhantomSpec { seed: 11, ..PhantomSpec::default() };
    let a = generate_phantom(&spec).unwrap();
    let b = generate_phantom(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn no_tumors_means_no_labels() {
    let (v, l) = generate_phantom(&PhantomSpec { tumor_count: 0, ..PhantomSpec::default() }).unwrap();
    assert!(l.labels().iter().all(|&x| x == 0));
    assert!(v.image().data().iter().any(|&x| x != 0.0));
}

#[test]
fn phantom_labels_nest_and_cover_all_classes() {
    for seed in 0..20 {
        let spec = PhantomSpec { seed, tumor_count: 1 + (seed as usize % 3), ..PhantomSpec::default() };
        let (_, l) = generate_phantom(&spec).unwrap();
        let m = region_masks(l.labels()).unwrap();
        for i in 0..l.len() {
            assert!(!m.et[i] || m.tc[i], "seed {seed} voxel {i}");
            assert!(!m.tc[i] || m.wt[i], "seed {seed} voxel {i}");
        }
        for class in 1..=3u8 {
            assert!(l.labels().contains(&class), "seed {seed} lacks class {class}");
        }
    }
}

#[test]
fn phantom_intensities_follow_the_table() {
    let spec = PhantomSpec { seed: 5, ..PhantomSpec::default() };
    let (v, l) = generate_phantom(&spec).unwrap();
    let n = l.len();
    let mean_of = |channel: usize, label: u8, healthy: bool| {
        let mut s = 0.0f64;
        let mut c = 0;
        for i in 0..n {
            let x = v.image().data()[channel * n + i];
            let matches = l.labels()[i] == label && (!healthy || x != 0.0);
            if matches && (label != 0 || healthy) {
                s += x as f64;
                c += 1;
            }
        }
        s / c as f64
    };
    let t = &spec.intensities;
    for (c, &want) in t.edema.iter().enumerate() {
        assert!((mean_of(c, 2, false) - want as f64).abs() < 0.02);
    }
    for (c, &want) in t.enhancing.iter().enumerate() {
        assert!((mean_of(c, 3, false) - want as f64).abs() < 0.03);
    }
    for (c, &want) in t.healthy.iter().enumerate() {
        assert!((mean_of(c, 0, true) - want as f64).abs() < 0.02);
    }
    // edema is brightest in FLAIR, enhancing in T1ce
    assert!(mean_of(0, 2, false) > mean_of(0, 0, true) + 0.2);
    assert!(mean_of(2, 3, false) > mean_of(2, 2, false) + 0.2);
}

#[test]
fn background_is_noise_free() {
    let (v, l) = generate_phantom(&PhantomSpec::default()).unwrap();
    let n = l.len();
    let corner = 0; // outside the brain ellipsoid
    for c in 0..4 {
        assert_eq!(v.image().data()[c * n + corner], 0.0);
    }
}

#[test]
fn oversized_tumors_exhaust_retries() {
    let spec = PhantomSpec { extent: 8, radius_range: [6.0, 7.0], max_retries: 5, ..PhantomSpec::default() };
    let err = generate_phantom(&spec).unwrap_err();
    assert!(err.to_string().contains("5 placements"), "{err}");
}

#[test]
fn two_dimensional_phantoms() {
    let spec = PhantomSpec { spatial_rank: 2, extent: 48, ..PhantomSpec::default() };
    let (v, l) = generate_phantom(&spec).unwrap();
    assert_eq!(v.image().shape(), &[4, 48, 48]);
    assert_eq!(l.shape(), &[48, 48]);
    assert!(l.labels().iter().any(|&x| x == 3));
}

#[test]
fn invalid_phantom_specs() {
    let bad = [
        PhantomSpec { core_fraction: 0.8, ..PhantomSpec::default() },
        PhantomSpec { radius_range: [3.0, 2.0], ..PhantomSpec::default() },
        PhantomSpec { extent: 2, ..PhantomSpec::default() },
        PhantomSpec { noise_sigma: -1.0, ..PhantomSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
    }
}

// ---------------------------------------------------------------- normalize

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn constant_channel_becomes_zero() {
    let mut x = Tensor64::full(&[2, 3, 3], 0.7);
    x.data_mut()[9] = 0.0;
    let y = normalize_tensor(&x);
    assert!(y.data().iter().all(|&v| v == 0.0));
    let z = normalize_tensor(&Tensor64::zeros(&[1, 2, 2]));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalized_moments_over_support() {
    let (v, _) = generate_phantom(&PhantomSpec { extent: 16, ..PhantomSpec::default() }).unwrap();
    let x: Tensor64 = v.to_tensor();
    let y = normalize_tensor(&x);
    for c in 0..4 {
        let support: Vec<f64> = x
            .channel(c)
            .iter()
            .zip(y.channel(c))
            .filter(|(s, _)| **s != 0.0)
            .map(|(_, &o)| o)
            .collect();
        let (mean, std) = moments(&support);
        assert!(mean.abs() < 1e-9, "channel {c}: mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "channel {c}: std {std}");
        assert!(x.channel(c).iter().zip(y.channel(c)).all(|(s, o)| *s != 0.0 || *o == 0.0));
    }
}

#[test]
fn normalize_is_idempotent() {
    let mut g = rng(9);
    for _ in 0..10 {
        let mut x = random_tensor(&mut g, &[3, 5, 4, 3]);
        for v in x.data_mut().iter_mut().step_by(7) {
            *v = 0.0;
        }
        let once = normalize_tensor(&x);
        let twice = normalize_tensor(&once);
        assert!(once.max_abs_diff(&twice).unwrap() < 1e-6);
    }
    let (v, _) = generate_phantom(&PhantomSpec { extent: 8, radius_range: [2.0, 3.0], ..PhantomSpec::default() }).unwrap();
    let a = normalize(&v);
    let b = normalize(&a);
    assert!(a.image().max_abs_diff(b.image()).unwrap() < 1e-6);
}

// ---------------------------------------------------------------- split

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:04}")).collect()
}

#[test]
fn split_of_285_cases() {
    let s = split(&ids(285), [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (171, 57, 57));
}

#[test]
fn everything_to_train() {
    let s = split(&ids(10), [1.0, 0.0, 0.0], 4).unwrap();
    assert_eq!(s.train.len(), 10);
    assert!(s.val.is_empty() && s.test.is_empty());
}

#[test]
fn remainder_goes_to_train() {
    let s = split(&ids(11), [0.5, 0.25, 0.25], 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 2));
}

#[test]
fn split_is_a_partition_for_many_seeds() {
    let all = ids(97);
    let set: BTreeSet<_> = all.iter().cloned().collect();
    for seed in 0..50 {
        let s = split(&all, [0.6, 0.2, 0.2], seed).unwrap();
        let parts = [&s.train, &s.val, &s.test];
        let union: BTreeSet<_> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
        assert_eq!(union, set);
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), all.len());
    }
}

#[test]
fn split_depends_only_on_the_id_set() {
    let all = ids(40);
    let mut shuffled = all.clone();
    shuffled.shuffle(&mut rng(3));
    assert_eq!(split(&all, [0.6, 0.2, 0.2], 8).unwrap(), split(&shuffled, [0.6, 0.2, 0.2], 8).unwrap());
    assert_ne!(split(&all, [0.6, 0.2, 0.2], 8).unwrap(), split(&all, [0.6, 0.2, 0.2], 9).unwrap());
}

#[test]
fn split_errors() {
    assert!(split::<String>(&[], [0.6, 0.2, 0.2], 0).is_err());
    assert!(split(&ids(5), [0.6, 0.2, 0.1], 0).is_err());
    assert!(split(&ids(5), [1.2, -0.1, -0.1], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_round_trip(dims in proptest::collection::vec(1usize..6, 2..=3), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let labels: Vec<u8> = (0..n).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
        let l = LabelVolume::new(dims.clone(), labels, vec![1.5; dims.len()]).unwrap();
        let back = decode_svol(&encode_svol(&l.clone().into())).unwrap();
        prop_assert_eq!(back, SvolData::Labels(l));
    }

    #[test]
    fn images_round_trip(dims in proptest::collection::vec(1usize..5, 2..=3), c in 1usize..5, seed in any::<u64>()) {
        let mut shape = vec![c];
        shape.extend(&dims);
        let x: Tensor32 = random_tensor(&mut rng(seed), &shape).map(|v| v * 1e3).cast();
        let v = MultiModalVolume::new(x, vec![0.7; dims.len()]).unwrap();
        let bytes = encode_svol(&v.clone().into());
        let back = decode_svol(&bytes).unwrap();
        prop_assert_eq!(encode_svol(&back), bytes);
        prop_assert_eq!(back, SvolData::Image(v));
    }
}

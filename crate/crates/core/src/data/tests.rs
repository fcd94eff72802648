use super::*;
use proptest::prelude::*;

fn ramp(dhw: [usize; 3]) -> Volume {
    let n = dhw.iter().product::<usize>();
    Volume::new(dhw, [1.0, 0.8, 0.8], (0..n).map(|i| i as f32 * 0.5 - 40.0).collect()).unwrap()
}

#[test]
fn phantom_is_deterministic_and_in_range() {
    let a = make_phantom(3, [8, 32, 32], 10).unwrap();
    let b = make_phantom(3, [8, 32, 32], 10).unwrap();
    let c = make_phantom(4, [8, 32, 32], 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.data.iter().all(|&v| (HU_MIN..=HU_MAX).contains(&v)));
    assert_eq!(a.at(0, 0, 0), AIR_HU);
    assert_eq!(a.at(7, 31, 31), AIR_HU);
    assert!(a.data.iter().filter(|&&v| v == AIR_HU).count() > 100);
    assert!(a.data.iter().filter(|&&v| v != AIR_HU).count() > 1000);
}

#[test]
fn degrade_group_means_are_exact_without_noise() {
    let v = ramp([6, 3, 4]);
    let cfg = DegradeConfig { depth_factor: 3, noise_sigma_hu: 0.0, seed: 1 };
    let out = degrade(&v, &cfg).unwrap();
    assert_eq!(out.dhw, [2, 3, 4]);
    assert_eq!(out.spacing, [3.0, 0.8, 0.8]);
    for z in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                let m = (0..3).map(|k| v.at(z * 3 + k, y, x) as f64).sum::<f64>() / 3.0;
                assert_eq!(out.at(z, y, x), m as f32);
            }
        }
    }
    let bad = DegradeConfig { depth_factor: 4, ..cfg.clone() };
    assert!(matches!(degrade(&v, &bad), Err(Error::Contract(_))));
    let one = DegradeConfig { depth_factor: 1, ..cfg };
    assert!(matches!(degrade(&v, &one), Err(Error::Contract(_))));
}

#[test]
fn degrade_noise_has_requested_sigma() {
    let v = Volume::filled([16, 128, 128], [1.0, 0.8, 0.8], AIR_HU);
    let cfg = DegradeConfig { depth_factor: 2, noise_sigma_hu: 20.0, seed: 11 };
    let out = degrade(&v, &cfg).unwrap();
    let n = out.data.len() as f64;
    assert!(n >= 1e5);
    let mean = out.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = out.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var.sqrt() - 20.0).abs() < 0.5, "std {}", var.sqrt());
    assert!((mean - AIR_HU as f64).abs() < 0.5);
    assert_eq!(out, degrade(&v, &cfg).unwrap());
}

#[test]
fn normalization_window() {
    assert_eq!(normalize_hu(-1000.0), 0.0);
    assert_eq!(normalize_hu(2000.0), 1.0);
    assert_eq!(normalize_hu(500.0), 0.5);
    assert_eq!(normalize_hu(-3000.0), 0.0);
    assert_eq!(normalize_hu(3071.0), 1.0);
    assert_eq!(normalize(&ramp([1, 2, 2])).shape(), &[1, 1, 1, 2, 2]);
}

proptest! {
    #[test]
    fn normalize_roundtrip_is_clamp(x in -1500.0f64..3500.0, y in -1500.0f64..3500.0) {
        let back = denormalize_hu(normalize_hu(x));
        prop_assert!((back - x.clamp(-1000.0, 2000.0)).abs() < 1e-5);
        if x <= y {
            prop_assert!(normalize_hu(x) <= normalize_hu(y));
        }
    }
}

#[test]
fn window_rule_clamps_final_window() {
    assert_eq!(window_starts(128, 64, 64).unwrap(), vec![0, 64]);
    assert_eq!(window_starts(100, 64, 64).unwrap(), vec![0, 36]);
    assert_eq!(window_starts(16, 16, 16).unwrap(), vec![0]);
    assert_eq!(window_starts(10, 4, 3).unwrap(), vec![0, 3, 6]);
    assert_eq!(window_starts(11, 4, 3).unwrap(), vec![0, 3, 6, 7]);
    assert!(window_starts(8, 16, 4).is_err());
}

#[test]
fn patches_align_and_are_seeded() {
    let ldr = ramp([16, 128, 128]);
    let ndr = ramp([32, 128, 128]);
    let p = extract_patches(&ldr, &ndr, [16, 64, 64], [16, 64, 64], 5).unwrap();
    assert_eq!(p.len(), 4);
    for pp in &p {
        assert_eq!(pp.input.dhw, [16, 64, 64]);
        assert_eq!(pp.target.dhw, [32, 64, 64]);
        let [z, y, x] = pp.origin;
        assert_eq!(pp.input.at(3, 5, 7), ldr.at(z + 3, y + 5, x + 7));
        assert_eq!(pp.target.at(6, 5, 7), ndr.at(2 * z + 6, y + 5, x + 7));
    }
    assert_eq!(p, extract_patches(&ldr, &ndr, [16, 64, 64], [16, 64, 64], 5).unwrap());
    let small = ramp([4, 12, 12]);
    let big = ramp([8, 12, 12]);
    let origins = |seed| -> Vec<[usize; 3]> {
        extract_patches(&small, &big, [2, 4, 4], [2, 4, 4], seed).unwrap().iter().map(|p| p.origin).collect()
    };
    assert_eq!(origins(1).len(), 18);
    assert_ne!(origins(1), origins(2));
    assert!(extract_patches(&small, &ramp([9, 12, 12]), [2, 4, 4], [2, 4, 4], 1).is_err());
}

#[test]
fn augmentation_group() {
    let v = ramp([3, 4, 5]);
    assert_eq!(Aug::Rot90.apply(&v).dhw, [3, 5, 4]);
    let mut w = v.clone();
    for _ in 0..4 {
        w = Aug::Rot90.apply(&w);
    }
    assert_eq!(w, v);
    assert_eq!(Aug::FlipH.apply(&Aug::FlipH.apply(&v)), v);
    for a in Aug::ALL {
        let out = a.apply(&v);
        assert_eq!(out.dhw[0], 3);
        assert_eq!(a.inverse().apply(&out), v, "{a:?}");
        let (mut s, mut o) = (out.data.clone(), v.data.clone());
        s.sort_by(f32::total_cmp);
        o.sort_by(f32::total_cmp);
        assert_eq!(s, o);
    }
    let sq = ramp([2, 4, 4]);
    let rots: Vec<Aug> = Aug::ALL.into_iter().filter(|a| a.quarter_turns().is_some()).collect();
    for &a in &rots {
        for &b in &rots {
            let turns = (a.quarter_turns().unwrap() + b.quarter_turns().unwrap()) % 4;
            let c = rots.iter().find(|r| r.quarter_turns() == Some(turns)).unwrap();
            assert_eq!(b.apply(&a.apply(&sq)), c.apply(&sq));
        }
    }
    assert_eq!(Aug::Rot180.apply(&sq).at(1, 0, 0), sq.at(1, 3, 3));
    assert_eq!(Aug::Rot90.apply(&sq).at(0, 0, 0), sq.at(0, 0, 3));
    let pair = PatchPair { input: ramp([2, 4, 4]), target: ramp([4, 4, 4]), origin: [0; 3] };
    let (out, aug) = augment(&pair, 9);
    assert_eq!(out.input, aug.apply(&pair.input));
    assert_eq!(out.target, aug.apply(&pair.target));
    assert_eq!(augment(&pair, 9).1, aug);
}

#[test]
fn volume_file_roundtrip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.litvol");
    let v = Volume::new([2, 2, 2], [1.5, 0.7, 0.7], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0, 7.0, 8.0])
        .unwrap();
    write_volume(&path, &v).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 68);
    let back = read_volume(&path).unwrap();
    assert_eq!(back.dhw, v.dhw);
    assert_eq!(back.spacing, v.spacing);
    assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));

    let good = encode_volume(&v);
    let offset = |b: &[u8]| match decode_volume(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(offset(&bad), 0);
    let mut bad = good.clone();
    bad[20] = 1;
    assert_eq!(offset(&bad), 20);
    assert_eq!(offset(&good[..60]), 60);
    assert_eq!(offset(&good[..14]), 12);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(offset(&long), 68);
    let mut zero = good;
    zero[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset(&zero), 12);
}

#[test]
fn simulate_writes_identical_datasets() {
    let cfg = SimulateConfig {
        volumes: 2,
        phantom: PhantomConfig { dhw: [4, 16, 16], structures: 4 },
        degrade: DegradeConfig::default(),
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = simulate_dataset(a.path(), &cfg, 7).unwrap();
    assert_eq!(ma, simulate_dataset(b.path(), &cfg, 7).unwrap());
    assert_eq!(Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap(), ma);
    for e in &ma.pairs {
        for f in [&e.ldr, &e.ndr] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
    let pairs = ma.load_pairs(a.path()).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].1.dhw, [2, 16, 16]);
    assert_eq!(pairs[0].2.dhw, [4, 16, 16]);
    assert!(ma.noise_model.contains("simplified"));
}

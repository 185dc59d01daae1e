use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;
use tsa_core::episodes::*;
use tsa_core::rng::rng_for;
use tsa_tensor::Tensor;

fn small_spec(name: &str, transform: DomainTransform) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        splits: SplitSizes { train: 4, val: 2, test: 24 },
        images_per_class: 22,
        resolution: 8,
        ..SyntheticDomainSpec::new(name, 77, transform, false)
    }
}

fn small_dataset() -> Dataset {
    render_domain(&small_spec("d", DomainTransform::Identity), 0, 3).unwrap()
}

fn image_key(t: &Tensor, i: usize) -> Vec<u64> {
    let len: usize = t.shape()[1..].iter().product();
    t.data()[i * len..(i + 1) * len].iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn protocol_shape_laws(seed in any::<u64>(), p in 0usize..3) {
        let ds = small_dataset();
        let protocol = [Protocol::Varying, Protocol::VaryingWayFiveShot, Protocol::FiveWayOneShot][p];
        let ep = sample_episode(&ds, Split::Test, protocol, &mut rng_for(seed, &[]), 0).unwrap();
        prop_assert_eq!(ep.shots.len(), ep.way);
        prop_assert_eq!(ep.support_len(), ep.shots.iter().sum::<usize>());
        prop_assert_eq!(ep.query_len(), ep.way * QUERY_PER_CLASS);
        match protocol {
            Protocol::Varying => {
                prop_assert!((5..=20).contains(&ep.way));
                prop_assert!(ep.shots.iter().all(|s| (1..=10).contains(s)));
            }
            Protocol::VaryingWayFiveShot => {
                prop_assert!((5..=20).contains(&ep.way));
                prop_assert!(ep.shots.iter().all(|&s| s == 5));
            }
            Protocol::FiveWayOneShot => {
                prop_assert_eq!(ep.way, 5);
                prop_assert_eq!(ep.support_len(), 5);
            }
        }
        // labels remapped to 0..way, query balanced, same class mapping
        let mut per_class = vec![0usize; ep.way];
        for &l in &ep.query_labels {
            per_class[l] += 1;
        }
        prop_assert!(per_class.iter().all(|&c| c == QUERY_PER_CLASS));
        for (i, &id) in ep.support_ids.iter().enumerate() {
            prop_assert_eq!(ep.classes[ep.support_labels[i]], ds.label(id));
        }
        for (i, &id) in ep.query_ids.iter().enumerate() {
            prop_assert_eq!(ep.classes[ep.query_labels[i]], ds.label(id));
            prop_assert_eq!(ds.split_of(ds.label(id)), Split::Test);
        }
    }

    #[test]
    fn support_and_query_are_disjoint(seed in any::<u64>()) {
        let ds = small_dataset();
        let ep = sample_episode(&ds, Split::Test, Protocol::Varying, &mut rng_for(seed, &[]), 1).unwrap();
        let ids: HashSet<usize> = ep.support_ids.iter().copied().collect();
        prop_assert!(ep.query_ids.iter().all(|i| !ids.contains(i)));
        let support: HashSet<Vec<u64>> = (0..ep.support_len()).map(|i| image_key(&ep.support, i)).collect();
        for i in 0..ep.query_len() {
            prop_assert!(!support.contains(&image_key(&ep.query, i)));
        }
    }

    #[test]
    fn episodes_replay_bit_exactly(seed in any::<u64>(), index in any::<u64>()) {
        let ds = small_dataset();
        let a = sample_episode(&ds, Split::Test, Protocol::Varying, &mut rng_for(seed, &[index]), index).unwrap();
        let b = sample_episode(&ds, Split::Test, Protocol::Varying, &mut rng_for(seed, &[index]), index).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn random_mixing_matrices_are_well_conditioned(seed in any::<u64>()) {
        let m = random_mixing_matrix(3, &mut rng_for(seed, &[]));
        prop_assert!(condition_number(&m) < MAX_CONDITION);
    }
}

#[test]
fn five_way_one_shot_on_ten_classes() {
    let mut spec = small_spec("ten", DomainTransform::Identity);
    spec.splits = SplitSizes { train: 2, val: 2, test: 10 };
    let ds = render_domain(&spec, 0, 1).unwrap();
    let ep = sample_episode(&ds, Split::Test, Protocol::FiveWayOneShot, &mut rng_for(5, &[]), 0).unwrap();
    assert_eq!(ep.support_len(), 5);
    assert_eq!(ep.query_len(), 50);
}

#[test]
fn insufficient_data_is_a_descriptive_error() {
    let ds = small_dataset();
    // only two validation classes
    let err = sample_episode(&ds, Split::Val, Protocol::Varying, &mut rng_for(0, &[]), 0).unwrap_err();
    assert!(err.to_string().contains("classes available"), "{err}");

    let mut spec = small_spec("few", DomainTransform::Identity);
    spec.images_per_class = 12;
    let ds = render_domain(&spec, 0, 1).unwrap();
    let err = sample_episode(&ds, Split::Test, Protocol::VaryingWayFiveShot, &mut rng_for(0, &[]), 0).unwrap_err();
    assert!(err.to_string().contains("5 support + 10 query"), "{err}");
}

#[test]
fn class_splits_are_disjoint_and_cover_every_class() {
    let ds = small_dataset();
    let mut seen = BTreeSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for c in ds.classes_in(split) {
            assert!(seen.insert(c), "class {c} in two splits");
        }
    }
    assert_eq!(seen.len(), ds.num_classes());
}

#[test]
fn same_seed_gives_bit_identical_domains() {
    let specs = benchmark_domains(2, 2, 9)
        .into_iter()
        .map(|s| SyntheticDomainSpec { images_per_class: 3, resolution: 8, ..s })
        .collect::<Vec<_>>();
    let a = gen_synthetic_domains(&specs, 4).unwrap();
    let b = gen_synthetic_domains(&specs, 4).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic_domains(&specs, 5).unwrap();
    assert_ne!(a[0].image(0), c[0].image(0));
}

#[test]
fn channel_mix_relation_holds_exactly_for_paired_samples() {
    let m = [0.9, 0.2, -0.1, 0.05, 1.1, 0.3, -0.2, 0.1, 0.8];
    let plain = |t| SyntheticDomainSpec {
        instance_noise: 0.0,
        standardize: false,
        ..small_spec("pair", t)
    };
    let a = render_domain(&plain(DomainTransform::Identity), 0, 11).unwrap();
    let b = render_domain(&plain(DomainTransform::ChannelMix { matrix: m.to_vec() }), 1, 11).unwrap();
    assert_eq!(a.len(), b.len());
    let plane = 8 * 8;
    for i in 0..a.len() {
        let (xa, xb) = (a.image(i), b.image(i));
        for p in 0..plane {
            for c in 0..3 {
                let expect: f64 = (0..3).map(|k| m[c * 3 + k] * xa[k * plane + p]).sum();
                assert!((xb[c * plane + p] - expect).abs() <= 1e-15, "image {i} pixel {p}");
            }
        }
    }
}

#[test]
fn class_mean_images_are_pairwise_distinct() {
    let ds = small_dataset();
    let n = ds.image_len();
    let means: Vec<Vec<f64>> = (0..ds.num_classes())
        .map(|c| {
            let ids = ds.indices_of(c);
            let mut m = vec![0.0; n];
            for &i in ids {
                for (a, v) in m.iter_mut().zip(ds.image(i)) {
                    *a += v / ids.len() as f64;
                }
            }
            m
        })
        .collect();
    let mut min = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min = min.min(d);
        }
    }
    assert!(min > 0.0, "min pairwise class-mean distance {min}");
}

#[test]
fn degenerate_specs_and_overlapping_ranges_are_rejected() {
    let mut s = small_spec("z", DomainTransform::Identity);
    s.images_per_class = 0;
    assert!(render_domain(&s, 0, 0).is_err());
    let mut s = small_spec("z", DomainTransform::Identity);
    s.splits = SplitSizes { train: 1, val: 0, test: 0 };
    assert!(render_domain(&s, 0, 0).is_err());

    assert!(check_seen_unseen_disjoint(&benchmark_domains(3, 4, 0)).is_ok());
    let rot = |d: f64, seen| SyntheticDomainSpec::new("r", 1, DomainTransform::Rotation { degrees: d }, seen);
    assert!(check_seen_unseen_disjoint(&[rot(60.0, true), rot(90.0, true), rot(70.0, false)]).is_err());
    assert!(check_seen_unseen_disjoint(&[rot(60.0, true), rot(90.0, true), rot(95.0, false)]).is_ok());
}

#[test]
fn identity_shift_reproduces_the_unshifted_episode() {
    let ds = small_dataset();
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let a = sample_episode(&ds, Split::Test, Protocol::Varying, &mut rng_for(8, &[]), 2).unwrap();
    let b = make_channel_shift_episode(&ds, Split::Test, &eye, Protocol::Varying, &mut rng_for(8, &[]), 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn permutation_shift_permutes_channels_losslessly() {
    let ds = small_dataset();
    // output channel c reads input channel perm[c]
    let perm = [2usize, 0, 1];
    let m = Tensor::from_fn([3, 3], |i| if perm[i / 3] == i % 3 { 1.0 } else { 0.0 });
    let a = sample_episode(&ds, Split::Test, Protocol::VaryingWayFiveShot, &mut rng_for(3, &[]), 0).unwrap();
    let b = make_channel_shift_episode(&ds, Split::Test, &m, Protocol::VaryingWayFiveShot, &mut rng_for(3, &[]), 0).unwrap();
    let plane = 64;
    for (x, y) in [(&a.support, &b.support), (&a.query, &b.query)] {
        for n in 0..x.shape()[0] {
            for c in 0..3 {
                for p in 0..plane {
                    let off = n * 3 * plane;
                    assert_eq!(y.data()[off + c * plane + p], x.data()[off + perm[c] * plane + p]);
                }
            }
        }
    }
    // the inverse (transpose) permutation restores the original bit-exactly
    let inv = Tensor::from_fn([3, 3], |i| m.data()[(i % 3) * 3 + i / 3]);
    assert_eq!(apply_channel_mix(&b.query, &inv).unwrap(), a.query);
}

#[test]
fn singular_or_ill_conditioned_shift_is_rejected() {
    let ds = small_dataset();
    let singular = Tensor::from_fn([3, 3], |i| if i < 3 { 1.0 } else if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut rank2 = singular.data().to_vec();
    rank2[8] = 0.0;
    rank2[6] = 0.0;
    rank2[7] = 0.0;
    let rank2 = Tensor::new([3, 3], rank2).unwrap();
    let ill = Tensor::from_fn([3, 3], |i| match i {
        0 => 1.0,
        4 => 1.0,
        8 => 1e-3,
        _ => 0.0,
    });
    for m in [rank2, ill] {
        assert!(make_channel_shift_episode(&ds, Split::Test, &m, Protocol::Varying, &mut rng_for(0, &[]), 0).is_err());
    }
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Four 28x28 images whose pixel at (r, c) of image i is `(i * 50 + r * 3 + c) % 256`.
fn fixture() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::new();
    for i in 0..4usize {
        for r in 0..28usize {
            for c in 0..28usize {
                pixels.push(((i * 50 + r * 3 + c) % 256) as u8);
            }
        }
    }
    let mut images = vec![0x00, 0x00, 0x08, 0x03];
    images.extend(be(4));
    images.extend(be(28));
    images.extend(be(28));
    images.extend(&pixels);
    let labels_payload = vec![7u8, 0, 3, 7];
    let mut labels = vec![0x00, 0x00, 0x08, 0x01];
    labels.extend(be(4));
    labels.extend(&labels_payload);
    (images, labels, pixels)
}

#[test]
fn idx_fixture_parses_bit_exactly() {
    let (images, labels, pixels) = fixture();
    let (n, rows, cols, px) = parse_idx_images(&images).unwrap();
    assert_eq!((n, rows, cols), (4, 28, 28));
    assert_eq!(px, pixels);
    assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 0, 3, 7]);
    assert_eq!(write_idx_images(28, 28, &pixels).unwrap(), images);
    assert_eq!(write_idx_labels(&[7, 0, 3, 7]).unwrap(), labels);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("i.idx"), &images).unwrap();
    std::fs::write(dir.path().join("l.idx"), &labels).unwrap();
    let ds = load_idx(dir.path().join("i.idx"), dir.path().join("l.idx"), "fx", Split::Test).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.image_len(), 28 * 28);
    assert_eq!(ds.image(2)[28 + 5], ((2 * 50 + 3 + 5) % 256) as f64 / 255.0);
    assert_eq!(ds.labels(), &[7, 0, 3, 7]);
    assert_eq!(ds.indices_of(7), &[0, 3]);
}

#[test]
fn idx_errors_name_the_problem() {
    let (images, labels, _) = fixture();
    let err = parse_idx_images(&images[..images.len() - 1]).unwrap_err().to_string();
    assert!(err.contains("length") || err.contains("bytes"), "{err}");
    let err = parse_idx_images(&images[..10]).unwrap_err().to_string();
    assert!(err.contains("header") || err.contains("truncated"), "{err}");
    let err = parse_idx_images(&labels).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    let err = parse_idx_labels(&images).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let mut three = labels.clone();
    three[7] = 3;
    three.pop();
    std::fs::write(dir.path().join("i.idx"), &images).unwrap();
    std::fs::write(dir.path().join("l.idx"), &three).unwrap();
    assert!(load_idx(dir.path().join("i.idx"), dir.path().join("l.idx"), "fx", Split::Test).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trips(rows in 1usize..6, cols in 1usize..6, n in 0usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = rng_for(seed, &[]);
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.gen()).collect();
        let bytes = write_idx_images(rows, cols, &pixels).unwrap();
        prop_assert_eq!(bytes.len(), 16 + pixels.len());
        prop_assert_eq!(parse_idx_images(&bytes).unwrap(), (n, rows, cols, pixels));
        let labels: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        prop_assert_eq!(parse_idx_labels(&write_idx_labels(&labels).unwrap()).unwrap(), labels);
    }
}

#[test]
fn conform_replicates_gray_and_pads() {
    let (images, labels, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("fx");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("test-images.idx"), &images).unwrap();
    std::fs::write(sub.join("test-labels.idx"), &labels).unwrap();
    let ds = load_idx_dir(dir.path(), "fx", "test", Split::Test).unwrap();
    let c = ds.conform(3, 32).unwrap();
    assert_eq!(c.image_len(), 3 * 32 * 32);
    let img = c.image(1);
    let src = ds.image(1);
    for ch in 0..3 {
        assert_eq!(img[ch * 1024], 0.0);
        assert_eq!(img[ch * 1024 + 2 * 32 + 2], src[0]);
        assert_eq!(img[ch * 1024 + 29 * 32 + 29], src[27 * 28 + 27]);
    }
    let counts: BTreeMap<usize, usize> = c.labels().iter().fold(BTreeMap::new(), |mut m, &l| {
        *m.entry(l).or_default() += 1;
        m
    });
    assert_eq!(counts.values().sum::<usize>(), 4);
}

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use tsa_core::adapters::*;
use tsa_core::backbone::{forward_features, BackboneSpec, BackboneWeights, LayerSite, SiteRole};
use tsa_core::rng::rng_for;
use tsa_core::Error;
use tsa_tensor::Tensor;

/// Four-stage backbone small enough for exhaustive checks.
fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        in_channels: 3,
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 1,
        stage_channels: vec![4, 6, 8, 10],
        blocks_per_stage: 2,
        input_resolution: 8,
    }
}

/// Random kernels and non-trivial BN statistics.
fn random_weights(spec: &BackboneSpec, seed: u64) -> Arc<BackboneWeights> {
    let mut rng = rng_for(seed, &[]);
    let mut w = BackboneWeights::init(spec, &mut rng).unwrap();
    for (name, t) in w.tensors.iter_mut() {
        let shift = name.ends_with(".mean") || name.ends_with(".beta");
        let scale = name.ends_with(".var") || name.ends_with(".gamma");
        if shift || scale {
            for v in t.data_mut() {
                *v = if shift { rng.gen_range(-0.2..0.2) } else { rng.gen_range(0.5..1.5) };
            }
        }
    }
    Arc::new(w)
}

fn random_images(spec: &BackboneSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[9]);
    let r = spec.input_resolution;
    Tensor::from_fn([n, spec.in_channels, r, r], |_| rng.gen_range(-1.5..1.5))
}

fn exact_identity(code: &str) -> AdapterConfig {
    code.parse::<AdapterConfig>()
        .unwrap()
        .with_attachment(Attachment::Legal)
        .with_init(AdapterInit::Identity { delta: 0.0 })
}

#[test]
fn exact_identity_init_leaves_features_unchanged() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 1);
    let x = random_images(&spec, 100, 2);
    let base = forward_features(&w, &x, None).unwrap();
    for code in ["Ad-S-M", "Ad-S-CW", "Ad-R-M", "Ad-R-CW", "Ad-R-M-DN2", "Ad-R-M-PA"] {
        let model = attach(w.clone(), &exact_identity(code), 0).unwrap();
        assert!(!model.sites.is_empty());
        let f = model.features(&x).unwrap();
        let diff = f.max_abs_diff(&base);
        assert!(diff <= 1e-12, "{code}: max deviation {diff}");
    }
}

#[test]
fn near_identity_init_stays_close() {
    let spec = BackboneSpec::resnet_s();
    let w = random_weights(&spec, 3);
    let x = random_images(&spec, 4, 4);
    let base = forward_features(&w, &x, None).unwrap();
    let scale = base.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for code in ["Ad-R-M", "Ad-R-CW", "Ad-R-M-DN4"] {
        let cfg: AdapterConfig = code.parse::<AdapterConfig>().unwrap().with_attachment(Attachment::Legal);
        let f = attach(w.clone(), &cfg, 0).unwrap().features(&x).unwrap();
        let dev = f.data().iter().zip(base.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dev / scale < 1e-2, "{code}: relative deviation {}", dev / scale);
        assert!(dev > 0.0, "{code}: delta init should perturb the features");
    }
}

fn site(c_in: usize, c_out: usize, stride: usize) -> LayerSite {
    LayerSite {
        index: 1,
        stage: 1,
        block: 0,
        conv: 1,
        c_in,
        c_out,
        kernel: 3,
        stride,
        role: SiteRole::Main,
    }
}

#[test]
fn residual_matrix_hand_example() {
    let s = AdapterSite {
        site: site(2, 2, 1),
        connection: Connection::Residual,
        params: AdapterParams::Matrix(Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()),
    };
    let h = Tensor::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
    let out = apply_adapter(&h, &Tensor::zeros([1, 2, 1, 1]), &s).unwrap();
    assert_eq!(out.data(), &[2.0, 1.0]);
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Brute-force oracles for the four adapter forms on NCHW tensors.
fn oracle(h: &Tensor, conv_out: &Tensor, connection: Connection, params: &AdapterParams, stride: usize) -> Tensor {
    let (n, c_in, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
    let (c_out, oh, ow) = (conv_out.shape()[1], conv_out.shape()[2], conv_out.shape()[3]);
    let mut out = conv_out.clone();
    let at = |t: &Tensor, b, c, y, x| t.at(&[b, c, y, x]);
    for b in 0..n {
        for o in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let idx = ((b * c_out + o) * oh + y) * ow + x;
                    let v = match (connection, params) {
                        (Connection::Serial, AdapterParams::Matrix(a)) => {
                            (0..c_out).map(|k| a.at(&[o, k]) * at(conv_out, b, k, y, x)).sum()
                        }
                        (Connection::Serial, AdapterParams::Channelwise(a)) => a.data()[o] * at(conv_out, b, o, y, x),
                        (Connection::Residual, AdapterParams::Matrix(a)) => {
                            let (sy, sx) = (y * stride, x * stride);
                            assert!(sy < hh && sx < ww);
                            at(conv_out, b, o, y, x) + (0..c_in).map(|k| a.at(&[o, k]) * at(h, b, k, sy, sx)).sum::<f64>()
                        }
                        (Connection::Residual, AdapterParams::Channelwise(a)) => {
                            at(conv_out, b, o, y, x) + a.data()[o] * at(h, b, o, y, x)
                        }
                        _ => unreachable!(),
                    };
                    out.data_mut()[idx] = v;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_forms_match_oracles(seed in any::<u64>(), c_in in 1usize..5, c_out in 1usize..5, stride in 1usize..3) {
        let mut rng = rng_for(seed, &[]);
        let (hw, n) = (4usize, 2);
        let ohw = hw.div_ceil(stride);
        let h = random_tensor(&[n, c_in, hw, hw], &mut rng);
        let conv_out = random_tensor(&[n, c_out, ohw, ohw], &mut rng);
        let cases = [
            (Connection::Serial, AdapterParams::Matrix(random_tensor(&[c_out, c_out], &mut rng))),
            (Connection::Serial, AdapterParams::Channelwise(random_tensor(&[c_out], &mut rng))),
            (Connection::Residual, AdapterParams::Matrix(random_tensor(&[c_out, c_in], &mut rng))),
        ];
        for (connection, params) in cases {
            let s = AdapterSite { site: site(c_in, c_out, stride), connection, params: params.clone() };
            let got = apply_adapter(&h, &conv_out, &s).unwrap();
            prop_assert!(got.max_abs_diff(&oracle(&h, &conv_out, connection, &params, stride)) < 1e-12);
        }
        if c_in == c_out && stride == 1 {
            let params = AdapterParams::Channelwise(random_tensor(&[c_out], &mut rng));
            let s = AdapterSite { site: site(c_in, c_out, 1), connection: Connection::Residual, params: params.clone() };
            let got = apply_adapter(&h, &conv_out, &s).unwrap();
            prop_assert!(got.max_abs_diff(&oracle(&h, &conv_out, Connection::Residual, &params, 1)) < 1e-12);
        }
    }

    #[test]
    fn decomposed_adapter_equals_its_effective_matrix(seed in any::<u64>(), c_in in 1usize..6, c_out in 1usize..6, b in 1usize..4, stride in 1usize..3) {
        let mut rng = rng_for(seed, &[]);
        let hw = 4usize;
        let h = random_tensor(&[2, c_in, hw, hw], &mut rng);
        let conv_out = random_tensor(&[2, c_out, hw.div_ceil(stride), hw.div_ceil(stride)], &mut rng);
        let dec = AdapterSite {
            site: site(c_in, c_out, stride),
            connection: Connection::Residual,
            params: AdapterParams::Decomposed { v: random_tensor(&[c_out, b], &mut rng), gamma: random_tensor(&[c_in, b], &mut rng) },
        };
        let alpha = dec.effective_matrix().unwrap();
        prop_assert_eq!(alpha.shape(), &[c_out, c_in]);
        let full = AdapterSite { params: AdapterParams::Matrix(alpha), ..dec.clone() };
        let a = apply_adapter(&h, &conv_out, &dec).unwrap();
        let m = apply_adapter(&h, &conv_out, &full).unwrap();
        prop_assert!(a.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn pre_classifier_align_matches_matmul_oracle(seed in any::<u64>(), n in 1usize..6, d in 1usize..6) {
        let mut rng = rng_for(seed, &[]);
        let z = random_tensor(&[n, d], &mut rng);
        let beta = random_tensor(&[d, d], &mut rng);
        let got = pre_classifier_align(&z, &beta).unwrap();
        for i in 0..n {
            for j in 0..d {
                let v: f64 = (0..d).map(|k| z.at(&[i, k]) * beta.at(&[j, k])).sum();
                prop_assert!((got.at(&[i, j]) - v).abs() < 1e-12);
            }
        }
        prop_assert_eq!(pre_classifier_align(&z, &Tensor::eye(d, 1.0)).unwrap(), z.clone());
        prop_assert!(pre_classifier_align(&z, &Tensor::eye(d, 2.0)).unwrap().max_abs_diff(&z.map(|v| 2.0 * v)) == 0.0);
    }
}

#[test]
fn trivial_adapter_values_pass_conv_output_through() {
    let mut rng = rng_for(5, &[]);
    let h = random_tensor(&[1, 3, 4, 4], &mut rng);
    let conv_out = random_tensor(&[1, 3, 4, 4], &mut rng);
    let zero = AdapterSite {
        site: site(3, 3, 1),
        connection: Connection::Residual,
        params: AdapterParams::Matrix(Tensor::zeros([3, 3])),
    };
    assert_eq!(apply_adapter(&h, &conv_out, &zero).unwrap(), conv_out);
    let eye = AdapterSite {
        connection: Connection::Serial,
        params: AdapterParams::Matrix(Tensor::eye(3, 1.0)),
        ..zero
    };
    assert_eq!(apply_adapter(&h, &conv_out, &eye).unwrap(), conv_out);
}

#[test]
fn residual_shape_mismatch_is_an_error() {
    let mut rng = rng_for(6, &[]);
    let h = random_tensor(&[1, 2, 4, 4], &mut rng);
    let conv_out = random_tensor(&[1, 2, 4, 4], &mut rng);
    let s = AdapterSite {
        site: site(2, 2, 2),
        connection: Connection::Residual,
        params: AdapterParams::Matrix(Tensor::eye(2, 1.0)),
    };
    assert!(apply_adapter(&h, &conv_out, &s).is_err());
}

#[test]
fn rank_one_effective_matrix() {
    let v = Tensor::new([3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    let gamma = Tensor::new([3, 1], vec![0.0, 1.0, 0.0]).unwrap();
    let s = AdapterSite {
        site: site(3, 3, 1),
        connection: Connection::Residual,
        params: AdapterParams::Decomposed { v, gamma },
    };
    let m = s.effective_matrix().unwrap();
    let expect: Vec<f64> = (0..9).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
    assert_eq!(m.data(), &expect[..]);

    // the factor identity: V = alpha, gamma = I reproduces alpha
    let mut rng = rng_for(7, &[]);
    let alpha = random_tensor(&[4, 4], &mut rng);
    let s = AdapterSite {
        params: AdapterParams::Decomposed { v: alpha.clone(), gamma: Tensor::eye(4, 1.0) },
        ..s
    };
    assert_eq!(s.effective_matrix().unwrap(), alpha);
}

/// Closed-form trainable counts over the selected sites.
fn count_oracle(cfg: &AdapterConfig, spec: &BackboneSpec) -> usize {
    let kind = cfg.kind.as_ref().unwrap();
    let sites = cfg.selected_sites(spec).unwrap();
    let mut n = 0;
    for s in sites {
        n += match (kind.connection, kind.form, &kind.decomposition) {
            (_, Form::Matrix, Some(d)) if d.stages.is_empty() || d.stages.contains(&s.stage) => {
                (s.c_out + s.c_in) * s.c_out.div_ceil(d.divisor)
            }
            (Connection::Residual, Form::Matrix, _) => s.c_out * s.c_in,
            (Connection::Serial, Form::Matrix, _) => s.c_out * s.c_out,
            (_, Form::Channelwise, _) => s.c_out,
        };
    }
    n + if cfg.include_pa { spec.feature_dim().pow(2) } else { 0 }
}

#[test]
fn parameter_counts_follow_the_closed_form() {
    for spec in [BackboneSpec::resnet_s(), BackboneSpec::resnet18(), tiny_spec()] {
        for code in ["Ad-R-M", "Ad-S-M", "Ad-S-CW", "Ad-R-M-PA", "Ad-R-M-DN32@34-PA", "Ad-R-M-DN4", "Ad-S-CW-PA"] {
            for att in ["all", "block4", "block3-4", "block2-4"] {
                let cfg = code.parse::<AdapterConfig>().unwrap().with_attachment(att.parse().unwrap());
                let count = cfg.count_parameters(&spec).unwrap();
                assert_eq!(count.total(), count_oracle(&cfg, &spec), "{code} {att}");
                let model = attach(Arc::new(BackboneWeights::zeros(&spec).unwrap()), &cfg, 0).unwrap();
                assert_eq!(model.num_trainable(), count.total(), "{code} {att}");
            }
        }
    }
}

#[test]
fn resnet18_replica_counts() {
    let spec = BackboneSpec::resnet18();
    assert_eq!(spec.conv_params(), 11_166_912);
    let count = |code: &str| code.parse::<AdapterConfig>().unwrap().count_parameters(&spec).unwrap();
    assert_eq!(count("Ad-R-M").total(), 1_220_608);
    assert_eq!(count("Ad-S-M").total(), 1_392_640);
    assert_eq!(count("Ad-R-M-PA").total(), 1_482_752);
    assert_eq!(count("Ad-R-M-DN32@34-PA").total(), 412_672);
    assert_eq!("Ad-R-M".parse::<AdapterConfig>().unwrap().selected_sites(&spec).unwrap().len(), 16);
}

#[test]
fn resnet_s_block4_residual_matrix_counts() {
    let spec = BackboneSpec::resnet_s();
    let w = Arc::new(BackboneWeights::zeros(&spec).unwrap());
    // block4 is the whole last stage: 64->128 then three 128->128 convs
    let cfg = "Ad-R-M".parse::<AdapterConfig>().unwrap().with_attachment("block4".parse().unwrap());
    let m = attach(w.clone(), &cfg, 0).unwrap();
    assert_eq!(m.sites.len(), 4);
    assert_eq!(m.num_trainable(), 64 * 128 + 3 * 128 * 128);
    assert!(m.beta.is_none());
    // the final basic block alone carries two 128x128 adapters
    let last = cfg.with_attachment("sites:s4.b1.conv1,s4.b1.conv2".parse().unwrap());
    let m = attach(w, &last, 0).unwrap();
    assert_eq!(m.sites.len(), 2);
    assert_eq!(m.num_trainable(), 32_768);
}

#[test]
fn illegal_residual_channelwise_names_the_site() {
    let spec = BackboneSpec::resnet_s();
    let w = Arc::new(BackboneWeights::zeros(&spec).unwrap());
    let err = attach(w.clone(), &"Ad-R-CW".parse().unwrap(), 0).unwrap_err();
    match err {
        Error::IllegalAdapter { site, .. } => assert_eq!(site, "s2.b0.conv1"),
        other => panic!("unexpected error {other}"),
    }
    let legal = attach(w, &"Ad-R-CW".parse::<AdapterConfig>().unwrap().with_attachment(Attachment::Legal), 0).unwrap();
    assert!(legal.sites.iter().all(|s| s.site.c_in == s.site.c_out && s.site.stride == 1));
    assert_eq!(legal.sites.len(), 16 - 3);
}

#[test]
fn pa_beta_starts_at_identity_and_names_are_ordered() {
    let spec = tiny_spec();
    let w = Arc::new(BackboneWeights::zeros(&spec).unwrap());
    let m = attach(w, &"Ad-R-M-DN2@4-PA".parse().unwrap(), 0).unwrap();
    assert_eq!(m.beta.as_ref().unwrap(), &Tensor::eye(spec.feature_dim(), 1.0));
    let names = m.param_names();
    assert_eq!(names.len(), m.params().len());
    assert_eq!(names.last().unwrap(), "beta");
    assert!(names.iter().any(|n| n.ends_with(".gamma")));
    assert!(names.iter().any(|n| n.ends_with(".alpha")));
}

#[test]
fn attach_is_deterministic_under_seed() {
    let spec = tiny_spec();
    let w = Arc::new(BackboneWeights::zeros(&spec).unwrap());
    let cfg = "Ad-R-M".parse::<AdapterConfig>().unwrap().with_init(AdapterInit::Random { scale: 0.1 });
    let a = attach(w.clone(), &cfg, 3).unwrap();
    let b = attach(w.clone(), &cfg, 3).unwrap();
    let c = attach(w, &cfg, 4).unwrap();
    assert_eq!(a.sites, b.sites);
    assert_ne!(a.sites, c.sites);
}

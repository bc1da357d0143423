mod common;

use boxdet::geometry::Rect;
use boxdet::network::{
    build_network, required_filters, Activation, ConvSpec, LayerSpec, NetworkConfig, RegionHeadSpec,
};
use boxdet::transfer::{
    apply_surgery, estimate_anchors, load_weights, mean_distortion, save_weights, SurgeryPlan, WeightsFile,
};
use boxdet::Error;
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn conv(filters: usize, size: usize, bn: bool, activation: Activation) -> LayerSpec {
    LayerSpec::Convolutional(ConvSpec {
        filters,
        size,
        stride: 1,
        pad: usize::from(size == 3),
        batch_normalize: bn,
        activation,
    })
}

fn config(classes: usize, anchors: usize, final_filters: usize) -> NetworkConfig {
    NetworkConfig {
        input_width: 16,
        input_height: 16,
        channels: 3,
        layers: vec![
            conv(4, 3, true, Activation::Leaky),
            LayerSpec::MaxPool,
            conv(6, 3, true, Activation::Leaky),
            conv(final_filters, 1, false, Activation::Linear),
        ],
        head: RegionHeadSpec::new(classes, (0..anchors).map(|a| (1.0 + a as f32, 1.0 + 0.5 * a as f32)).collect()),
    }
}

#[test]
fn filter_rule_exhaustive() {
    for c in 1..=20 {
        for a in 1..=9 {
            let need = (c + 5) * a;
            assert_eq!(required_filters(c, a), need);
            assert!(build_network(&config(c, a, need), 0).is_ok());
            for wrong in [need - 1, need + 1] {
                assert!(matches!(build_network(&config(c, a, wrong), 0), Err(Error::Config(_))));
            }
        }
    }
    assert_eq!(required_filters(2, 5), 35);
    assert_eq!(required_filters(14, 5), 95);
    assert_eq!(required_filters(20, 5), 125);
}

#[test]
fn surgery_keeps_inner_layers_bit_exact() {
    let source = build_network(&config(20, 5, 125), 3).unwrap();
    let file = WeightsFile::from_network(&source);
    let target = config(14, 5, 95);
    let plan = SurgeryPlan::final_layer(20, &target);
    let net = apply_surgery(&file, &target, &plan, 9).unwrap();
    let out = WeightsFile::from_network(&net);
    assert_eq!(out.layers[..2], file.layers[..2]);
    assert_eq!(out.layers[2].filters, 95);
    let src_sums: Vec<u64> = source.conv_layers().map(|l| l.weights.value.checksum()).collect();
    let dst_sums: Vec<u64> = net.conv_layers().map(|l| l.weights.value.checksum()).collect();
    assert_eq!(src_sums[..2], dst_sums[..2]);
    assert_eq!(net.checksum(), apply_surgery(&file, &target, &plan, 9).unwrap().checksum());
}

#[test]
fn surgery_rejects_mismatched_inner_layer() {
    let source = build_network(&config(20, 5, 125), 3).unwrap();
    let mut target = config(14, 5, 95);
    target.layers[2] = conv(7, 3, true, Activation::Leaky);
    let plan = SurgeryPlan::final_layer(20, &target);
    let err = apply_surgery(&WeightsFile::from_network(&source), &target, &plan, 0).unwrap_err();
    assert!(matches!(err, Error::Surgery(_)), "{err}");
}

#[test]
fn weights_round_trip_save_load_save() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, 2, 16);
    let net = build_network(&cfg, 5).unwrap();
    let p1 = dir.path().join("a.ylw");
    let p2 = dir.path().join("b.ylw");
    save_weights(&net, &p1).unwrap();
    save_weights(&load_weights(&p1, &cfg).unwrap(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

fn shapes(rng: &mut impl Rng, n: usize) -> Vec<(f32, f32)> {
    (0..n)
        .map(|_| (rng.gen_range(0.05f32..0.9), rng.gen_range(0.05f32..0.9)))
        .collect()
}

fn as_f64(v: &[(f32, f32)]) -> Vec<(f64, f64)> {
    v.iter().map(|&(w, h)| (w as f64, h as f64)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn anchors_ignore_input_order(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let boxes = shapes(&mut r, 40);
        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(
            estimate_anchors(&boxes, k, 13.0, 1).unwrap(),
            estimate_anchors(&shuffled, k, 13.0, 1).unwrap()
        );
    }

    #[test]
    fn kmeans_beats_random_anchors(seed in any::<u64>()) {
        let mut r = rng(seed);
        let boxes = shapes(&mut r, 60);
        let k = 5;
        let fitted = as_f64(&estimate_anchors(&boxes, k, 1.0, 0).unwrap());
        let random: Vec<(f64, f64)> = as_f64(&boxes).choose_multiple(&mut r, k).copied().collect();
        let pts = as_f64(&boxes);
        prop_assert!(mean_distortion(&pts, &fitted) <= mean_distortion(&pts, &random) + 1e-9);
    }
}

#[test]
fn kmeans_matches_exhaustive_partition_for_eight_boxes() {
    for seed in 0..50 {
        let boxes = shapes(&mut rng(seed), 8);
        let pts = as_f64(&boxes);
        let fitted = as_f64(&estimate_anchors(&boxes, 2, 1.0, 0).unwrap());
        let (_, mut best) = best_partition(&pts, 2);
        best.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        for (f, b) in fitted.iter().zip(&best) {
            assert!(
                (f.0 - b.0).abs().max((f.1 - b.1).abs()) < 1e-5,
                "seed {seed}: {fitted:?} vs {best:?}"
            );
        }
    }
}

#[test]
fn identical_boxes_give_that_box() {
    let anchors = estimate_anchors(&[(0.25, 0.5); 7], 1, 13.0, 0).unwrap();
    assert_eq!(anchors, vec![(0.25 * 13.0, 0.5 * 13.0)]);
    assert_eq!(Rect::shape_iou(1.0, 2.0, 1.0, 2.0), 1.0);
}

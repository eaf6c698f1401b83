//! Randomized invariants checked against brute-force oracles.

mod common;

use clims::backbone::{
    activation_head, baseline_logits, conventional_cam, sigmoid, upsample_maps, ActivationMaps,
    ClassWeights, FeatureMap,
};
use clims::datamodel::{Image, LabelVector};
use clims::evalkit::{iou_report, to_pseudo_mask, PseudoMask};
use clims::losses::{
    area_regularization, btm_loss, cbs_loss, clamp_similarity, mask_out, otm_loss,
};
use clims::matcher::{cosine_similarity, Matcher};
use clims::pipeline::lr_at;
use clims::synthgen::{generate_scene, SceneSpec};
use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;

fn arr3(k: usize, h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(lo..hi, k * h * w)
        .prop_map(move |v| Array3::from_shape_vec((k, h, w), v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=8, 1usize..=8)
}

fn mask_pair() -> impl Strategy<Value = (usize, Array2<u8>, Array2<u8>)> {
    (1usize..=4, 1usize..=32, 1usize..=32).prop_flat_map(|(k, h, w)| {
        let cell = 0..=(k as u8);
        (
            Just(k),
            prop::collection::vec(cell.clone(), h * w),
            prop::collection::vec(cell, h * w),
        )
            .prop_map(move |(k, a, b)| {
                (
                    k,
                    Array2::from_shape_vec((h, w), a).unwrap(),
                    Array2::from_shape_vec((h, w), b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_matches_pixel_count_oracle((k, pred, gt) in mask_pair()) {
        let report = iou_report(&PseudoMask(pred.clone()), &gt, k).unwrap();
        let mut defined = Vec::new();
        for c in 0..=k as u8 {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (p, g) in pred.iter().zip(gt.iter()) {
                if *p == c && *g == c {
                    inter += 1;
                }
                if *p == c || *g == c {
                    union += 1;
                }
            }
            prop_assert_eq!(report.counts.intersection[c as usize], inter);
            prop_assert_eq!(report.counts.union[c as usize], union);
            let expected = (union > 0).then(|| inter as f64 / union as f64);
            prop_assert_eq!(report.iou[c as usize], expected);
            defined.extend(expected);
        }
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        prop_assert_eq!(report.miou, miou);
    }
}

proptest! {
    #[test]
    fn conventional_cam_matches_nested_loops(
        (c, k, h, w) in (1usize..=8, 1usize..=4, 1usize..=8, 1usize..=8),
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        use rand::Rng;
        let z = Array3::from_shape_simple_fn((c, h, w), || r.gen_range(-2.0..2.0));
        let wt = Array2::from_shape_simple_fn((c, k), || r.gen_range(-2.0..2.0));
        let cam = conventional_cam(&FeatureMap(z.clone()), &ClassWeights(wt.clone())).unwrap();
        for kk in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for cc in 0..c {
                        s += wt[[cc, kk]] * z[[cc, y, x]];
                    }
                    prop_assert_eq!(cam.0[[kk, y, x]], s);
                }
            }
        }
        // Global average pooling commutes with the 1x1 head.
        let logits = baseline_logits(&FeatureMap(z.clone()), &ClassWeights(wt.clone())).unwrap();
        for kk in 0..k {
            let mean = cam.0.index_axis(Axis(0), kk).mean().unwrap();
            prop_assert!((logits.0[kk] - mean).abs() <= 1e-12);
        }
        let p = activation_head(&FeatureMap(z), &ClassWeights(wt)).unwrap();
        prop_assert!(p.0.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval(x in -700.0f64..700.0) {
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s <= 1.0);
        prop_assert!(s.is_finite());
        if x.abs() < 30.0 {
            prop_assert!(s < 1.0);
        }
    }

    #[test]
    fn area_matches_double_loop((k, h, w) in dims(), seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let p = Array3::from_shape_simple_fn((k, h, w), || r.gen_range(0.0..1.0));
        let (reg, areas) = area_regularization(&ActivationMaps(p.clone()));
        let mut total = 0.0;
        for kk in 0..k {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += p[[kk, y, x]];
                }
            }
            let s = s / (h * w) as f64;
            prop_assert!((areas[kk] - s).abs() <= 1e-12);
            total += s;
        }
        prop_assert!((reg - total / k as f64).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&reg));
    }

    #[test]
    fn pseudo_mask_foreground_shrinks_with_threshold(
        cams in (1usize..=4, 1usize..=12, 1usize..=12).prop_flat_map(|(k, h, w)| arr3(k, h, w, 0.0, 1.0)),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let cams = ActivationMaps(cams);
        let a = to_pseudo_mask(&cams, lo);
        let b = to_pseudo_mask(&cams, hi);
        for (x, y) in a.0.iter().zip(b.0.iter()) {
            // Raising the threshold only turns pixels into background.
            prop_assert!(*y == 0 || *y == *x);
        }
    }

    #[test]
    fn masks_partition_the_image(seed in any::<u64>(), h in 8usize..=12, w in 8usize..=12) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let img = common::random_image(&mut r, h, w);
        let p = Array2::from_shape_simple_fn((h, w), || r.gen_range(0.0..1.0));
        let fg = mask_out(&img, p.view()).unwrap();
        let bg = mask_out(&img, p.mapv(|v| 1.0 - v).view()).unwrap();
        let sum = fg.as_array() + bg.as_array();
        for (s, o) in sum.iter().zip(img.as_array().iter()) {
            prop_assert!((s - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_is_symmetric_bounded_and_scale_free(
        (u, v) in (2usize..=8).prop_flat_map(|d| (
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
        )),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let nu = u.iter().map(|x| x * x).sum::<f64>();
        let nv = v.iter().map(|x| x * x).sum::<f64>();
        prop_assume!(nu > 1e-6 && nv > 1e-6);
        let s = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&v, &u).unwrap());
        let ua: Vec<f64> = u.iter().map(|x| x * a).collect();
        let vb: Vec<f64> = v.iter().map(|x| x * b).collect();
        prop_assert!((cosine_similarity(&ua, &vb).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn cosine_schedule_is_symmetric_and_bounded(total in 1u64..10_000, frac in 0.0f64..=1.0, lr0 in 1e-6f64..1.0) {
        let step = ((total as f64) * frac).floor() as u64;
        let lr = lr_at(step, total, lr0).unwrap();
        prop_assert!(lr >= 0.0 && lr <= lr0);
        let mirror = lr_at(total - step, total, lr0).unwrap();
        prop_assert!((lr + mirror - lr0).abs() <= 1e-12 * lr0.max(1.0));
        let scaled = lr_at(step, total, 2.0 * lr0).unwrap();
        prop_assert!((scaled - 2.0 * lr).abs() <= 1e-15);
        prop_assert!(lr_at(total + 1, total, lr0).is_err());
    }

    #[test]
    fn losses_are_monotone_in_similarity(s in 1e-4f64..0.9998, d in 1e-6f64..1e-4) {
        let y = LabelVector::new(vec![1]).unwrap();
        let clamp = |v: f64| clamp_similarity(v, 1e-4);
        let (a, b) = (clamp(s), clamp(s + d));
        prop_assert!(otm_loss(&[b], &y).unwrap() < otm_loss(&[a], &y).unwrap());
        prop_assert!(btm_loss(&[b], &y).unwrap() > btm_loss(&[a], &y).unwrap());
        prop_assert!(cbs_loss(&[vec![b, 0.3]], &y).unwrap() > cbs_loss(&[vec![a, 0.3]], &y).unwrap());
        for v in [otm_loss(&[a], &y), btm_loss(&[a], &y), cbs_loss(&[vec![a]], &y)] {
            let v = v.unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn upsampling_stays_within_source_range((k, h, w) in dims(), fh in 1usize..=4, fw in 1usize..=4, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let p = Array3::from_shape_simple_fn((k, h, w), || r.gen_range(0.0..1.0));
        let up = upsample_maps(&ActivationMaps(p.clone()), h * fh, w * fw).unwrap();
        for kk in 0..k {
            let src = p.index_axis(Axis(0), kk);
            let lo = src.fold(f64::INFINITY, |a, b| a.min(*b));
            let hi = src.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            for v in up.0.index_axis(Axis(0), kk) {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoder_outputs_are_unit_norm(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (matcher, book) = common::world(3);
        let img: Image = common::random_image(&mut r, 8, 8);
        let v = matcher.encode_image(&img).unwrap();
        prop_assert!((v.norm() - 1.0).abs() <= 1e-6);
        for p in book.object_prompts() {
            prop_assert!((matcher.encode_text(p).unwrap().norm() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zeroing_a_concept_never_raises_its_similarity(seed in any::<u64>(), c in 0usize..6) {
        let mut r = common::rng(seed);
        let (matcher, _) = common::world(3);
        let img = common::random_image(&mut r, 8, 8);
        let name = common::COLORS[c].0;
        let text = matcher.concept_vector(matcher.concept_index(name).unwrap());
        let before = cosine_similarity(&matcher.encode_image(&img).unwrap().0, &text.0).unwrap();
        // Zero the pixels whose dominant concept is `c`.
        let mut px = img.as_array().clone();
        for mut lane in px.lanes_mut(Axis(2)) {
            let one = Image::filled(8, 8, [lane[0], lane[1], lane[2]]);
            let cov = matcher.coverage(&one);
            let top = (0..cov.len()).max_by(|a, b| cov[*a].total_cmp(&cov[*b])).unwrap();
            if top == c {
                lane.fill(0.0);
            }
        }
        let after = cosine_similarity(&matcher.encode_image(&Image::new(px).unwrap()).unwrap().0, &text.0).unwrap();
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }

    #[test]
    fn generated_labels_agree_with_masks(index in 0u64..10_000) {
        let spec = SceneSpec::default_spec();
        let scene = generate_scene(&spec, index).unwrap();
        for k in 0..scene.labels.num_classes() {
            let present = scene.gt_mask.iter().any(|v| *v as usize == k + 1);
            prop_assert_eq!(scene.labels.is_set(k), present);
        }
        let frac = scene.gt_mask.iter().filter(|v| **v > 0).count() as f64 / scene.gt_mask.len() as f64;
        if scene.labels.any() {
            prop_assert!(frac >= spec.object_fraction[0] && frac <= spec.object_fraction[1]);
        } else {
            prop_assert_eq!(frac, 0.0);
        }
    }
}

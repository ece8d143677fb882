use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth_data::{generate_dataset, toy_specs, BoxAnnotation, Image};

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        image_size: (16, 16),
        num_classes: 2,
        g1_channels: [2, 3, 3],
        g2_channels: [3, 4, 4],
        rpn_channels: 3,
        roi_hidden: 4,
        roi_pool: 2,
        roi_samples: 1,
        anchor_scales: vec![8.0, 16.0],
        rpn_batch: 8,
        roi_batch: 6,
        train_proposals: 6,
        test_proposals: 6,
        ..DetectorConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageSample {
    let data = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
    ImageSample {
        pixels: Image {
            height: h,
            width: w,
            data,
        },
        domain_id: 0,
        boxes: vec![],
        sample_id: "r".into(),
    }
}

fn random_gt(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> Vec<BoxAnnotation> {
    (0..rng.gen_range(0..3))
        .map(|_| {
            let s = rng.gen_range(4.0..(h.min(w) as f64 * 0.8));
            let x = rng.gen_range(0.0..(w as f64 - s));
            let y = rng.gen_range(0.0..(h as f64 - s));
            BoxAnnotation {
                class_id: rng.gen_range(0..classes),
                bbox: BBox::new(x, y, x + s, y + s),
            }
        })
        .collect()
}

/// Direct-sum 3x3 / 1x1 convolution with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[o, oh, ow]);
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out.data_mut()[(oc * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

fn relu(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
    t
}

#[test]
fn low_level_features_match_direct_convolution() {
    let det = SpindleDetector::new(tiny_config(), 2, true, 5, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for img in [random_image(&mut rng, 16, 16), {
        let mut z = random_image(&mut rng, 16, 16);
        z.pixels.data.iter_mut().for_each(|v| *v = 0.0);
        z
    }] {
        let mut h = input_tensor(&img);
        for (name, stride) in [("conv1", 1), ("conv2", 2), ("conv3", 2)] {
            let w = det.g1.get(&format!("{name}/w")).unwrap();
            let b = det.g1.get(&format!("{name}/b")).unwrap();
            h = relu(naive_conv(&h, w, b, stride, 1));
        }
        let got = det.extract_low(&img).unwrap();
        assert_eq!(got.stride, LOW_STRIDE);
        assert_eq!(got.activations.shape(), &[3, 4, 4]);
        assert!(got.activations.max_abs_diff(&h) < 1e-12);
    }
}

#[test]
fn extraction_is_deterministic_and_checks_size() {
    let det = SpindleDetector::new(tiny_config(), 1, false, 5, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 16, 16);
    assert_eq!(det.extract_low(&img).unwrap(), det.extract_low(&img).unwrap());
    let wrong = random_image(&mut rng, 16, 24);
    assert!(matches!(det.extract_low(&wrong), Err(DmsnError::Precondition(_))));
    let high = det.extract_high(0, &det.extract_low(&img).unwrap()).unwrap();
    assert_eq!(high.activations.shape(), &[4, 2, 2]);
    assert_eq!(high.stride, HIGH_STRIDE);
    assert!(matches!(
        det.extract_high(1, &det.extract_low(&img).unwrap()),
        Err(DmsnError::UnknownBranch { branch: 1, available: 1 })
    ));
}

#[test]
fn branch_initialisation_shared_or_distinct() {
    let shared = SpindleDetector::new(tiny_config(), 3, true, 9, true).unwrap();
    assert_eq!(shared.num_branches(), 4);
    assert_eq!(shared.pseudo_id(), Some(3));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let low = shared.extract_low(&random_image(&mut rng, 16, 16)).unwrap();
    let h0 = shared.extract_high(0, &low).unwrap();
    for b in 1..4 {
        assert_eq!(shared.branches[b], shared.branches[0]);
        assert_eq!(shared.extract_high(b, &low).unwrap(), h0);
    }
    let distinct = SpindleDetector::new(tiny_config(), 2, false, 9, false).unwrap();
    assert_ne!(distinct.branches[0], distinct.branches[1]);
}

#[test]
fn proposals_are_ranked_padded_and_clipped() {
    let det = SpindleDetector::new(DetectorConfig::default(), 1, false, 4, true).unwrap();
    let specs: Vec<_> = toy_specs(1).into_iter().take(1).collect();
    let data = generate_dataset(&specs, 1).unwrap();
    let low = det.extract_low(&data.domains[&0][0]).unwrap();
    let high = det.extract_high(0, &low).unwrap();
    let props = det.rpn_forward(0, &high, 256).unwrap();
    assert_eq!(props.len(), 256);
    for (i, p) in props.iter().enumerate() {
        assert_eq!(p.rank, i + 1);
        assert!(p.bbox.inside(64.0, 64.0));
        assert!((0.0..=1.0).contains(&p.probability()));
    }
    for w in props.windows(2) {
        assert!(w[0].objectness >= w[1].objectness);
    }
    // 192 anchors, so the tail repeats the last survivor
    let n = distinct_prefix(&props).len();
    assert!(n < 192);
    assert!(props[n..].iter().all(|p| *p == Proposal { rank: p.rank, ..props[n - 1] }));
    assert!(det.rpn_forward(0, &high, 0).is_err());
}

#[test]
fn equal_scores_keep_anchor_order() {
    let config = DetectorConfig::default();
    let anchors = Anchors::new(&config);
    let (h, w) = (anchors.height, anchors.width);
    let obj = Tensor::zeros(&[3, h, w]);
    let deltas = Tensor::zeros(&[12, h, w]);
    let props = decode_proposals(&config, &anchors, &obj, &deltas, 10).unwrap();
    // ties resolve by index, so the first anchor always leads
    assert_eq!(props[0].anchor, 0);
    let kept: Vec<usize> = props.iter().map(|p| p.anchor).collect();
    let mut sorted = distinct_prefix(&props).iter().map(|p| p.anchor).collect::<Vec<_>>();
    sorted.sort_unstable();
    assert_eq!(&kept[..sorted.len()], sorted.as_slice());
}

#[test]
fn feature_map_too_small_is_a_shape_error() {
    let det = SpindleDetector::new(DetectorConfig::default(), 1, false, 4, true).unwrap();
    let fm = FeatureMap {
        activations: Tensor::zeros(&[48, 0, 0]),
        stride: HIGH_STRIDE,
    };
    assert!(matches!(det.rpn_forward(0, &fm, 4), Err(DmsnError::Shape(_))));
    let mut tiny = DetectorConfig::default();
    tiny.image_size = (4, 4);
    assert!(SpindleDetector::new(tiny, 1, false, 0, true).is_err());
}

#[test]
fn roi_scores_are_distributions() {
    let det = SpindleDetector::new(tiny_config(), 1, false, 4, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let low = det.extract_low(&random_image(&mut rng, 16, 16)).unwrap();
    let out = det.branch_outputs(0, &low, 6).unwrap();
    for s in &out.class_scores {
        assert_eq!(s.len(), 3);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let degenerate = Proposal {
        bbox: BBox::new(3.0, 3.0, 3.0, 9.0),
        objectness: 0.0,
        rank: 1,
        anchor: 0,
    };
    let (s, d) = det.roi_head(0, &out.high_feature, &[degenerate]).unwrap();
    assert_eq!(s[0], vec![1.0, 0.0, 0.0]);
    assert!(d[0].iter().all(|v| *v == 0.0));
    assert!(det.roi_head(0, &out.high_feature, &[]).is_err());
}

fn plain_pass(det: &SpindleDetector, img: &ImageSample, plan: Option<&TrainingPlan>) -> (Tape, SupervisedPass) {
    let mut tape = Tape::new();
    let x = tape.constant(input_tensor(img));
    let low = g1_forward(&mut tape, Binding::trainable(&det.g1, "g1/"), x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = supervised_pass(
        &mut tape,
        &det.config,
        det.anchors(),
        Binding::trainable(&det.branches[0], "b0/"),
        low,
        &img.boxes,
        &mut rng,
        plan,
    );
    (tape, pass)
}

#[test]
fn matched_boxes_with_zero_offsets_have_zero_regression_loss() {
    let mut det = SpindleDetector::new(tiny_config(), 1, false, 4, true).unwrap();
    for key in ["rpn/delta/w", "rpn/delta/b", "roi/bbox/w", "roi/bbox/b"] {
        det.branches[0].get_mut(key).unwrap().scale_assign(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut img = random_image(&mut rng, 16, 16);
    // the gt box coincides with anchor 1 (16x16 at cell (0,0))
    let a = det.anchors().boxes[1];
    img.boxes = vec![BoxAnnotation { class_id: 1, bbox: a }];
    let plan = TrainingPlan {
        rpn: vec![RpnSample {
            anchor: 1,
            positive: true,
            target: a.encode(&a),
        }],
        rois: vec![RoiSample {
            bbox: a,
            label: 2,
            target: [0.0; 4],
        }],
    };
    let (tape, pass) = plain_pass(&det, &img, Some(&plan));
    let l = DetLoss::read(&tape, &pass.loss);
    assert_eq!(l.rpn_reg, 0.0);
    assert_eq!(l.rcnn_reg, 0.0);
    assert!(l.rpn_cls > 0.0 && l.rcnn_cls > 0.0);
}

#[test]
fn background_only_image_matches_cross_entropy_oracle() {
    let det = SpindleDetector::new(tiny_config(), 1, false, 4, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random_image(&mut rng, 16, 16);
    let (tape, pass) = plain_pass(&det, &img, None);
    assert!(pass.plan.rpn.iter().all(|s| !s.positive));
    assert!(pass.plan.rois.iter().all(|r| r.label == 0));
    let props: Vec<Proposal> = pass
        .plan
        .rois
        .iter()
        .map(|r| Proposal {
            bbox: r.bbox,
            objectness: 0.0,
            rank: 1,
            anchor: 0,
        })
        .collect();
    let low = det.extract_low(&img).unwrap();
    let high = det.extract_high(0, &low).unwrap();
    let (scores, _) = det.roi_head(0, &high, &props).unwrap();
    let want = scores.iter().map(|s| -s[0].ln()).sum::<f64>() / scores.len() as f64;
    let l = DetLoss::read(&tape, &pass.loss);
    assert!((l.rcnn_cls - want).abs() < 1e-9, "{} vs {want}", l.rcnn_cls);
    assert_eq!(l.rcnn_reg, 0.0);
    assert_eq!(l.rpn_reg, 0.0);
}

/// Loss of the two-image micro-batch with frozen plans, as a function of
/// the detector parameters.
fn micro_batch_loss(det: &SpindleDetector, imgs: &[ImageSample], plans: &[TrainingPlan]) -> (Tape, Var) {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for (img, plan) in imgs.iter().zip(plans) {
        let x = tape.constant(input_tensor(img));
        let low = g1_forward(&mut tape, Binding::trainable(&det.g1, "g1/"), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = supervised_pass(
            &mut tape,
            &det.config,
            det.anchors(),
            Binding::trainable(&det.branches[0], "b0/"),
            low,
            &img.boxes,
            &mut rng,
            Some(plan),
        );
        terms.push((pass.loss.total, 1.0 / imgs.len() as f64));
    }
    let root = tape.weighted_sum(&terms);
    (tape, root)
}

#[test]
fn detection_loss_gradient_matches_finite_differences() {
    let mut det = SpindleDetector::new(tiny_config(), 1, false, 21, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // nonzero biases so no unit sits exactly on a relu kink
    for set in std::iter::once(&mut det.g1).chain(det.branches.iter_mut()) {
        for (_, t) in set.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let imgs: Vec<ImageSample> = (0..2)
        .map(|_| {
            let mut im = random_image(&mut rng, 16, 16);
            im.boxes = vec![BoxAnnotation {
                class_id: 1,
                bbox: BBox::new(2.0, 3.0, 11.0, 13.0),
            }];
            im
        })
        .collect();
    let plans: Vec<TrainingPlan> = imgs.iter().map(|im| plain_pass(&det, im, None).1.plan).collect();
    assert!(plans.iter().all(|p| p.rpn.iter().any(|s| s.positive)));
    assert!(plans.iter().all(|p| p.rois.iter().any(|r| r.label > 0)));
    let (tape, root) = micro_batch_loss(&det, &imgs, &plans);
    let grads = tape.backward(root).into_param_grads();

    let eps = 1e-6;
    let mut checked = 0;
    for (prefix, which) in [("g1/", None), ("b0/", Some(0usize))] {
        let keys: Vec<String> = match which {
            None => det.g1.keys().cloned().collect(),
            Some(b) => det.branches[b].keys().cloned().collect(),
        };
        for key in keys {
            let n = match which {
                None => det.g1.get(&key).unwrap().numel(),
                Some(b) => det.branches[b].get(&key).unwrap().numel(),
            };
            let analytic = grads.get(&format!("{prefix}{key}")).cloned();
            for i in 0..n {
                let eval = |delta: f64| {
                    let mut d = det.clone();
                    let set = match which {
                        None => &mut d.g1,
                        Some(b) => &mut d.branches[b],
                    };
                    set.get_mut(&key).unwrap().data_mut()[i] += delta;
                    let (t, r) = micro_batch_loss(&d, &imgs, &plans);
                    t.value(r).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
                let tol = 1e-3 * a.abs().max(numeric.abs()).max(1e-4);
                assert!((a - numeric).abs() <= tol, "{prefix}{key}[{i}]: analytic {a} numeric {numeric}");
                checked += 1;
            }
        }
    }
    assert!(checked > 300);
}

#[test]
fn branch_loss_leaves_other_branches_untouched() {
    let det = SpindleDetector::new(tiny_config(), 2, true, 4, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut img = random_image(&mut rng, 16, 16);
    img.boxes = random_gt(&mut rng, 16, 16, 2);
    let mut tape = Tape::new();
    let x = tape.constant(input_tensor(&img));
    let low = g1_forward(&mut tape, Binding::trainable(&det.g1, "g1/"), x);
    let mut prng = ChaCha8Rng::seed_from_u64(0);
    let pass = supervised_pass(
        &mut tape,
        &det.config,
        det.anchors(),
        Binding::trainable(&det.branches[0], "b0/"),
        low,
        &img.boxes,
        &mut prng,
        None,
    );
    // other branches are on the tape but outside the loss
    let _ = g2_forward(&mut tape, Binding::trainable(&det.branches[1], "b1/"), low);
    let _ = g2_forward(&mut tape, Binding::frozen(&det.branches[2]), low);
    let grads = tape.backward(pass.loss.total).into_param_grads();
    assert!(grads.keys().any(|k| k.starts_with("g1/")));
    assert!(grads.keys().any(|k| k.starts_with("b0/")));
    assert!(!grads.keys().any(|k| k.starts_with("b1/")));
    assert!(grads.keys().all(|k| k.starts_with("g1/") || k.starts_with("b0/")));
}

#[test]
fn losses_stay_finite_on_random_inputs() {
    let det = SpindleDetector::new(tiny_config(), 1, false, 4, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let mut img = random_image(&mut rng, 16, 16);
        img.boxes = random_gt(&mut rng, 16, 16, 2);
        let (tape, pass) = plain_pass(&det, &img, None);
        let l = DetLoss::read(&tape, &pass.loss);
        for v in [l.rpn_cls, l.rpn_reg, l.rcnn_cls, l.rcnn_reg] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn overfits_five_images() {
    let mut specs: Vec<_> = toy_specs(5).into_iter().take(1).collect();
    specs[0].image_size = (32, 32);
    specs[0].objects_per_image = (1, 1);
    specs[0].object_size = (10.0, 16.0);
    let data = generate_dataset(&specs, 3).unwrap();
    let imgs = &data.domains[&0];
    let config = DetectorConfig {
        image_size: (32, 32),
        ..DetectorConfig::default()
    };
    let mut det = SpindleDetector::new(config, 1, false, 2, true).unwrap();
    let lr = 0.01;
    let mut vel: std::collections::BTreeMap<String, Tensor> = Default::default();
    for step in 0..300 {
        let img = &imgs[step % imgs.len()];
        let mut tape = Tape::new();
        let x = tape.constant(input_tensor(img));
        let low = g1_forward(&mut tape, Binding::trainable(&det.g1, "g1/"), x);
        let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
        let pass = supervised_pass(
            &mut tape,
            &det.config,
            det.anchors(),
            Binding::trainable(&det.branches[0], "b0/"),
            low,
            &img.boxes,
            &mut rng,
            None,
        );
        let grads = tape.backward(pass.loss.total).into_param_grads();
        for (k, g) in grads {
            let v = vel.entry(k.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            v.scale_assign(0.9);
            v.add_assign(&g);
            let (set, key) = match k.strip_prefix("g1/") {
                Some(key) => (&mut det.g1, key),
                None => (&mut det.branches[0], k.strip_prefix("b0/").unwrap()),
            };
            let p = set.get_mut(key).unwrap();
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= lr * vv;
            }
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for img in imgs {
        let low = det.extract_low(img).unwrap();
        let high = det.extract_high(0, &low).unwrap();
        let props: Vec<Proposal> = img
            .boxes
            .iter()
            .map(|b| Proposal {
                bbox: b.bbox,
                objectness: 0.0,
                rank: 1,
                anchor: 0,
            })
            .collect();
        let (scores, _) = det.roi_head(0, &high, &props).unwrap();
        for (s, b) in scores.iter().zip(&img.boxes) {
            let arg = (0..s.len()).max_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap();
            correct += usize::from(arg == b.class_id + 1);
            total += 1;
        }
    }
    assert!(correct as f64 / total as f64 >= 0.9, "{correct}/{total}");
}

use super::*;
use crate::detector::DetectorConfig;

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        phase2_start_epoch: 1,
        lr: 0.01,
        n_proposals: 32,
        lmb_capacity: 4,
        max_steps_per_epoch: 3,
        synthetic_images: 3,
        synthetic_test_images: 2,
        probe_every: 2,
        probe_images: 1,
        low_disc_hidden: 4,
        high_disc_hidden: 4,
        detector: DetectorConfig {
            g1_channels: [4, 6, 6],
            g2_channels: [6, 8, 8],
            rpn_channels: 6,
            roi_hidden: 8,
            rpn_batch: 16,
            roi_batch: 8,
            train_proposals: 32,
            test_proposals: 32,
            ..DetectorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn setup(c: &TrainConfig) -> (TrainState, TrainData) {
    let data = TrainData::load(c).unwrap();
    (TrainState::new(c, data.steps_per_epoch()).unwrap(), data)
}

fn steps(state: &mut TrainState, data: &TrainData, n: usize) -> Vec<StepRecord> {
    run_steps(state, data, n, None).unwrap()
}

fn max_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((ka, ta), (kb, tb))| {
            assert_eq!(ka, kb);
            ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn zero_lambda_matches_plain_detection() {
    let base = TrainConfig {
        pseudo_subnet: false,
        probe_every: 0,
        ..small()
    };
    let (mut a, data) = setup(&TrainConfig {
        lambda_tradeoff: 0.0,
        ..base.clone()
    });
    let (mut b, _) = setup(&TrainConfig {
        alignment: false,
        ..base
    });
    let ra = steps(&mut a, &data, 3);
    let rb = steps(&mut b, &data, 3);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.det, y.det);
        assert_eq!(x.total, y.total);
    }
    assert!(max_diff(&a.detector.g1, &b.detector.g1) < 1e-12);
    for i in 0..2 {
        assert!(max_diff(&a.detector.branches[i], &b.detector.branches[i]) < 1e-12);
    }
}

#[test]
fn phase_one_leaves_pseudo_branch_alone() {
    let (mut s, data) = setup(&small());
    let pid = s.detector.pseudo_id().unwrap();
    let before = s.detector.branches[pid].clone();
    let g1_before = s.detector.g1.clone();
    let recs = steps(&mut s, &data, 2);
    assert!(recs.iter().all(|r| r.phase == 1 && r.ema_residual.is_none()));
    assert_eq!(s.detector.branches[pid], before);
    assert!(max_diff(&s.detector.g1, &g1_before) > 0.0);
    assert!(s.velocity.keys().all(|k| !k.starts_with(&format!("branch{pid}/"))));
}

#[test]
fn logged_parts_recompose_total() {
    let c = TrainConfig {
        lambda_tradeoff: 0.7,
        ..small()
    };
    let (mut s, data) = setup(&c);
    let recs = steps(&mut s, &data, 5);
    assert!(recs.iter().any(|r| r.phase == 2 && r.con_surrogate > 0.0));
    for r in &recs {
        assert!(!r.faulted);
        assert_eq!(r.high.len(), 2);
        let re = r.recompose(0.7);
        assert!((re - r.total).abs() <= 1e-6 * r.total.abs().max(1e-12), "{re} vs {}", r.total);
    }
    // the bank fills in both phases
    assert_eq!(s.lmb.len(0), 4);
}

#[test]
fn first_phase_two_step_initialises_pseudo() {
    let c = TrainConfig {
        lr: 0.0,
        phase2_start_epoch: 0,
        alignment: false,
        ..small()
    };
    let (mut s, data) = setup(&c);
    let pid = s.detector.pseudo_id().unwrap();
    assert!(!s.pseudo_initialized);
    let r = &steps(&mut s, &data, 1)[0];
    assert_eq!(r.phase, 2);
    assert!(s.pseudo_initialized);
    assert!(r.beta_fallback);
    assert!(r.ema_residual.unwrap() < 1e-12);
    let sets: Vec<&ParamSet> = s.detector.branches[..2].iter().collect();
    let avg = init_pseudo(&sets, &[0.5, 0.5]).unwrap();
    assert!(max_diff(&avg, &s.detector.branches[pid]) < 1e-12);
}

#[test]
fn ema_residual_decays_geometrically() {
    let c = TrainConfig {
        lr: 0.0,
        phase2_start_epoch: 0,
        alignment: false,
        alpha_ema: 0.9,
        max_steps_per_epoch: 6,
        ..small()
    };
    let (mut s, data) = setup(&c);
    let pid = s.detector.pseudo_id().unwrap();
    for (_, t) in s.detector.branches[pid].iter_mut() {
        for v in t.data_mut() {
            *v += 0.5;
        }
    }
    s.pseudo_initialized = true;
    let sets: Vec<&ParamSet> = s.detector.branches[..2].iter().collect();
    let r0 = residual_norm(&s.detector.branches[pid], &sets, &[0.5, 0.5]).unwrap();
    assert!(r0 > 0.0);
    for (k, r) in steps(&mut s, &data, 6).iter().enumerate() {
        let expect = r0 * 0.9f64.powi(k as i32 + 1);
        assert!((r.ema_residual.unwrap() - expect).abs() <= 1e-9 * r0, "step {k}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (mut a, data) = setup(&small());
    let (mut b, _) = setup(&small());
    let ra = steps(&mut a, &data, 4);
    let rb = steps(&mut b, &data, 4);
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    let (mut c, _) = setup(&TrainConfig { seed: 1, ..small() });
    steps(&mut c, &data, 1);
    assert_ne!(c.detector.g1, a.detector.g1);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, data) = setup(&small());
    steps(&mut a, &data, 4);
    let path = dir.path().join("mid.dmsn");
    let sha = save_checkpoint(&a, &path).unwrap();
    assert_eq!(sha, file_sha256(&path).unwrap());
    let mut b = load_checkpoint(&path).unwrap();
    assert_eq!(a, b);
    let ra = steps(&mut a, &data, 2);
    let rb = steps(&mut b, &data, 2);
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = setup(&small());
    let path = dir.path().join("c.dmsn");
    save_checkpoint(&s, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 3] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(DmsnError::Corrupt { .. })));

    std::fs::write(&path, &bytes[..n - 8]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(DmsnError::Corrupt { .. })));
}

#[test]
fn full_run_and_resume_from_epoch_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = small();
    let full = dir.path().join("full");
    let s = run_training(&c, &full, None).unwrap();
    assert_eq!(s.status, "ok");
    assert_eq!(s.epoch_phases, vec![1, 2]);
    assert_eq!(s.steps, 6);
    assert_eq!(s.final_lr, c.lr_at(5, 6));
    assert_eq!(s.probe.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert!(full.join("checkpoint_epoch001.dmsn").exists());
    let log = std::fs::read_to_string(full.join(run::LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 7);

    let resumed = dir.path().join("resumed");
    let r = run_training(&c, &resumed, Some(&full.join("checkpoint_epoch001.dmsn"))).unwrap();
    assert_eq!(r.final_checkpoint_sha256, s.final_checkpoint_sha256);

    let other = TrainConfig { lr: 0.02, ..small() };
    assert!(run_training(&other, &dir.path().join("x"), Some(&full.join("checkpoint_epoch001.dmsn"))).is_err());
}

#[test]
fn per_epoch_weights_hold_within_an_epoch() {
    let c = TrainConfig {
        beta_per_epoch: true,
        lmb_capacity: 2,
        probe_every: 0,
        ..small()
    };
    let (mut s, data) = setup(&c);
    let recs = steps(&mut s, &data, 6);
    assert!(recs[3..].iter().all(|r| r.phase == 2 && r.beta == recs[3].beta));
    let (mut t, _) = setup(&TrainConfig {
        beta_per_epoch: false,
        ..c
    });
    let per_step = steps(&mut t, &data, 6);
    assert_eq!(per_step[3].beta, recs[3].beta);
    assert_ne!(per_step[5].beta, recs[5].beta);
}

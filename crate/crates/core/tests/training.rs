//! Trainer behaviour on a tiny scene.

use anr_core::parallel;
use anr_core::scene::{generate_sequence, SceneConfig, SyntheticSequence};
use anr_core::training::{Checkpoint, IdentityData, StepKind, TrainConfig, Trainer, Variant};
use anr_core::Error;

fn scene(segments: usize, seed: u64) -> SyntheticSequence {
    let cfg = SceneConfig {
        frames: 12,
        train_frames: 10,
        resolution: 32,
        segments,
        subdivisions: 6,
        ..SceneConfig::default()
    };
    generate_sequence(&cfg, seed).unwrap()
}

fn tiny(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig {
        steps: 8,
        texture_width: 16,
        texture_height: 16,
        keyframe_fraction: 0.1,
        ..TrainConfig::default()
    }
    .with_variant(variant);
    c.renderer.depth = 2;
    c.renderer.base_channels = 4;
    c.renderer.max_channels = 8;
    c.disc_width = 4;
    c
}

fn one(variant: Variant) -> Trainer {
    Trainer::new(tiny(variant), vec![IdentityData::new("a", scene(3, 1)).unwrap()]).unwrap()
}

fn bytes(t: &Trainer) -> Vec<u8> {
    t.to_checkpoint().to_bytes().unwrap()
}

#[test]
fn renderer_steps_freeze_the_texture_and_keyframe_steps_move_it() {
    parallel::set_sequential(true);
    for variant in [Variant::Full, Variant::TwoStageNoSplit] {
        let mut t = one(variant);
        let mut seen = [0usize; 3];
        for _ in 0..6 {
            let plan = t.plan_step();
            let before = t.textures[plan.identity].fingerprint();
            t.execute(&plan).unwrap();
            let after = t.textures[plan.identity].fingerprint();
            match plan.kind {
                StepKind::Renderer => {
                    seen[0] += 1;
                    assert_eq!(before, after, "renderer-only step touched the texture");
                }
                StepKind::Keyframe => {
                    seen[1] += 1;
                    assert!(plan.frames.iter().all(|f| t.keyframes[plan.identity].contains(*f)));
                    assert_ne!(before, after);
                }
                StepKind::Joint => {
                    seen[2] += 1;
                    assert_ne!(before, after);
                }
            }
        }
        match variant {
            Variant::Full => assert!(seen[0] > 0 && seen[1] > 0 && seen[2] == 0),
            _ => assert_eq!(seen, [0, 0, 6]),
        }
    }
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    parallel::set_sequential(true);
    let mut t = one(Variant::Full);
    t.run(Some(3), |_, _| Ok(())).unwrap();
    let a = bytes(&t);
    let ckpt = Checkpoint::from_bytes(&a).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), a);
    let restored = Trainer::from_checkpoint(&ckpt, vec![IdentityData::new("a", scene(3, 1)).unwrap()]).unwrap();
    assert_eq!(bytes(&restored), a);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.anr");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), a);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), a);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    parallel::set_sequential(true);
    let mut straight = one(Variant::Full);
    straight.run(None, |_, _| Ok(())).unwrap();

    let mut first = one(Variant::Full);
    first.run(Some(3), |_, _| Ok(())).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes(&first)).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&ckpt, vec![IdentityData::new("a", scene(3, 1)).unwrap()]).unwrap();
    resumed.run(None, |_, _| Ok(())).unwrap();

    assert_eq!(resumed.step, 8);
    assert_eq!(bytes(&resumed), bytes(&straight));
}

#[test]
fn parallel_and_sequential_runs_agree() {
    parallel::set_sequential(true);
    let mut a = one(Variant::TwoStageNoSplit);
    a.run(Some(3), |_, _| Ok(())).unwrap();
    parallel::set_sequential(false);
    let mut b = one(Variant::TwoStageNoSplit);
    b.run(Some(3), |_, _| Ok(())).unwrap();
    parallel::set_sequential(true);
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn identities_are_drawn_uniformly() {
    let data = vec![
        IdentityData::new("a", scene(3, 1)).unwrap(),
        IdentityData::new("b", scene(3, 2)).unwrap(),
    ];
    let mut t = Trainer::new(tiny(Variant::Full), data).unwrap();
    let n = 4000;
    let hits = (0..n).filter(|_| t.plan_step().identity == 0).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((hits - n as f64 / 2.0).abs() < 3.0 * sigma, "{hits} of {n}");
}

#[test]
fn two_identities_share_one_renderer() {
    parallel::set_sequential(true);
    let data = vec![
        IdentityData::new("a", scene(3, 1)).unwrap(),
        IdentityData::new("b", scene(3, 2)).unwrap(),
    ];
    let mut t = Trainer::new(tiny(Variant::Full), data).unwrap();
    t.run(Some(4), |_, _| Ok(())).unwrap();
    let ckpt = t.to_checkpoint();
    assert_eq!(ckpt.identity_ids(), vec!["a", "b"]);
    assert_eq!(ckpt.keyframes.len(), 2);
    let textures = ckpt.arrays.iter().filter(|(n, _)| n.starts_with("texture/")).count();
    assert_eq!(textures, 2);
    let renderer = ckpt.arrays.iter().filter(|(n, _)| n.starts_with("renderer/")).count();
    assert_eq!(renderer, t.renderer.params.len());

    let dup = vec![
        IdentityData::new("a", scene(3, 1)).unwrap(),
        IdentityData::new("a", scene(3, 2)).unwrap(),
    ];
    assert!(Trainer::new(tiny(Variant::Full), dup).is_err());
}

#[test]
fn keyframes_stay_within_ten_percent() {
    let t = one(Variant::Full);
    let train = t.data()[0].train_frames().len();
    let k = t.keyframes[0].frame_indices.len();
    assert!(k >= 1 && k as f64 <= 0.1 * train as f64 + 1e-9, "{k} of {train}");
}

#[test]
fn mismatched_meshes_are_rejected() {
    let data = vec![
        IdentityData::new("a", scene(3, 1)).unwrap(),
        IdentityData::new("b", scene(2, 1)).unwrap(),
    ];
    assert!(Trainer::new(tiny(Variant::Full), data).is_err());
}

#[test]
fn non_finite_loss_aborts_without_touching_state() {
    parallel::set_sequential(true);
    let mut t = one(Variant::Full);
    t.run(Some(2), |_, _| Ok(())).unwrap();
    t.textures[0].data.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    let plan = t.plan_step();
    let before = bytes(&t);
    match t.execute(&plan) {
        Err(Error::NumericalAbort { term, step }) => {
            assert_eq!(step, 2);
            assert!(!term.is_empty());
        }
        other => panic!("expected a numerical abort, got {other:?}"),
    }
    assert_eq!(bytes(&t), before);
}

#[test]
fn training_lowers_the_loss() {
    parallel::set_sequential(true);
    let mut cfg = tiny(Variant::TwoStageNoSplit);
    cfg.steps = 60;
    cfg.lr_renderer = 1e-3;
    let mut t = Trainer::new(cfg, vec![IdentityData::new("a", scene(3, 1)).unwrap()]).unwrap();
    let mut pixel = Vec::new();
    t.run(None, |_, r| {
        pixel.push(r.terms.pixel);
        Ok(())
    })
    .unwrap();
    let head: f64 = pixel[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = pixel[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "pixel loss {head} -> {tail}");
}

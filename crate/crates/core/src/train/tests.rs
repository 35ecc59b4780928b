use super::*;
use crate::data::{synth_dataset, Scene, SceneOptions};
use crate::param::Module;

fn tiny() -> Config {
    let mut c = Config::desk();
    c.model.d = 8;
    c.model.heads = 2;
    c.model.window = 2;
    c.model.neighbors = 1;
    c.model.blocks_per_stage = 1;
    c.model.recon_blocks = 1;
    c.train.crop = 16;
    c.train.seed = 3;
    c.data.height = 20;
    c.data.width = 20;
    c.data.blur_frames = 3;
    c
}

fn clips(c: &Config, n: usize) -> Vec<FramesClip> {
    synth_dataset(
        11,
        n,
        c.data.height,
        c.data.width,
        c.model.neighbors,
        c.data.blur_frames,
        &SceneOptions::default(),
    )
    .unwrap()
}

fn bits(trace: &[StepLoss]) -> Vec<u64> {
    trace.iter().map(|s| s.total.to_bits()).collect()
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let mut c = tiny();
    c.train.steps = 0;
    let (ckpt, trace) = train_loop(&c, &clips(&c, 1)).unwrap();
    assert!(trace.is_empty());
    assert_eq!(ckpt.step, 0);
    let fresh = Vdtr::new(&c.model, c.train.seed).unwrap();
    assert_eq!(ckpt.params, Checkpoint::records(&fresh));
}

#[test]
fn same_seed_gives_identical_traces() {
    let mut c = tiny();
    c.train.steps = 4;
    let data = clips(&c, 2);
    let (a, ta) = train_loop(&c, &data).unwrap();
    let (b, tb) = train_loop(&c, &data).unwrap();
    assert_eq!(bits(&ta), bits(&tb));
    assert_eq!(a.to_bytes(), b.to_bytes());
    c.train.seed = 4;
    let (_, tc) = train_loop(&c, &data).unwrap();
    assert_ne!(bits(&ta), bits(&tc));
}

#[test]
fn training_changes_parameters_and_moments() {
    let c = tiny();
    let data = clips(&c, 1);
    let mut t = Trainer::new(&c).unwrap();
    let before = Checkpoint::records(&t.model);
    t.run(&data, 2, |_| {}).unwrap();
    let after = Checkpoint::records(&t.model);
    assert_eq!(t.step_index(), 2);
    assert!(before.iter().zip(&after).any(|(a, b)| a.data != b.data));
    assert!(after.iter().all(|p| p.step_count == 2));
    assert!(after.iter().any(|p| p.adam_v.iter().any(|&v| v > 0.0)));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut c = tiny();
    c.train.steps = 2;
    let (ckpt, _) = train_loop(&c, &clips(&c, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.vdtc");
    let p2 = dir.path().join("b.vdtc");
    ckpt.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let model = loaded.model().unwrap();
    assert_eq!(Checkpoint::records(&model), ckpt.params);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let c = tiny();
    let bytes = Trainer::new(&c).unwrap().checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(_))
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(_))
    ));
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Io(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn mismatched_checkpoint_does_not_load_into_model() {
    let c = tiny();
    let mut ckpt = Trainer::new(&c).unwrap().checkpoint();
    ckpt.params[0].name.push('x');
    assert!(matches!(ckpt.model(), Err(Error::Contract(_))));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let c = tiny();
    let data = clips(&c, 3);
    let mut straight = Trainer::new(&c).unwrap();
    let full = straight.run(&data, 10, |_| {}).unwrap();

    let mut first = Trainer::new(&c).unwrap();
    let mut trace = first.run(&data, 5, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.vdtc");
    first.checkpoint().save(&p).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
    trace.extend(resumed.run(&data, 5, |_| {}).unwrap());

    assert_eq!(bits(&trace), bits(&full));
    assert_eq!(
        resumed.checkpoint().to_bytes(),
        straight.checkpoint().to_bytes()
    );
}

#[test]
fn non_finite_loss_aborts_with_preceding_state() {
    let c = tiny();
    let data = clips(&c, 2);
    let mut t = Trainer::new(&c).unwrap();
    t.run(&data, 1, |_| {}).unwrap();
    let n = t.model.reconstruction.to_rgb.bias.data().len();
    t.model
        .reconstruction
        .to_rgb
        .bias
        .set_data(vec![f64::NAN; n])
        .unwrap();
    let before = t.checkpoint();
    match t.train_step(&data) {
        Err(Error::NonFiniteLoss { step, last_good }) => {
            assert_eq!(step, 1);
            assert_eq!(last_good.to_bytes(), before.to_bytes());
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert_eq!(t.checkpoint().to_bytes(), before.to_bytes());
}

#[test]
fn fresh_model_scores_equal_the_blurry_baseline() {
    let c = tiny();
    let model = Vdtr::new(&c.model, 1).unwrap();
    let report = evaluate(&model, &clips(&c, 2)).unwrap();
    for m in &report.clips {
        assert_eq!(m.psnr, m.baseline_psnr);
        assert_eq!(m.ssim, m.baseline_ssim);
    }
    assert!(report.to_csv().starts_with("frame_index,psnr_db,ssim\n0,"));
    assert!(report.to_csv().lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn static_scene_hits_the_psnr_cap() {
    let c = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = SceneOptions {
        max_speed: 0,
        ..SceneOptions::default()
    };
    let clip = Scene::random(&mut rng, 20, 20, &opts)
        .clip(0, 3, 3)
        .unwrap();
    let model = Vdtr::new(&c.model, 1).unwrap();
    let report = evaluate(&model, &[clip]).unwrap();
    assert_eq!(report.clips[0].psnr, crate::metrics::PSNR_CAP_DB);
    assert_eq!(report.clips[0].ssim, 1.0);
}

#[test]
fn evaluation_checks_clip_geometry() {
    let c = tiny();
    let model = Vdtr::new(&c.model, 1).unwrap();
    let mut data = clips(&c, 1);
    data[0].blurry.pop();
    assert!(matches!(evaluate(&model, &data), Err(Error::Contract(_))));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut t = Trainer::new(&tiny()).unwrap();
    assert!(t.train_step(&[]).is_err());
    assert_eq!(
        t.model.num_parameters(),
        Trainer::new(&tiny()).unwrap().model.num_parameters()
    );
}

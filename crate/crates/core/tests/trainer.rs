use taskdecomp::checkpoint::Checkpoint;
use taskdecomp::losses::seg_loss;
use taskdecomp::optim::sgd_step;
use taskdecomp::synthdata::generate_samples;
use taskdecomp::trainer::{sample_loss, PhaseConfig};
use taskdecomp::{
    Error, Graph, LossWeights, ModelConfig, ProjectionMode, Sample, TaskDecompModel, TrainConfig, Trainer, WorldSpec,
};

fn world() -> WorldSpec {
    WorldSpec {
        height: 16,
        width: 16,
        size_range: (2, 4),
        ..WorldSpec::default()
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        hidden_units: 8,
        dilation_rates: vec![1, 2],
        image_size: (16, 16),
        ..ModelConfig::default()
    }
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    generate_samples(&world(), n, seed).unwrap()
}

fn cfg(phases: [(usize, f64, f64, f64); 3]) -> TrainConfig {
    TrainConfig {
        phases: phases.iter().map(|&(n, a, b, c)| PhaseConfig::new(n, a, b, c)).collect(),
        lr_schedule: vec![(0, 0.05), (4, 0.02)],
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn short() -> TrainConfig {
    cfg([(4, 1.0, 0.0, 0.0), (3, 1.0, 0.0, 1.0), (3, 1.0, 1.0, 1.0)])
}

#[test]
fn zero_iterations_change_nothing() {
    let train = data(4, 1);
    let model = TaskDecompModel::build(&model_cfg(), 0).unwrap();
    let mut t = Trainer::new(model.clone(), cfg([(0, 1.0, 0.0, 0.0), (0, 1.0, 0.0, 1.0), (0, 1.0, 1.0, 1.0)]), &train, None).unwrap();
    assert!(t.is_finished());
    assert!(t.step().unwrap().is_none());
    let (after, history) = t.into_parts();
    assert_eq!(after, model);
    assert!(history.losses.is_empty());
}

#[test]
fn runs_are_bit_identical() {
    let train = data(6, 2);
    let val = data(3, 3);
    let run = || {
        let model = TaskDecompModel::build(&model_cfg(), 1).unwrap();
        let mut c = short();
        c.eval_every = 2;
        taskdecomp::train(model, &train, Some(&val), &c).unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
    assert_eq!(h1.losses.len(), 10);
    assert_eq!(h1.evals.len(), 4);
    assert_eq!(h1.to_records(), h2.to_records());
}

#[test]
fn seg_only_phase_matches_plain_loop() {
    let train = data(2, 4);
    let mut c = cfg([(6, 0.0, 0.0, 0.0), (0, 1.0, 0.0, 1.0), (0, 1.0, 1.0, 1.0)]);
    c.augment = false;
    let model = TaskDecompModel::build(&model_cfg(), 2).unwrap();
    let (trained, history) = taskdecomp::train(model.clone(), &train, None, &c).unwrap();

    let mut m = model;
    for it in 0..6 {
        let mut losses = Vec::new();
        for s in &train {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &s.image).unwrap();
            let l = seg_loss(&mut g, out.seg_logits, &s.mask).unwrap();
            losses.push(g.value(l).item());
            g.backward(l, &mut m.params).unwrap();
        }
        for p in m.params.iter_mut() {
            p.grad.iter_mut().for_each(|v| *v *= 0.5);
        }
        sgd_step(&mut m.params, c.lr_at(0, it), c.momentum, c.weight_decay).unwrap();
        let rec = history.losses[it];
        assert_eq!(rec.total, rec.l_seg);
        assert!((rec.l_seg - 0.5 * (losses[0] + losses[1])).abs() < 1e-12);
    }
    assert_eq!(trained.params, m.params);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let train = data(6, 5);
    let model = TaskDecompModel::build(&model_cfg(), 3).unwrap();
    let (full, full_hist) = taskdecomp::train(model.clone(), &train, None, &short()).unwrap();

    for split in [2, 4, 7] {
        let mut t = Trainer::new(model.clone(), short(), &train, None).unwrap();
        t.run_steps(split).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let head = t.history().losses.clone();
        drop(t);

        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let fresh = TaskDecompModel::build(&model_cfg(), 99).unwrap();
        let mut t = Trainer::resume(fresh, short(), &train, None, &ckpt).unwrap();
        t.run().unwrap();
        let (resumed, tail) = t.into_parts();
        assert_eq!(resumed, full, "split {split}");
        let joined: Vec<_> = head.into_iter().chain(tail.losses).collect();
        assert_eq!(joined, full_hist.losses);
    }
}

#[test]
fn bad_checkpoints_are_rejected() {
    let train = data(4, 6);
    let model = TaskDecompModel::build(&model_cfg(), 4).unwrap();
    let mut t = Trainer::new(model.clone(), short(), &train, None).unwrap();
    t.run_steps(2).unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt { offset: 0, .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt { .. })));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Corrupt { .. })));

    let mut other = short();
    other.lr_schedule = vec![(0, 0.01)];
    assert!(matches!(
        Trainer::resume(model.clone(), other, &train, None, &ckpt),
        Err(Error::CheckpointMismatch(_))
    ));

    let wider = ModelConfig {
        base_channels: 3,
        ..model_cfg()
    };
    let mut m = TaskDecompModel::build(&wider, 0).unwrap();
    let err = ckpt.restore_into(&mut m).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)));
    assert!(err.to_string().contains("shape"), "{err}");
}

#[test]
fn checkpoint_file_round_trip() {
    let train = data(4, 7);
    let model = TaskDecompModel::build(&model_cfg(), 5).unwrap();
    let mut t = Trainer::new(model, short(), &train, None).unwrap();
    t.run_steps(5).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tdc");
    taskdecomp::checkpoint::save_checkpoint(&ckpt, &path).unwrap();
    let back = taskdecomp::checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!((back.phase, back.iteration), (1, 1));
    assert_eq!(&back.to_model().unwrap(), t.model());
}

#[test]
fn hard_sync_does_not_alter_seg_decoder_gradients() {
    let s = &data(1, 8)[0];
    let model = TaskDecompModel::build(&model_cfg(), 6).unwrap();
    let grads = |w: LossWeights| {
        let mut m = model.clone();
        let mut g = Graph::new();
        let l = sample_loss(&mut g, &m, &model.params, s, &w).unwrap();
        g.backward(l.total, &mut m.params).unwrap();
        m.seg_decoder_params().into_iter().map(|id| m.params.get(id).grad.clone()).collect::<Vec<_>>()
    };
    let base = grads(LossWeights::new(1.0, 0.0, 0.0));
    for w3 in [0.2, 1.0, 7.5] {
        assert_eq!(grads(LossWeights::new(1.0, 0.0, w3)), base);
    }
    let soft = grads(LossWeights::new(1.0, 0.0, 1.0).with_projection(ProjectionMode::Soft));
    assert_ne!(soft, base);
}

#[test]
fn history_follows_phase_schedule() {
    let train = data(4, 9);
    let mut c = TrainConfig {
        phases: vec![
            PhaseConfig::new(110, 0.4, 0.0, 0.0),
            PhaseConfig::new(105, 0.4, 0.0, 0.8),
            PhaseConfig::new(102, 0.4, 0.2, 0.8),
        ],
        batch_size: 1,
        ..TrainConfig::default()
    };
    c.augment = false;
    let model = TaskDecompModel::build(&model_cfg(), 7).unwrap();
    let (_, h) = taskdecomp::train(model, &train, None, &c).unwrap();
    assert_eq!(h.losses.len(), 317);
    for r in &h.losses {
        let expect_lr = match r.iteration {
            0..=49 => 1e-4,
            50..=99 => 5e-5,
            _ => 2e-5,
        };
        assert_eq!(r.lr, expect_lr, "{r:?}");
        let p = c.phases[r.phase - 1];
        assert_eq!((r.w1, r.w2, r.w3), (p.w1, p.w2, p.w3));
        let recomputed = r.l_seg + r.w1 * r.l_cla + r.w2 * r.l_scene + r.w3 * r.l_sync;
        assert!((r.total - recomputed).abs() < 1e-12);
    }
}

#[test]
fn loss_goes_down() {
    let train = data(32, 10);
    let c = TrainConfig {
        phases: vec![
            PhaseConfig::new(160, 1.0, 0.0, 0.0),
            PhaseConfig::new(0, 1.0, 0.0, 1.0),
            PhaseConfig::new(0, 1.0, 1.0, 1.0),
        ],
        lr_schedule: vec![(0, 0.05)],
        batch_size: 4,
        ..TrainConfig::default()
    };
    let model = TaskDecompModel::build(&ModelConfig { base_channels: 4, ..model_cfg() }, 8).unwrap();
    let (_, h) = taskdecomp::train(model, &train, None, &c).unwrap();
    let mean = |r: &[taskdecomp::HistoryRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&h.losses[..20]), mean(&h.losses[140..]));
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn non_finite_loss_aborts_before_update() {
    let train = data(4, 11);
    let mut model = TaskDecompModel::build(&model_cfg(), 9).unwrap();
    let id = *model.seg_decoder_params().last().unwrap();
    model.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model.clone(), short(), &train, None).unwrap();
    assert!(matches!(t.step(), Err(Error::NonFinite { .. })));
    let before: Vec<_> = model.params.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
    let after: Vec<_> = t.model().params.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
    assert_eq!(before, after);
    assert_eq!(t.state().iteration, 0);
}

#[test]
fn mismatched_data_is_rejected() {
    let big = generate_samples(&WorldSpec::default(), 2, 1).unwrap();
    let model = TaskDecompModel::build(&model_cfg(), 0).unwrap();
    assert!(Trainer::new(model.clone(), short(), &big, None).is_err());
    assert!(Trainer::new(model, short(), &[], None).is_err());
}

use lumiq::config::TrainConfig;
use lumiq::data::synth_dataset;
use lumiq::error::Error;
use lumiq::params::ParamSet;
use lumiq::train::{pretrain_vqgan, split_pairs, train_enhancer, Phase, Stage1Model, Stage2Model, Stage2Trainer};

fn tiny() -> TrainConfig {
    TrainConfig {
        seed: 3,
        batch_size: 2,
        crop_size: 16,
        stage1_iters: 6,
        stage2_iters: 6,
        codebook_size: 8,
        base_channels: 2,
        n_down: 2,
        code_dim: 4,
        light_dim: 4,
        n_prompts: 3,
        holdout: 2,
        ..TrainConfig::default()
    }
}

fn same(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| a.get(i) == b.get(i))
}

fn stage1(cfg: &TrainConfig) -> (Vec<lumiq::data::ImagePair>, Stage1Model) {
    let pairs = synth_dataset(11, 6, 16);
    let normals: Vec<_> = pairs.iter().map(|p| p.normal.clone()).collect();
    let (m, log) = pretrain_vqgan(&normals, cfg).unwrap();
    assert_eq!(log.len(), cfg.stage1_iters);
    (pairs, m)
}

#[test]
fn each_phase_touches_only_its_parameters() {
    let cfg = tiny();
    let (pairs, m1) = stage1(&cfg);
    let model = Stage2Model::from_stage1(&m1, &cfg).unwrap();
    let mut prev = model.clone();
    let mut trainer = Stage2Trainer::new(model, pairs.iter().collect()).unwrap();
    let mut phases = Vec::new();
    for _ in 0..4 {
        trainer
            .step_observed(&mut |phase, m| {
                phases.push(phase);
                // The stage-1 prior never moves.
                assert!(same(&m.prior_encoder.params, &m1.encoder.params));
                assert!(m.codebook.codes() == m1.codebook.codes());
                assert!(same(&m.decoder.params, &m1.decoder.params));
                let enh_changed = m.enhancer != prev.enhancer || m.fusion != prev.fusion || m.prompts != prev.prompts;
                let lqm_changed = m.lqm != prev.lqm;
                let disc_changed = m.discriminator != prev.discriminator;
                match phase {
                    Phase::Lqm => assert!(lqm_changed && !enh_changed && !disc_changed),
                    Phase::Enhancer => assert!(enh_changed && !lqm_changed && !disc_changed),
                    Phase::Discriminator => assert!(disc_changed && !enh_changed && !lqm_changed),
                }
                prev = m.clone();
            })
            .unwrap();
    }
    let cycle = [Phase::Lqm, Phase::Enhancer, Phase::Discriminator];
    assert_eq!(phases, cycle.repeat(4));
}

#[test]
fn disabled_lqm_skips_its_phase() {
    let cfg = TrainConfig { use_lqm: false, ..tiny() };
    let (pairs, m1) = stage1(&cfg);
    let mut trainer = Stage2Trainer::new(Stage2Model::from_stage1(&m1, &cfg).unwrap(), pairs.iter().collect()).unwrap();
    let mut phases = Vec::new();
    trainer.step_observed(&mut |p, _| phases.push(p)).unwrap();
    assert_eq!(phases, [Phase::Enhancer, Phase::Discriminator]);
    assert!(trainer.model.lqm.is_none());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = tiny();
    let (pairs, m1) = stage1(&cfg);
    let (_, m1b) = stage1(&cfg);
    assert_eq!(m1.to_checkpoint().to_bytes(), m1b.to_checkpoint().to_bytes());
    let (train, _) = split_pairs(&pairs, cfg.holdout).unwrap();
    let a = train_enhancer(train, &m1, &cfg).unwrap();
    let b = train_enhancer(train, &m1, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.to_checkpoint().to_bytes(), b.model.to_checkpoint().to_bytes());

    let other = TrainConfig { seed: 4, ..cfg };
    let c = train_enhancer(train, &m1, &other).unwrap();
    assert_ne!(a.model.to_checkpoint().to_bytes(), c.model.to_checkpoint().to_bytes());
}

#[test]
fn stage2_checkpoint_round_trip() {
    let cfg = tiny();
    let (pairs, m1) = stage1(&cfg);
    let run = train_enhancer(&pairs, &m1, &cfg).unwrap();
    let back = Stage2Model::from_checkpoint(&run.model.to_checkpoint()).unwrap();
    assert_eq!(back, run.model);
    let img = &pairs[0].low;
    assert_eq!(back.enhance(img).unwrap(), run.model.enhance(img).unwrap());
    // A stage-1 checkpoint is not a stage-2 one.
    assert!(matches!(
        Stage2Model::from_checkpoint(&m1.to_checkpoint()),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn non_finite_parameters_abort_with_divergence() {
    let cfg = tiny();
    let (pairs, mut m1) = stage1(&cfg);
    let w = m1.decoder.params.get_mut(0);
    let d = w.dims();
    *w = lumiq::Tensor4::full(d, f64::NAN);
    match train_enhancer(&pairs, &m1, &cfg) {
        Err(Error::Divergence { component, step }) => {
            assert_eq!(step, 0);
            assert!(component.starts_with("l_"), "{component}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn mismatched_stage2_config_is_rejected() {
    let cfg = tiny();
    let (_, m1) = stage1(&cfg);
    let bad = TrainConfig { codebook_size: 16, ..cfg };
    assert!(Stage2Model::from_stage1(&m1, &bad).is_err());
}

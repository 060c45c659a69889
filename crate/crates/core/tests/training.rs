use modality_lens::alignment::{
    decode_checkpoint, encode_checkpoint, restore, snapshot, state_hash, tiny_pipeline_config,
    train_loop, train_step, AlignmentState, Teachers, TrainingSet, Triplet,
};
use modality_lens::backbone::EncoderPipeline;
use modality_lens::config::RunConfig;

fn small_run(steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        pipeline: tiny_pipeline_config(),
        ..RunConfig::default()
    };
    cfg.data.synth.clouds_per_category = 3;
    cfg.data.synth.points_per_cloud = 200;
    cfg.trainer.batch_size = 4;
    cfg.trainer.steps = steps;
    cfg
}

struct Run {
    cfg: RunConfig,
    pipe: EncoderPipeline,
    state: AlignmentState,
    set: TrainingSet,
}

fn start(cfg: RunConfig) -> Run {
    let pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    let names = cfg.data.synth.category_names();
    let clouds = cfg.data.generate_train().unwrap();
    let set = TrainingSet::new(&clouds, &names, &cfg.anchors, &pipe, &teachers).unwrap();
    let state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
    Run {
        cfg,
        pipe,
        state,
        set,
    }
}

impl Run {
    fn train(&mut self) -> Vec<f64> {
        train_loop(&mut self.state, &mut self.pipe, &self.set, None, None)
            .unwrap()
            .iter()
            .map(|r| r.loss)
            .collect()
    }

    fn hash(&self) -> String {
        state_hash(&self.cfg.canonical_json(), &self.pipe, &self.state).unwrap()
    }
}

#[test]
fn runs_are_reproducible() {
    let mut a = start(small_run(5));
    let mut b = start(small_run(5));
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.train(), b.train());
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn train_step_is_deterministic() {
    let cfg = small_run(1);
    let clouds = cfg.data.generate_train().unwrap();
    let names = cfg.data.synth.category_names();
    let triplets: Vec<Triplet> = clouds
        .iter()
        .step_by(3)
        .map(|(pc, l)| Triplet {
            points: pc.clone(),
            image_anchor: format!("a rendering of a {}", names[*l]),
            text_anchor: format!("a {}", names[*l]),
        })
        .collect();
    let once = || {
        let mut r = start(cfg.clone());
        let teachers = Teachers::new(cfg.teacher, r.pipe.joint_dim());
        let loss = train_step(&mut r.state, &triplets, &mut r.pipe, &teachers).unwrap();
        (loss, r.hash())
    };
    let (l1, h1) = once();
    let (l2, h2) = once();
    assert_eq!(l1, l2);
    assert_eq!(h1, h2);
    assert!(l1.total > 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let mut a = start(small_run(3));
    a.train();
    let json = a.cfg.canonical_json();
    let bytes = encode_checkpoint(&snapshot(&json, &a.pipe, &a.state).unwrap());
    let ckpt = decode_checkpoint(&bytes, "mem").unwrap();

    let mut b = start(small_run(3));
    restore(&ckpt, &mut b.pipe, &mut b.state).unwrap();
    assert_eq!(b.state.step, 3);
    assert_eq!(a.hash(), b.hash());
    // Already at the step budget: resuming does nothing.
    assert!(b.train().is_empty());
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full = start(small_run(6));
    let full_losses = full.train();

    let mut half = start(small_run(3));
    let mut losses = half.train();
    let ckpt = snapshot(&half.cfg.canonical_json(), &half.pipe, &half.state).unwrap();
    let ckpt = decode_checkpoint(&encode_checkpoint(&ckpt), "mem").unwrap();

    let mut rest = start(small_run(6));
    restore(&ckpt, &mut rest.pipe, &mut rest.state).unwrap();
    losses.extend(rest.train());
    assert_eq!(losses, full_losses);
    assert_eq!(rest.hash(), full.hash());
}

#[test]
fn frozen_vit_survives_training() {
    let mut r = start(small_run(100));
    let before = r.pipe.vit_hash();
    let losses = r.train();
    assert_eq!(losses.len(), 100);
    assert_eq!(r.pipe.vit_hash(), before);
    assert!(losses.iter().all(|l| l.is_finite()));
}

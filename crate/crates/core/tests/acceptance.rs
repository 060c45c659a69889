//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) and fails when its criterion does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, UnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use modality_lens::alignment::{
    contrastive_loss, load_checkpoint, pipeline_gradcheck, prepare_triplets, restore, snapshot,
    tiny_pipeline_config, train_loop, train_step_prepared, AlignmentState, CheckpointPlan,
    ContrastiveBatch, PreparedOwned, Teachers, TrainingSet, Triplet,
};
use modality_lens::backbone::{
    interpolate_pos_embed, EncoderPipeline, PipelineConfig, PipelineVariant, UnlockSelector,
    VIT_POS,
};
use modality_lens::config::RunConfig;
use modality_lens::lens::lens_param_count;
use modality_lens::numerics::{GradCheckOptions, Tensor};
use modality_lens::params::{normal_tensor, tensor_rng};
use modality_lens::pointcloud::{fps, knn_group, StartRule};
use modality_lens::zeroshot::{
    build_class_embeddings, eval_dataset, eval_features, rank_scores, AccuracyReport,
    ClassEmbeddingTable, DEFAULT_KS,
};
use rand::Rng;

/// Criteria run one at a time so the timed ones measure a quiet machine.
static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn criterion(n: u32, title: &str, body: impl FnOnce() -> Outcome + UnwindSafe) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = catch_unwind(body).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("{tag} criterion {n} ({title}): {detail} [{secs:.1}s]\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("{what} took {elapsed:?}, limit {limit:?}")
    })
}

fn topk_monotone(r: &AccuracyReport) -> bool {
    let mut ks: Vec<(usize, f64)> = r
        .topk
        .iter()
        .map(|(k, v)| (k.trim_start_matches("top").parse().unwrap(), *v))
        .collect();
    ks.sort_by_key(|p| p.0);
    ks.windows(2).all(|w| w[0].1 <= w[1].1)
}

fn small_run(steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        pipeline: tiny_pipeline_config(),
        ..RunConfig::default()
    };
    cfg.data.synth.clouds_per_category = 4;
    cfg.data.synth.points_per_cloud = 200;
    cfg.data.heldout_per_category = 2;
    cfg.trainer.batch_size = 4;
    cfg.trainer.steps = steps;
    cfg
}

fn training_set(cfg: &RunConfig, pipe: &EncoderPipeline) -> TrainingSet {
    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    let names = cfg.data.synth.category_names();
    let clouds = cfg.data.generate_train().unwrap();
    TrainingSet::new(&clouds, &names, &cfg.anchors, pipe, &teachers).unwrap()
}

fn class_table(cfg: &RunConfig, pipe: &EncoderPipeline) -> ClassEmbeddingTable {
    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    build_class_embeddings(
        &cfg.data.synth.category_names(),
        &cfg.templates,
        &teachers.text,
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_fidelity() {
    criterion(1, "gradient fidelity", || {
        let cfg = tiny_pipeline_config();
        ensure(
            cfg.perceiver.n_latents == 8 && cfg.perceiver.latent_dim == 16 && cfg.vit.n_blocks == 2,
            || "tiny pipeline is not M=8, D=16, 2 blocks".into(),
        )?;
        let start = Instant::now();
        let opts = GradCheckOptions {
            samples_per_tensor: 64,
            seed: 1,
            ..GradCheckOptions::default()
        };
        let out = pipeline_gradcheck(&cfg, 3, 1, &opts).map_err(|e| e.to_string())?;
        within(start.elapsed(), Duration::from_secs(60), "gradcheck")?;
        let max = out.report.max_rel_error;
        ensure(max < 1e-4, || format!("max relative error {max:.3e}"))?;
        Ok(format!(
            "max_rel_error={max:.2e} over {} coords in {} tensors",
            out.report.coords_checked,
            out.names.len()
        ))
    });
}

#[test]
fn criterion_2_loss_oracle() {
    criterion(2, "contrastive loss oracle", || {
        let mut rng = tensor_rng(2, "acceptance-loss");
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let b = [1, 2, 4, 8][trial % 4];
            let d = rng.gen_range(2..10);
            let p = common::unit_rows(&mut rng, b, d);
            let i = common::unit_rows(&mut rng, b, d);
            let t = common::unit_rows(&mut rng, b, d);
            let tau = rng.gen_range(0.01..1.0);
            let batch = ContrastiveBatch::new(
                common::to_tensor(&p),
                common::to_tensor(&i),
                common::to_tensor(&t),
            )
            .unwrap();
            let got = contrastive_loss(&batch, tau).unwrap();
            let (total, li, lt) = common::contrastive_loss(&p, &i, &t, tau);
            let err = (got.total - total)
                .abs()
                .max((got.l_p2i - li).abs())
                .max((got.l_p2t - lt).abs());
            worst = worst.max(err);
            if b == 1 {
                ensure(got.total == 0.0, || format!("B=1 loss {}", got.total))?;
            }
        }
        ensure(worst <= 1e-10, || format!("oracle gap {worst:.3e}"))?;

        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = ContrastiveBatch::new(e.clone(), e.clone(), e).unwrap();
        let got = contrastive_loss(&batch, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        ensure((got.total - want).abs() <= 1e-9, || {
            format!("orthonormal B=2 gives {} (want {want})", got.total)
        })?;
        Ok(format!("worst gap {worst:.1e} on 100 batches"))
    });
}

#[test]
fn criterion_3_fps_knn_oracles() {
    criterion(3, "FPS/KNN oracles", || {
        let mut rng = tensor_rng(3, "acceptance-fps");
        let start = Instant::now();
        for trial in 0..1000 {
            let n = rng.gen_range(1..=64);
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let m = rng.gen_range(1..=n);
            let got = fps(&pts, m, StartRule::FarthestFromCentroid).unwrap();
            ensure(got == common::fps(&pts, m, true), || {
                format!("fps disagrees on cloud {trial}")
            })?;
            let k = rng.gen_range(1..=n);
            let centers: Vec<[f64; 3]> = got.iter().map(|&i| pts[i]).collect();
            let groups = knn_group(&pts, &centers, k).unwrap();
            for (c, g) in centers.iter().zip(&groups) {
                ensure(*g == common::knn(&pts, c, k), || {
                    format!("knn disagrees on cloud {trial}")
                })?;
            }
        }
        within(start.elapsed(), Duration::from_secs(30), "1000 clouds")?;
        Ok("1000 clouds agree".into())
    });
}

#[test]
fn criterion_4_shared_param_count() {
    criterion(4, "weight-sharing parameter count", || {
        let mut configs = vec![PipelineConfig::default(), tiny_pipeline_config()];
        let mut wide = PipelineConfig::default();
        wide.perceiver.n_latents = 24;
        wide.perceiver.self_attn_per_block = 2;
        wide.point_embed.token_dim = 48;
        configs.push(wide);
        let mut counts = Vec::new();
        for cfg in &configs {
            let row: Vec<usize> = [2, 4, 6, 8]
                .iter()
                .map(|&depth| {
                    let mut p = cfg.perceiver;
                    p.depth = depth;
                    p.share_weights = true;
                    lens_param_count(&cfg.point_embed, &p)
                })
                .collect();
            ensure(row.iter().all(|c| *c == row[0]), || {
                format!("counts vary with depth: {row:?}")
            })?;
            counts.push(row[0]);
        }
        Ok(format!("constant counts {counts:?}"))
    });
}

/// Trains `steps` steps with `selector` and returns which ViT tensors changed.
fn changed_vit_tensors(selector: UnlockSelector, steps: u64) -> (Vec<String>, Vec<String>) {
    let mut cfg = small_run(steps);
    cfg.pipeline.unlock = selector;
    let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
    let before: Vec<(String, Tensor)> = pipe
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("vit."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let set = training_set(&cfg, &pipe);
    let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
    train_loop(&mut state, &mut pipe, &set, None, None).unwrap();
    before
        .into_iter()
        .map(|(n, t)| {
            let same = pipe.params.get(&n).unwrap().data() == t.data();
            (n, same)
        })
        .fold((Vec::new(), Vec::new()), |(mut ch, mut un), (n, same)| {
            if same {
                un.push(n)
            } else {
                ch.push(n)
            }
            (ch, un)
        })
}

#[test]
fn criterion_5_freezing_contract() {
    criterion(5, "freezing contract", || {
        let cfg = small_run(500);
        let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
        let before = pipe.vit_hash();
        let set = training_set(&cfg, &pipe);
        let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
        let records = train_loop(&mut state, &mut pipe, &set, None, None).unwrap();
        ensure(records.len() == 500, || "did not run 500 steps".into())?;
        ensure(pipe.vit_hash() == before, || {
            "ViT hash changed with selector none".into()
        })?;

        let selectors = [
            UnlockSelector::Cls,
            UnlockSelector::ClsProj,
            UnlockSelector::ClsProjBlocks { first: 1, last: 1 },
            UnlockSelector::ClsProjBlocks { first: 2, last: 2 },
            UnlockSelector::ClsProjBlocks { first: 1, last: 2 },
            UnlockSelector::All,
        ];
        for sel in selectors {
            let (changed, unchanged) = changed_vit_tensors(sel, 10);
            if let Some(n) = changed.iter().find(|n| !sel.selects(n)) {
                return Err(format!("{sel}: frozen tensor {n} changed"));
            }
            if let Some(n) = unchanged.iter().find(|n| sel.selects(n)) {
                return Err(format!("{sel}: unlocked tensor {n} did not change"));
            }
            ensure(!changed.is_empty(), || format!("{sel}: nothing trained"))?;
        }
        Ok(format!(
            "hash stable over 500 steps; {} selectors honoured",
            selectors.len()
        ))
    });
}

#[test]
fn criterion_6_position_identity() {
    criterion(6, "position-embedding identity", || {
        for cfg in [PipelineConfig::default(), tiny_pipeline_config()] {
            let pipe = EncoderPipeline::new(cfg).unwrap();
            let pos = pipe.params.get(VIT_POS).unwrap();
            let s = pipe.config.vit.pretrained_seq_len;
            let out = interpolate_pos_embed(pos, s).unwrap();
            ensure(
                out.shape() == pos.shape()
                    && out
                        .data()
                        .iter()
                        .zip(pos.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("S={s} is not bit-identical"),
            )?;
        }
        // CLS row plus twelve patch rows.
        let random = normal_tensor(6, "pos", &[13, 7], 1.0);
        let out = interpolate_pos_embed(&random, 12).unwrap();
        ensure(out == random, || "random table changed".into())?;
        Ok("bit-identical".into())
    });
}

fn overfit_one_batch(variant: PipelineVariant) -> (f64, f64) {
    let mut cfg = RunConfig::default();
    cfg.pipeline.variant = variant;
    let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    let names = cfg.data.synth.category_names();
    let train = cfg.data.generate_train().unwrap();
    let per = cfg.data.synth.clouds_per_category;
    let triplets: Vec<Triplet> = (0..8)
        .map(|j| {
            let (pc, l) = &train[(j % 4) * per + j / 4];
            Triplet {
                points: pc.clone(),
                image_anchor: format!("a rendering of a {}, view {}", names[*l], j + 1),
                text_anchor: format!("a {}.", names[*l]),
            }
        })
        .collect();
    let prepared = prepare_triplets(&triplets, &pipe, &teachers).unwrap();
    let refs: Vec<_> = prepared.iter().map(PreparedOwned::as_ref).collect();
    let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
    let first = train_step_prepared(&mut state, &mut pipe, &refs)
        .unwrap()
        .total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step_prepared(&mut state, &mut pipe, &refs)
            .unwrap()
            .total;
    }
    (first, last)
}

#[test]
fn criterion_7_end_to_end_learning() {
    criterion(7, "end-to-end learning signal", || {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| {
            let cfg = RunConfig::default();
            ensure(
                cfg.pipeline.variant == PipelineVariant::Full
                    && cfg.data.synth.categories.len() == 4
                    && cfg.data.synth.clouds_per_category == 64
                    && cfg.data.heldout_per_category == 32
                    && cfg.trainer.steps <= 2000,
                || "default run is not the 4x64/32 full setup".into(),
            )?;
            let start = Instant::now();
            let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
            let set = training_set(&cfg, &pipe);
            let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
            let records = train_loop(&mut state, &mut pipe, &set, None, None).unwrap();
            let table = class_table(&cfg, &pipe);
            let heldout = cfg.data.generate_heldout().unwrap();
            let report = eval_dataset(&heldout, &pipe, &table, &DEFAULT_KS).unwrap();
            let elapsed = start.elapsed();
            within(elapsed, Duration::from_secs(300), "training and evaluation")?;
            let (t1, t5) = (report.top(1).unwrap(), report.top(5).unwrap());
            ensure(topk_monotone(&report), || "top-k not monotone".into())?;
            ensure(t1 >= 90.0 && t5 == 100.0, || {
                format!("top1 {t1:.2}%, top5 {t5:.2}% after {} steps", records.len())
            })?;

            let (first, last) = overfit_one_batch(PipelineVariant::PerceiverOnly);
            ensure(last <= 0.5 * first, || {
                format!("perceiver_only loss {first:.4} -> {last:.4}")
            })?;
            Ok(format!(
                "{} steps, top1 {t1:.2}%, top5 {t5:.2}%; perceiver_only loss {first:.3} -> {last:.4}",
                records.len()
            ))
        })
    });
}

/// Checkpoint, metrics and report bytes of one seeded run.
fn run_artifacts(dir: &std::path::Path, steps: u64) -> (Vec<u8>, Vec<u8>, String) {
    let cfg = small_run(steps);
    let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
    let set = training_set(&cfg, &pipe);
    let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
    let plan = CheckpointPlan {
        path: dir.join("run.vlck"),
        config_json: cfg.canonical_json(),
    };
    let mut metrics = Vec::new();
    train_loop(&mut state, &mut pipe, &set, Some(&plan), Some(&mut metrics)).unwrap();
    let report = eval_dataset(
        &cfg.data.generate_heldout().unwrap(),
        &pipe,
        &class_table(&cfg, &pipe),
        &DEFAULT_KS,
    )
    .unwrap();
    (
        std::fs::read(&plan.path).unwrap(),
        metrics,
        report.to_json(),
    )
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism", || {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        let ra = run_artifacts(&a, 8);
        let rb = run_artifacts(&b, 8);
        ensure(ra.0 == rb.0, || "checkpoints differ".into())?;
        ensure(ra.1 == rb.1, || "metric logs differ".into())?;
        ensure(ra.2 == rb.2, || "eval reports differ".into())?;

        // Four steps, checkpoint, reload, four more: same bytes as eight straight.
        let c = tmp.path().join("c");
        std::fs::create_dir_all(&c).unwrap();
        let (_, mut metrics, _) = run_artifacts(&c, 4);
        let cfg = small_run(8);
        let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
        let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
        restore(
            &load_checkpoint(&c.join("run.vlck")).unwrap(),
            &mut pipe,
            &mut state,
        )
        .unwrap();
        let set = training_set(&cfg, &pipe);
        train_loop(&mut state, &mut pipe, &set, None, Some(&mut metrics)).unwrap();
        let resumed = modality_lens::alignment::encode_checkpoint(
            &snapshot(&cfg.canonical_json(), &pipe, &state).unwrap(),
        );
        ensure(resumed == ra.0, || "resumed checkpoint differs".into())?;
        ensure(metrics == ra.1, || "resumed metrics differ".into())?;
        Ok(format!(
            "{} checkpoint bytes, {} metric bytes identical; resume matches",
            ra.0.len(),
            ra.1.len()
        ))
    });
}

#[test]
fn criterion_9_ranking_properties() {
    criterion(9, "ranking properties", || {
        let mut rng = tensor_rng(9, "acceptance-rank");
        for trial in 0..500 {
            let c = rng.gen_range(1..12);
            let names: Vec<String> = (0..c).map(|i| format!("c{i:02}")).collect();
            let sims: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = rank_scores(&sims, &names);
            for s in [1e-3, 0.5, 2.0, 3.7, 1e3, rng.gen_range(1e-6..1e6)] {
                let scaled: Vec<f64> = sims.iter().map(|x| x * s).collect();
                ensure(rank_scores(&scaled, &names) == base, || {
                    format!("trial {trial}: ranking changed under scale {s}")
                })?;
            }
        }

        let cfg = small_run(4);
        let mut pipe = EncoderPipeline::new(cfg.pipeline.clone()).unwrap();
        let set = training_set(&cfg, &pipe);
        let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed).unwrap();
        train_loop(&mut state, &mut pipe, &set, None, None).unwrap();
        let table = class_table(&cfg, &pipe);
        let heldout = cfg.data.generate_heldout().unwrap();
        let report = eval_dataset(&heldout, &pipe, &table, &[1, 2, 3, 4, 5]).unwrap();
        ensure(topk_monotone(&report), || {
            "pipeline report not monotone".into()
        })?;

        let mut reports = 1;
        for seed in 0..20u64 {
            let feats: Vec<Tensor> = (0..30)
                .map(|i| normal_tensor(seed, &format!("f{i}"), &[table.dim()], 1.0))
                .collect();
            let labels: Vec<usize> = (0..30).map(|i| i % table.len()).collect();
            let r = eval_features(&feats, &labels, &table, &[1, 2, 3, 4]).unwrap();
            ensure(topk_monotone(&r), || format!("report {seed} not monotone"))?;
            reports += 1;
        }
        Ok(format!(
            "scaling-invariant on 500 score vectors; {reports} reports monotone"
        ))
    });
}

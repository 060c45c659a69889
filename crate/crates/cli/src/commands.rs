use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use modality_lens::alignment::{
    load_checkpoint, normalize_feature, pipeline_gradcheck, restore, tiny_pipeline_config,
    train_loop, AlignmentState, CheckpointPlan, Teachers, TrainingSet,
};
use modality_lens::backbone::{encode_shape, EncoderPipeline, PipelineConfig, PipelineVariant};
use modality_lens::config::RunConfig;
use modality_lens::numerics::GradCheckOptions;
use modality_lens::pointcloud::{load_pointcloud, PointCloud, PointFormat};
use modality_lens::zeroshot::{
    build_class_embeddings, eval_dataset, reports_csv, AccuracyReport, DEFAULT_KS,
};
use modality_lens::Error;
use serde_json::{json, Value};

use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::{resolve_config, Cli, CliError, Command, GlobalArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.vlck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => synth(g),
        Command::Train { data, resume } => train(g, data.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            csv,
        } => eval(g, checkpoint, data.as_deref(), csv.as_deref()),
        Command::Embed { checkpoint, input } => embed(g, checkpoint, input),
        Command::Gradcheck { batch, samples } => gradcheck(g, *batch, *samples),
        Command::Ablate {
            depths,
            shares,
            latents,
            use_pos,
            variants,
            train,
        } => ablate(g, depths, shares, latents, use_pos, variants, *train),
    }
}

fn require_out<'a>(g: &'a GlobalArgs, what: &str) -> CliResult<&'a Path> {
    g.out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--out is required ({what})")))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

/// Writes `text` to `--out` when given, else to stdout.
fn emit(g: &GlobalArgs, text: &str) -> CliResult<()> {
    match &g.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// First line of every CSV the CLI writes: the effective configuration.
fn config_comment(cfg: &RunConfig) -> String {
    format!("# config={}\n", cfg.canonical_json())
}

fn synth(g: &GlobalArgs) -> CliResult<()> {
    let cfg = resolve_config(g)?;
    let dir = require_out(g, "dataset directory")?;
    let data = Dataset {
        categories: cfg.data.synth.category_names(),
        train: cfg.data.generate_train()?,
        test: cfg.data.generate_heldout()?,
    };
    write_dataset(dir, config_value(&cfg), &data)?;
    println!(
        "wrote {} train and {} test clouds to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

/// Pipeline and optimizer state restored from a checkpoint, with the
/// configuration stored in it.
fn restore_run(
    path: &Path,
    overrides: &[String],
) -> CliResult<(RunConfig, EncoderPipeline, AlignmentState)> {
    let ckpt = load_checkpoint(path)?;
    let stored = RunConfig::from_json(&ckpt.config_json, &path.display().to_string())?;
    let cfg = stored.with_overrides(overrides)?;
    if cfg.pipeline != stored.pipeline {
        return Err(Error::Config(format!(
            "{}: pipeline settings cannot be overridden for a stored checkpoint",
            path.display()
        ))
        .into());
    }
    let mut pipe = EncoderPipeline::new(cfg.pipeline.clone())?;
    let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed)?;
    restore(&ckpt, &mut pipe, &mut state)?;
    Ok((cfg, pipe, state))
}

type LabeledClouds = (Vec<String>, Vec<(PointCloud, usize)>);

/// Training clouds and category names from `--data`, or synthesized.
fn training_clouds(cfg: &RunConfig, data: Option<&Path>) -> CliResult<LabeledClouds> {
    match data {
        Some(dir) => {
            let d = read_dataset(dir)?;
            if d.train.is_empty() {
                return Err(Error::Data(format!("{}: no training samples", dir.display())).into());
            }
            Ok((d.categories, d.train))
        }
        None => Ok((cfg.data.synth.category_names(), cfg.data.generate_train()?)),
    }
}

fn train(g: &GlobalArgs, data: Option<&Path>, resume: Option<&Path>) -> CliResult<()> {
    let cfg = resolve_config(g)?;
    let dir = require_out(g, "run directory")?;
    let (names, clouds) = training_clouds(&cfg, data)?;

    let mut pipe = EncoderPipeline::new(cfg.pipeline.clone())?;
    let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed)?;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        let stored = RunConfig::from_json(&ckpt.config_json, &path.display().to_string())?;
        // Only the step budget may change between the two halves of a run.
        let mut comparable = stored.clone();
        comparable.trainer.steps = cfg.trainer.steps;
        if comparable != cfg {
            return Err(Error::Config(format!(
                "{}: checkpoint configuration differs from this run (only trainer.steps may change)",
                path.display()
            ))
            .into());
        }
        restore(&ckpt, &mut pipe, &mut state)?;
        state.trainer = cfg.trainer;
    }

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join(CONFIG_FILE),
        (cfg.pretty_json() + "\n").as_bytes(),
    )?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    let set = TrainingSet::new(&clouds, &names, &cfg.anchors, &pipe, &teachers)?;
    let before = pipe.vit_hash();
    if g.dump_vit_hash {
        println!("vit_hash_before {before}");
    }
    let plan = CheckpointPlan {
        path: dir.join(CHECKPOINT_FILE),
        config_json: cfg.canonical_json(),
    };
    let records = train_loop(&mut state, &mut pipe, &set, Some(&plan), Some(&mut metrics))?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if g.dump_vit_hash {
        println!("vit_hash_after {}", pipe.vit_hash());
    }
    match records.last() {
        Some(r) => println!(
            "step {} loss {:.6} logit_scale {:.4}",
            r.step, r.loss, r.logit_scale
        ),
        None => println!("step {} (nothing to do)", state.step),
    }
    Ok(())
}

fn eval(
    g: &GlobalArgs,
    checkpoint: &Path,
    data: Option<&Path>,
    csv: Option<&Path>,
) -> CliResult<()> {
    let (cfg, pipe, _) = restore_run(checkpoint, &g.overrides)?;
    let (names, clouds) = match data {
        Some(dir) => {
            let d = read_dataset(dir)?;
            if d.test.is_empty() {
                return Err(Error::Data(format!("{}: no test samples", dir.display())).into());
            }
            (d.categories, d.test)
        }
        None => (
            cfg.data.synth.category_names(),
            cfg.data.generate_heldout()?,
        ),
    };
    let report = evaluate(&cfg, &pipe, &names, &clouds)?;
    if let Some(path) = csv {
        let rows = [(cfg.pipeline.variant.to_string(), report.clone())];
        let text = config_comment(&cfg) + &reports_csv(&rows);
        write_file(path, text.as_bytes())?;
    }
    emit(g, &(report.to_json() + "\n"))
}

fn evaluate(
    cfg: &RunConfig,
    pipe: &EncoderPipeline,
    names: &[String],
    clouds: &[(PointCloud, usize)],
) -> CliResult<AccuracyReport> {
    let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
    let table = build_class_embeddings(names, &cfg.templates, &teachers.text)?;
    let mut report = eval_dataset(clouds, pipe, &table, &DEFAULT_KS)?;
    report.config = Some(config_value(cfg));
    Ok(report)
}

fn embed(g: &GlobalArgs, checkpoint: &Path, input: &Path) -> CliResult<()> {
    let (_, pipe, _) = restore_run(checkpoint, &g.overrides)?;
    let pc = load_pointcloud(input, PointFormat::from_path(input))?;
    let feature = normalize_feature(&encode_shape(&pc, &pipe)?)?;
    let out = json!({
        "source": input.display().to_string(),
        "points": pc.len(),
        "embedding": feature.data(),
    });
    emit(g, &(out.to_string() + "\n"))
}

fn gradcheck(g: &GlobalArgs, batch: usize, samples: usize) -> CliResult<()> {
    if batch == 0 || samples == 0 {
        return Err(CliError::Usage("--batch and --samples must be >= 1".into()));
    }
    let pipeline = if g.config.is_some() || !g.overrides.is_empty() {
        resolve_config(g)?.pipeline
    } else {
        tiny_pipeline_config()
    };
    let seed = g.seed.unwrap_or(1);
    let opts = GradCheckOptions {
        samples_per_tensor: samples,
        seed,
        ..GradCheckOptions::default()
    };
    let out = pipeline_gradcheck(&pipeline, batch, seed, &opts)?;
    let mut text = String::new();
    for (name, (worst, norm)) in out
        .names
        .iter()
        .zip(out.report.worst.iter().zip(&out.report.grad_norms))
    {
        let err = worst.as_ref().map_or(0.0, |c| c.rel_error);
        text.push_str(&format!(
            "{name} grad_norm={norm:.3e} max_rel_error={err:.3e}\n"
        ));
    }
    let max = out.report.max_rel_error;
    text.push_str(&format!(
        "max_rel_error={max:.3e} coords={} tolerance={GRADCHECK_TOLERANCE:.0e}\n",
        out.report.coords_checked
    ));
    emit(g, &text)?;
    if max < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {max:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        ))
        .into())
    }
}

fn parse_variant(s: &str) -> CliResult<PipelineVariant> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| {
        CliError::Usage(format!(
            "unknown variant `{s}` (expected full, perceiver_only or pointembed_to_vit)"
        ))
    })
}

pub const ABLATE_HEADER: &str =
    "variant,depth,n_latents,share_weights,use_pos,unlock,trainable_params,lens_params,forward_flops,top1";

#[allow(clippy::too_many_arguments)]
fn ablate(
    g: &GlobalArgs,
    depths: &[usize],
    shares: &[bool],
    latents: &[usize],
    use_pos: &[bool],
    variants: &[String],
    train: bool,
) -> CliResult<()> {
    let base = resolve_config(g)?;
    let latents = if latents.is_empty() {
        vec![base.pipeline.perceiver.n_latents]
    } else {
        latents.to_vec()
    };
    let use_pos = if use_pos.is_empty() {
        vec![base.pipeline.vit.use_pos_embed]
    } else {
        use_pos.to_vec()
    };
    let variants = if variants.is_empty() {
        vec![base.pipeline.variant]
    } else {
        variants
            .iter()
            .map(|v| parse_variant(v))
            .collect::<CliResult<Vec<_>>>()?
    };

    let mut grid: Vec<PipelineConfig> = Vec::new();
    for &variant in &variants {
        for &pos in &use_pos {
            if variant == PipelineVariant::PointembedToVit {
                let mut p = base.pipeline.clone();
                p.variant = variant;
                p.vit.use_pos_embed = pos;
                grid.push(p);
                continue;
            }
            if variant == PipelineVariant::PerceiverOnly && pos != use_pos[0] {
                continue;
            }
            for &m in &latents {
                for &share in shares {
                    for &depth in depths {
                        let mut p = base.pipeline.clone();
                        p.variant = variant;
                        p.vit.use_pos_embed = pos;
                        p.perceiver.n_latents = m;
                        p.perceiver.share_weights = share;
                        p.perceiver.depth = depth;
                        grid.push(p);
                    }
                }
            }
        }
    }

    let corpus = if train {
        Some((
            base.data.synth.category_names(),
            base.data.generate_train()?,
            base.data.generate_heldout()?,
        ))
    } else {
        None
    };
    let mut csv = config_comment(&base);
    csv.push_str(ABLATE_HEADER);
    csv.push('\n');
    for p in grid {
        if let Err(e) = p.validate() {
            eprintln!("skipping {}: {e}", describe(&p));
            continue;
        }
        let mut pipe = EncoderPipeline::new(p.clone())?;
        let top1 = match &corpus {
            Some((names, train_set, test_set)) => {
                let cfg = RunConfig {
                    pipeline: p.clone(),
                    ..base.clone()
                };
                let teachers = Teachers::new(cfg.teacher, pipe.joint_dim());
                let set = TrainingSet::new(train_set, names, &cfg.anchors, &pipe, &teachers)?;
                let mut state = AlignmentState::new(&pipe, cfg.trainer, cfg.seed)?;
                train_loop(&mut state, &mut pipe, &set, None, None)?;
                let r = evaluate(&cfg, &pipe, names, test_set)?;
                format!("{:.2}", r.top(1).unwrap_or(0.0))
            }
            None => String::new(),
        };
        let perceiver = p.uses_perceiver();
        let cell = |v: String| if perceiver { v } else { String::new() };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.variant,
            cell(p.perceiver.depth.to_string()),
            cell(p.perceiver.n_latents.to_string()),
            cell(p.perceiver.share_weights.to_string()),
            if p.uses_vit() {
                p.vit.use_pos_embed.to_string()
            } else {
                String::new()
            },
            if p.uses_vit() {
                p.unlock.to_string()
            } else {
                String::new()
            },
            pipe.trainable_param_count(),
            p.lens_param_count(),
            p.forward_flops(),
            top1
        ));
    }
    emit(g, &csv)
}

fn describe(p: &PipelineConfig) -> String {
    format!(
        "variant={} depth={} n_latents={} share_weights={} use_pos={}",
        p.variant,
        p.perceiver.depth,
        p.perceiver.n_latents,
        p.perceiver.share_weights,
        p.vit.use_pos_embed
    )
}

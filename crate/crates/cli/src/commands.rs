use std::fs;
use std::io::Write as _;
use std::path::Path;

use autograd::Tensor;
use stormmeta::data::{derive_seed, read_archive, synth_archive, Archive, EventTensor, ModalitySchema, SplitLabel, SynthParams};
use stormmeta::nets::{init_params, PatchDiscSpec, UNetSpec};
use stormmeta::skillmetrics::{evaluate_archive, frames_of, Aggregation, SkillReport};
use stormmeta::sslpretrain::{cosine_warmup_lr, load_pretrained_encoder, pretrain_epoch, AugmentationSpec, MocoState};
use stormmeta::tasks::{build_task, collapse_joint, compute_norm_stats, split_events, FewShotTask, NormStats};
use stormmeta::trainloops::{
    evaluate_few_shot, joint_epoch, maml_epoch, mean_mae, LossMode, MetaConfig, MetricsRecord, Models, TaskEval, TrainState,
};

use crate::config::{RunConfig, Strategy};
use crate::{io_err, CliError, EvaluateArgs, RunArgs, SplitArgs, SynthArgs, TrainArgs};

const GENERATOR_SEED: u64 = 100;
const DISCRIMINATOR_SEED: u64 = 101;

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn open_archive(path: &Path) -> Result<Archive, CliError> {
    if !path.join("manifest.json").exists() {
        return Err(CliError::Usage(format!("{} is not an archive (no manifest.json)", path.display())));
    }
    Ok(read_archive(path)?)
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(0);
    let params = SynthParams { n_cells: args.cells, ..SynthParams::default() };
    let manifest = synth_archive(&args.out, args.events as usize, args.frames as usize, args.resolution as usize, &params, seed)?;
    log::info!("wrote {} events to {}", manifest.events.len(), args.out.display());
    Ok(())
}

pub fn split(args: &SplitArgs) -> Result<(), CliError> {
    let mut archive = open_archive(&args.archive)?;
    let fractions: [f64; 3] =
        args.fractions.as_slice().try_into().map_err(|_| CliError::Usage("exactly three fractions are required".into()))?;
    let spec = split_events(&archive.event_ids(), args.seed.unwrap_or(0), fractions)?;
    archive.set_split_labels(spec.labels())?;
    let path = args.archive.join("split.json");
    let text = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&path, &(text + "\n"))?;
    println!("train={} val={} test={}", spec.counts[0], spec.counts[1], spec.counts[2]);
    Ok(())
}

fn load_config(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(a) = &run.archive {
        cfg.archive = a.clone();
    }
    if let Some(o) = &run.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = run.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

/// Event ids per split: the archive's own labels when present, otherwise the
/// configured seeded split.
fn split_ids(archive: &Archive, cfg: &RunConfig) -> Result<[Vec<String>; 3], CliError> {
    let labels = [SplitLabel::Train, SplitLabel::Val, SplitLabel::Test];
    if archive.manifest().split_labels.is_some() {
        return Ok(labels.map(|l| archive.manifest().ids_with_label(l)));
    }
    let spec = split_events(&archive.event_ids(), cfg.split.seed, cfg.split.fractions)?;
    Ok(labels.map(|l| spec.ids(l).to_vec()))
}

fn split_index(name: &str) -> usize {
    match name {
        "train" => 0,
        "val" => 1,
        _ => 2,
    }
}

fn load_events(archive: &Archive, ids: &[String]) -> Result<Vec<EventTensor>, CliError> {
    Ok(ids.iter().map(|id| archive.load(id)).collect::<Result<_, _>>()?)
}

fn train_stats(archive: &Archive, train_ids: &[String]) -> Result<NormStats, CliError> {
    if train_ids.is_empty() {
        return Err(CliError::Usage("the train split is empty".into()));
    }
    let events = load_events(archive, train_ids)?;
    Ok(compute_norm_stats(&events)?)
}

fn build_tasks(archive: &Archive, ids: &[String], cfg: &RunConfig, stats: &NormStats) -> Result<Vec<FewShotTask>, CliError> {
    ids.iter()
        .map(|id| Ok(build_task(&archive.load(id)?, cfg.n_support, cfg.n_query, archive.schema(), stats)?))
        .collect()
}

fn check_resolution(archive: &Archive) -> Result<(), CliError> {
    if let Some(rec) = archive.manifest().events.first() {
        let [_, _, h, w] = rec.shape;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(CliError::Usage(format!("frames of {h}x{w} do not halve to a multiple of 16")));
        }
    }
    Ok(())
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<(), CliError> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn pretrain(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(e) = args.epochs {
        cfg.pretrain_epochs = Some(e);
    }
    cfg.resolve_seed()?;
    cfg.validate()?;
    let moco = cfg.moco_config();
    let spec = AugmentationSpec::standard(cfg.augmentation_level)?;
    let archive = open_archive(&cfg.archive)?;
    let [train, _, _] = split_ids(&archive, &cfg)?;
    if train.is_empty() {
        return Err(CliError::Usage("the train split is empty".into()));
    }
    let events = load_events(&archive, &train)?;
    let stats = compute_norm_stats(&events)?;

    let out = cfg.out_dir.join("pretrain");
    create_dir(&out)?;
    cfg.save(&out.join("config.json"))?;
    log::info!("{}", serde_json::to_string(&cfg).unwrap_or_default());

    let mut state = match &args.resume {
        Some(dir) => {
            let s = MocoState::load(dir)?;
            if s.config != moco {
                return Err(CliError::Usage(format!("{} was trained with a different pretraining config", dir.display())));
            }
            s
        }
        None => MocoState::new(moco.clone())?,
    };
    let log_path = out.join("log.tsv");
    while state.epoch < cfg.pretrain_epochs() {
        let lr = cosine_warmup_lr(state.epoch as f64, moco.epochs as f64, moco.warmup_epochs as f64, moco.base_lr)?;
        let loss = pretrain_epoch(&mut state, &events, &spec, archive.schema(), &stats)?;
        log::info!("pretrain epoch {} loss {loss:.5} lr {lr:.6}", state.epoch);
        append_lines(&log_path, "epoch\tloss\tlr", &[format!("{}\t{loss}\t{lr}", state.epoch)])?;
        state.save(&out.join(format!("epoch-{:03}", state.epoch)))?;
    }
    Ok(())
}

fn mode_label(cfg: &RunConfig) -> String {
    format!("{}-{}", cfg.strategy.as_str(), cfg.loss_mode.as_str())
}

fn skill_report(evals: &[TaskEval], thresholds: &[f64], aggregation: Aggregation) -> Result<SkillReport, CliError> {
    let preds: Vec<Tensor> = evals.iter().flat_map(|e| frames_of(&e.prediction)).collect();
    let targets: Vec<Tensor> = evals.iter().flat_map(|e| frames_of(&e.target)).collect();
    Ok(evaluate_archive(&preds, &targets, thresholds, aggregation)?)
}

fn nets(cfg: &RunConfig, schema: &ModalitySchema) -> (UNetSpec, PatchDiscSpec) {
    (
        UNetSpec::new(cfg.generator_width, schema.in_channels(), 1),
        PatchDiscSpec::new(cfg.discriminator_width, schema.in_channels(), 1),
    )
}

fn models<'a>(mode: LossMode, g: &'a UNetSpec, d: &'a PatchDiscSpec) -> Models<'a> {
    match mode {
        LossMode::Reconstruction => Models::reconstruction(g),
        LossMode::Adversarial => Models::adversarial(g, d),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.run)?;
    if let Some(e) = args.run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(m) = args.loss_mode {
        cfg.loss_mode = m;
    }
    if let Some(l) = args.lambda {
        cfg.lambda_l1 = l;
    }
    if let Some(l) = args.inner_lr {
        cfg.inner_lr = l;
    }
    if let Some(m) = args.meta_batch {
        cfg.meta_batch = m;
    }
    if let Some(p) = &args.pretrained_encoder {
        cfg.pretrained_encoder = Some(p.clone());
    }
    let seed = cfg.resolve_seed()?;
    cfg.validate()?;
    let meta = cfg.meta_config();

    let archive = open_archive(&cfg.archive)?;
    check_resolution(&archive)?;
    let schema = archive.schema().clone();
    let [train_ids, val_ids, test_ids] = split_ids(&archive, &cfg)?;
    let stats = train_stats(&archive, &train_ids)?;
    let train_tasks = build_tasks(&archive, &train_ids, &cfg, &stats)?;
    let val_tasks = build_tasks(&archive, &val_ids, &cfg, &stats)?;
    let joint = match cfg.strategy {
        Strategy::Joint => Some(collapse_joint(&train_tasks)?),
        Strategy::Maml => None,
    };

    let (g, d) = nets(&cfg, &schema);
    let models = models(cfg.loss_mode, &g, &d);
    let mut state = match &args.run.resume {
        Some(dir) => {
            let s = TrainState::load(dir)?;
            if s.seed != seed {
                return Err(CliError::Usage(format!("{} was trained with seed {}, not {seed}", dir.display(), s.seed)));
            }
            s.generator.check_layout(&g)?;
            match (&s.discriminator, cfg.loss_mode) {
                (Some(p), LossMode::Adversarial) => p.check_layout(&d)?,
                (None, LossMode::Adversarial) => {
                    return Err(CliError::Usage(format!("{} has no discriminator to resume", dir.display())));
                }
                _ => {}
            }
            s
        }
        None => {
            let gen = match &cfg.pretrained_encoder {
                Some(dir) => load_pretrained_encoder(dir, &g, derive_seed(seed, GENERATOR_SEED))?,
                None => init_params(&g, derive_seed(seed, GENERATOR_SEED)),
            };
            let disc = (cfg.loss_mode == LossMode::Adversarial).then(|| init_params(&d, derive_seed(seed, DISCRIMINATOR_SEED)));
            TrainState::new(gen, disc, &meta)
        }
    };

    let out = cfg.out_dir.clone();
    create_dir(&out.join("checkpoints"))?;
    cfg.save(&out.join("config.json"))?;
    write_text(&out.join("norm_stats.json"), &serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    log::info!("{}", serde_json::to_string(&cfg).unwrap_or_default());

    let label = mode_label(&cfg);
    let adapt = cfg.strategy == Strategy::Maml;
    while state.epoch < cfg.epochs {
        let loss = match (&joint, cfg.strategy) {
            (Some(data), _) => joint_epoch(&mut state, models, data, &meta, cfg.loss_mode)?,
            (None, _) => maml_epoch(&mut state, models, &train_tasks, &meta, cfg.loss_mode)?,
        };
        let epoch = state.epoch;
        let mut rows = Vec::new();
        if val_tasks.is_empty() {
            log::warn!("validation split is empty; no metrics for epoch {epoch}");
        } else {
            let mut modes = vec![(label.clone(), adapt)];
            if adapt {
                modes.push((format!("{label}-noadapt"), false));
            }
            for (mode, a) in modes {
                let evals = evaluate_few_shot(&state, models, &val_tasks, &meta, cfg.loss_mode, a, &stats, &schema)?;
                rows.push(MetricsRecord { epoch, split: "val".into(), mode, mae: mean_mae(&evals) }.to_line());
            }
        }
        append_lines(&out.join("metrics.tsv"), MetricsRecord::HEADER, &rows)?;
        state.save(&out.join("checkpoints").join(format!("epoch-{epoch:03}")))?;
        log::info!("epoch {epoch} train loss {loss:.5}");
    }

    if test_ids.is_empty() {
        log::warn!("test split is empty; no report written");
        return Ok(());
    }
    let test_tasks = build_tasks(&archive, &test_ids, &cfg, &stats)?;
    let reports: Vec<(&str, bool)> = if adapt {
        vec![("report-adapted.txt", true), ("report-unadapted.txt", false)]
    } else {
        vec![("report.txt", false)]
    };
    for (file, a) in reports {
        let evals = evaluate_few_shot(&state, models, &test_tasks, &meta, cfg.loss_mode, a, &stats, &schema)?;
        let report = skill_report(&evals, &cfg.thresholds, cfg.aggregation)?;
        write_text(&out.join(file), &report.to_text())?;
    }
    Ok(())
}

/// Generator and discriminator specs recovered from saved parameter shapes.
fn infer_nets(state: &TrainState) -> Result<(UNetSpec, Option<PatchDiscSpec>), CliError> {
    let shape = |p: &stormmeta::nets::ParamSet, name: &str| -> Result<Vec<usize>, CliError> {
        p.get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| CliError::Runtime(format!("checkpoint has no parameter {name}")))
    };
    let enc = shape(&state.generator, "enc1.weight")?;
    let head = shape(&state.generator, "head.weight")?;
    let g = UNetSpec::new(enc[0], enc[1], head[0]);
    state.generator.check_layout(&g)?;
    let d = match &state.discriminator {
        Some(p) => {
            let d1 = shape(p, "d1.weight")?;
            let spec = PatchDiscSpec::new(d1[0], g.in_channels, d1[1] - g.in_channels);
            p.check_layout(&spec)?;
            Some(spec)
        }
        None => None,
    };
    Ok((g, d))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &args.thresholds {
        cfg.thresholds = t.clone();
    }
    if let Some(a) = args.aggregation {
        cfg.aggregation = a;
    }
    cfg.validate()?;
    let archive = open_archive(&args.archive)?;
    let ids = split_ids(&archive, &cfg)?[split_index(&args.split)].clone();
    if ids.is_empty() {
        return Err(CliError::Usage(format!("the {} split is empty", args.split)));
    }

    let report = match (&args.checkpoint, &args.predictions) {
        (Some(dir), _) => {
            check_resolution(&archive)?;
            let state = TrainState::load(dir)?;
            let (g, d) = infer_nets(&state)?;
            let mode = if d.is_some() && args.adapt { cfg.loss_mode } else { LossMode::Reconstruction };
            let d = d.unwrap_or_default();
            let models = models(mode, &g, &d);
            let [train_ids, _, _] = split_ids(&archive, &cfg)?;
            let stats = train_stats(&archive, &train_ids)?;
            let tasks = build_tasks(&archive, &ids, &cfg, &stats)?;
            let meta = MetaConfig { seed: state.seed, ..cfg.meta_config() };
            let evals = evaluate_few_shot(&state, models, &tasks, &meta, mode, args.adapt, &stats, archive.schema())?;
            skill_report(&evals, &cfg.thresholds, cfg.aggregation)?
        }
        (None, Some(pred_dir)) => {
            let preds = open_archive(pred_dir)?;
            let frames = cfg.n_support..cfg.n_support + cfg.n_query;
            let (tc, pc) = (archive.schema().target_index, preds.schema().target_index);
            let mut p_frames = Vec::new();
            let mut t_frames = Vec::new();
            for id in &ids {
                let t = archive.load(id)?;
                let p = preds.load(id)?;
                if p.height() != t.height() || p.width() != t.width() {
                    return Err(CliError::Usage(format!("{id}: prediction and target resolutions differ")));
                }
                if t.frames() < frames.end || p.frames() < frames.end {
                    return Err(CliError::Usage(format!("{id}: fewer than {} frames", frames.end)));
                }
                let plane = |e: &EventTensor, f: usize, c: usize| {
                    Tensor::new([e.height(), e.width()], e.plane(f, c).iter().map(|&v| v as f64).collect())
                };
                for f in frames.clone() {
                    p_frames.push(plane(&p, f, pc));
                    t_frames.push(plane(&t, f, tc));
                }
            }
            evaluate_archive(&p_frames, &t_frames, &cfg.thresholds, cfg.aggregation)?
        }
        (None, None) => return Err(CliError::Usage("either --checkpoint or --predictions is required".into())),
    };
    let text = report.to_text();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&args.out, &text)?;
    print!("{text}");
    Ok(())
}

//! One function per subcommand. Everything is written below `Ctx::out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use biaslens::audit::{
    derive, resume_audit, run_audit, run_mitigation, run_recalibration, run_seeds, AuditRun, BiasReport, DataSource,
    LabeledDataset, MitigationRun, Strategy,
};
use biaslens::behavior::{export_heatmap, lrp_propagate, mean_query, track_behavior, vit_grid, ProbeSet};
use biaslens::dataset::{compute_distribution, load_manifest, stratified_split, write_manifest, AnnotationRecord, DatasetManifest};
use biaslens::loss::{compute_class_weights, WeightedCrossEntropy};
use biaslens::nn::{train, Architecture, Mode, Model, ModelSnapshot, NoHook};
use biaslens::sampling::{
    apply_augment_with_image, apply_subset_step, build_subset_schedule, op_for_record, resample_with_indices, AugmentOp,
    ResamplePlan,
};
use biaslens::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::cli::{
    AnalyzeArgs, AugmentArgs, AuditArgs, HeatmapArgs, HeatmapKind, MitigateArgs, RecalibrateArgs, ReportArgs,
    ResampleArgs, ResampleModeArg, TrainArgs, WeightsArg,
};
use crate::config::{resolve_audit, resolve_model, resolve_options, resolve_source, resolve_train, RunConfig};

/// Outcome a command can end with besides success.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Mismatch(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

pub struct Ctx {
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub file: RunConfig,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with sorted keys and a trailing newline.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn source_json(source: &DataSource) -> serde_json::Value {
    serde_json::to_value(source).unwrap_or(serde_json::Value::Null)
}

/// Records whose `image_ref`s resolve from `out`. Synthetic images are written to
/// `out/images/`; manifest images are pointed at with absolute paths.
fn materialize(data: &LabeledDataset, source: &DataSource, out: &Path) -> Result<DatasetManifest> {
    let mut manifest = data.manifest.clone();
    match source {
        DataSource::Synthetic(_) => {
            let dir = out.join("images");
            ensure_dir(&dir)?;
            for (r, img) in manifest.records.iter_mut().zip(&data.images) {
                let rel = format!("images/{}.pgm", file_stem(&r.sample_id));
                img.write_pgm(&out.join(&rel))?;
                r.image_ref = Some(rel);
            }
        }
        DataSource::Manifest(path) => {
            let parent = path.parent().unwrap_or(Path::new("."));
            let base = fs::canonicalize(if parent.as_os_str().is_empty() { Path::new(".") } else { parent })
                .map_err(|source| Error::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            for r in &mut manifest.records {
                if let Some(rel) = &r.image_ref {
                    r.image_ref = Some(base.join(rel).to_string_lossy().into_owned());
                }
            }
        }
    }
    Ok(manifest)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> CmdResult {
    let source = resolve_source(&a.data, &ctx.file, ctx.seed)?;
    let manifest = match &source {
        DataSource::Manifest(path) => load_manifest(path)?,
        DataSource::Synthetic(_) => source.load()?.manifest,
    };
    let dist = compute_distribution(&manifest)?;
    ensure_dir(&ctx.out)?;
    write_text(&ctx.out.join("distribution.csv"), &dist.to_csv())?;
    write_json(&ctx.out.join("distribution.json"), &dist)?;
    let classes: Vec<String> = manifest.taxonomy.iter().cloned().collect();
    match compute_class_weights(&dist, &classes) {
        Ok(w) => write_json(&ctx.out.join("weights.json"), &w)?,
        Err(Error::ZeroCount(c)) => eprintln!("note: class '{c}' has no instances, weights.json not written"),
        Err(e) => return Err(e.into()),
    }
    write_json(
        &ctx.out.join("config.json"),
        &json!({ "command": "analyze", "seed": ctx.seed, "source": source_json(&source) }),
    )?;
    for c in &classes {
        println!(
            "{c:<32} {:>9} {:>8.2}%",
            dist.count(c),
            dist.percentage(c).unwrap_or(0.0)
        );
    }
    println!("{:<32} {:>9}", "total", dist.total);
    Ok(())
}

/// Classes ordered by count, largest first; ties by name.
fn by_count_desc(manifest: &DatasetManifest) -> Vec<String> {
    let mut v: Vec<(String, usize)> = manifest.class_counts().into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(c, _)| c).collect()
}

pub fn resample(ctx: &Ctx, a: &ResampleArgs) -> CmdResult {
    let source = resolve_source(&a.data, &ctx.file, ctx.seed)?;
    let data = source.load()?;
    ensure_dir(&ctx.out)?;
    let manifest = materialize(&data, &source, &ctx.out)?;
    let seed = derive(ctx.seed, "resample");
    let (resampled, plan) = match a.mode {
        ResampleModeArg::Subset => {
            let order = by_count_desc(&manifest);
            let classes: [String; 3] = order.try_into().map_err(|v: Vec<String>| {
                Error::InvalidArgument(format!("--mode subset needs exactly 3 classes, found {}", v.len()))
            })?;
            let schedule = build_subset_schedule(&classes, a.budget, a.share, a.share, 1)?;
            let step = &schedule.steps[0];
            (apply_subset_step(&manifest, step, seed)?, serde_json::to_value(&schedule).map_err(Error::from)?)
        }
        mode => {
            let plan = match mode {
                ResampleModeArg::Oversample => ResamplePlan::to_max(&manifest, seed)?,
                ResampleModeArg::Undersample => ResamplePlan::to_min(&manifest, seed)?,
                _ => ResamplePlan::to_median(&manifest, seed)?,
            };
            (resample_with_indices(&manifest, &plan)?.0, serde_json::to_value(&plan).map_err(Error::from)?)
        }
    };
    write_manifest(&resampled, &ctx.out.join("resampled.jsonl"))?;
    write_json(&ctx.out.join("plan.json"), &plan)?;
    write_json(
        &ctx.out.join("config.json"),
        &json!({
            "command": "resample",
            "seed": ctx.seed,
            "source": source_json(&source),
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "budget": a.budget,
            "share": a.share,
        }),
    )?;
    for (c, n) in resampled.class_counts() {
        println!("{c:<32} {n:>9}");
    }
    Ok(())
}

/// `fliph`, `flipv`, `rot90`, `rot180`, `rot270`, `brightness:D`, `contrast:F`, `zoom:F`.
pub fn parse_op(s: &str) -> Result<AugmentOp> {
    let bad = || Error::InvalidArgument(format!("--ops: unknown op '{s}'"));
    let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
    match s.trim().split_once(':') {
        None => match s.trim() {
            "fliph" => Ok(AugmentOp::FlipH),
            "flipv" => Ok(AugmentOp::FlipV),
            "rot90" => Ok(AugmentOp::Rot90CW),
            "rot180" => Ok(AugmentOp::Rot180),
            "rot270" => Ok(AugmentOp::Rot270CW),
            _ => Err(bad()),
        },
        Some(("brightness", v)) => Ok(AugmentOp::Brightness(num(v)?)),
        Some(("contrast", v)) => Ok(AugmentOp::Contrast(num(v)?)),
        Some(("zoom", v)) => Ok(AugmentOp::Zoom(num(v)?)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct Skipped {
    sample_id: String,
    op: String,
    reason: String,
}

pub fn augment(ctx: &Ctx, a: &AugmentArgs) -> CmdResult {
    let ops = a.ops.split(',').map(parse_op).collect::<Result<Vec<_>>>()?;
    if ops.is_empty() {
        return Err(Error::InvalidArgument("--ops is empty".into()).into());
    }
    let source = resolve_source(&a.data, &ctx.file, ctx.seed)?;
    let data = source.load()?;
    if let Some(c) = &a.class {
        if !data.manifest.taxonomy.contains(c) {
            return Err(Error::UnknownClass(c.clone()).into());
        }
    }
    ensure_dir(&ctx.out)?;
    let mut records = materialize(&data, &source, &ctx.out)?.records;
    let img_dir = ctx.out.join("images");
    ensure_dir(&img_dir)?;
    let seed = derive(ctx.seed, "augment");
    let mut added: Vec<AnnotationRecord> = Vec::new();
    let mut skipped = Vec::new();
    for (r, img) in data.manifest.records.iter().zip(&data.images) {
        if a.class.as_ref().is_some_and(|c| c != &r.class_label) {
            continue;
        }
        let chosen = if a.all_ops { ops.clone() } else { vec![op_for_record(seed, &r.sample_id, &ops)?] };
        for op in chosen {
            match apply_augment_with_image(r, img, op) {
                Ok((mut rec, out_img)) => {
                    rec.sample_id = format!("{}-{}", r.sample_id, op.tag());
                    let rel = format!("images/{}.pgm", file_stem(&rec.sample_id));
                    out_img.write_pgm(&ctx.out.join(&rel))?;
                    rec.image_ref = Some(rel);
                    added.push(rec);
                }
                Err(e) => skipped.push(Skipped {
                    sample_id: r.sample_id.clone(),
                    op: op.tag(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    let n_added = added.len();
    records.extend(added);
    let manifest = DatasetManifest::new(records, data.manifest.seed)?;
    write_manifest(&manifest, &ctx.out.join("augmented.jsonl"))?;
    write_json(&ctx.out.join("skipped.json"), &skipped)?;
    write_json(
        &ctx.out.join("config.json"),
        &json!({
            "command": "augment",
            "seed": ctx.seed,
            "source": source_json(&source),
            "ops": ops,
            "all_ops": a.all_ops,
            "class": a.class,
        }),
    )?;
    println!("{n_added} augmented records added, {} skipped", skipped.len());
    Ok(())
}

pub fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let kind = resolve_model(a.model, &ctx.file);
    let source = resolve_source(&a.data, &ctx.file, ctx.seed)?;
    let train_cfg = resolve_train(kind, ctx.seed, &a.train, &ctx.file)?;
    let options = resolve_options(&a.options, &ctx.file);
    let data = source.load()?;
    let classes: Vec<String> = data.manifest.taxonomy.iter().cloned().collect();
    let arch = Architecture::default_for(kind, classes.len());
    let split = stratified_split(
        &data.manifest,
        options.train_fraction,
        options.val_fraction,
        derive(ctx.seed, "split"),
    )?;
    let input = arch.input_size();
    let train_ds = data.subset(&split.train);
    let train_set = train_ds.to_train_set(&classes, input)?;
    let val_set = data.subset(&split.val).to_train_set(&classes, input)?;
    let init_seed = derive(ctx.seed, "init");
    let mut model = Model::new(arch.clone(), init_seed)?;
    let weights = match a.weights {
        WeightsArg::Uniform => None,
        WeightsArg::CostSensitive => Some(compute_class_weights(&compute_distribution(&train_ds.manifest)?, &classes)?),
    };
    let objective = match &weights {
        None => WeightedCrossEntropy::unweighted(classes.len()),
        Some(w) => WeightedCrossEntropy::from_weights(w, &classes)?,
    };
    ensure_dir(&ctx.out)?;
    let trace = if a.track_behavior {
        let probe = ProbeSet::from_set(&val_set, options.behavior.probe_per_class, derive(ctx.seed, "probe"))?;
        let (trace, series, _) = track_behavior(
            &mut model,
            &train_set,
            Some(&val_set),
            &train_cfg,
            &objective,
            &probe,
            &options.behavior,
            false,
        )?;
        write_text(&ctx.out.join("behavior.csv"), &series.to_csv())?;
        let plateau = series.plateaued(options.behavior.plateau_delta, options.behavior.plateau_window);
        write_json(&ctx.out.join("plateau.json"), &plateau)?;
        trace
    } else {
        train(&mut model, &train_set, Some(&val_set), &train_cfg, &objective, &mut NoHook)?
    };
    ModelSnapshot::capture(&model, init_seed, Some(train_cfg.clone()), Some(train_cfg.epochs)).save(&ctx.out.join("model.snapshot"))?;
    write_text(&ctx.out.join("trace.csv"), &trace.to_csv())?;
    if let Some(w) = &weights {
        write_json(&ctx.out.join("weights.json"), w)?;
    }
    write_json(
        &ctx.out.join("config.json"),
        &json!({
            "command": "train",
            "seed": ctx.seed,
            "source": source_json(&source),
            "model": arch,
            "train": train_cfg,
            "options": options,
            "weights": format!("{:?}", a.weights).to_lowercase(),
        }),
    )?;
    if let Some(last) = trace.last() {
        println!("epoch {} loss {:.4}", last.epoch, last.loss);
        for (c, r) in classes.iter().zip(&last.recall) {
            println!("{c:<32} recall {}", r.map_or("-".into(), |v| format!("{v:.3}")));
        }
    }
    Ok(())
}

fn parse_strategy(s: Option<&str>, file: &RunConfig) -> Result<Strategy> {
    s.or(file.strategy.as_deref())
        .unwrap_or("combined")
        .parse()
        .map_err(|e: Error| Error::InvalidArgument(format!("--strategy: {e}")))
}

fn write_audit_run(out: &Path, run: &AuditRun) -> Result<PathBuf> {
    let dir = out.join(run.config.run_dir_name()?);
    ensure_dir(&dir)?;
    write_text(&dir.join("report.json"), &run.report.to_canonical_json()?)?;
    write_text(&dir.join("report.txt"), &run.report.summary_text())?;
    write_json(&dir.join("config.json"), &run.config)?;
    ModelSnapshot::capture(&run.baseline, derive(run.config.seed, "init"), Some(run.config.train.clone()), None)
        .save(&dir.join("baseline.snapshot"))?;
    if let Some(t) = &run.baseline_trace {
        write_text(&dir.join("trace.csv"), &t.to_csv())?;
    }
    write_text(&dir.join("iou_by_condition.csv"), &run.report.pre.iou_by_condition.to_csv())?;
    write_manifest(&run.data.manifest, &dir.join("manifest.jsonl"))?;
    write_json(&dir.join("split.json"), &run.split)?;
    Ok(dir)
}

fn write_mitigation(dir: &Path, m: &MitigationRun, seed: u64) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("report.json"), &m.report.to_canonical_json()?)?;
    write_text(&dir.join("report.txt"), &m.report.summary_text())?;
    write_text(&dir.join("trace.csv"), &m.trace.to_csv())?;
    ModelSnapshot::capture(&m.model, derive(seed, "init"), Some(m.report.config.train.clone()), None)
        .save(&dir.join("model.snapshot"))?;
    write_manifest(&m.train_data.manifest, &dir.join("train_manifest.jsonl"))
}

pub fn audit(ctx: &Ctx, a: &AuditArgs) -> CmdResult {
    let kind = resolve_model(a.model, &ctx.file);
    let strategy = match a.strategy.as_deref() {
        Some(s) => Some(parse_strategy(Some(s), &ctx.file)?),
        None => ctx.file.strategy.as_deref().map(|s| parse_strategy(Some(s), &ctx.file)).transpose()?,
    };
    let seeds = if a.seeds.is_empty() { vec![ctx.seed] } else { a.seeds.clone() };
    // resolve everything up front so configuration errors surface before any training
    let mut configs = BTreeMap::new();
    for &seed in &seeds {
        let source = resolve_source(&a.data, &ctx.file, seed)?;
        let n_classes = match &source {
            DataSource::Manifest(p) => load_manifest(p)?.taxonomy.len(),
            DataSource::Synthetic(c) => c.proportions.len(),
        };
        configs.insert(seed, resolve_audit(source, kind, n_classes, seed, &a.train, &a.options, &ctx.file)?);
    }
    ensure_dir(&ctx.out)?;
    let dirs = run_seeds(&seeds, ctx.jobs, |seed| {
        let cfg = &configs[&seed];
        let run = run_audit(cfg, cfg.source.load()?)?;
        let dir = write_audit_run(&ctx.out, &run)?;
        if let Some(s) = strategy {
            let m = run_mitigation(&run, s)?;
            write_mitigation(&dir.join(s.as_str()), &m, seed)?;
        }
        Ok(dir)
    })?;
    for d in dirs {
        println!("{}", d.display());
    }
    Ok(())
}

fn load_run(from: &Path) -> Result<AuditRun> {
    let report = BiasReport::from_json(&read_text(&from.join("report.json"))?)?;
    let snapshot = ModelSnapshot::load(&from.join("baseline.snapshot"))?;
    let data = report.config.source.load()?;
    resume_audit(report, snapshot.to_model()?, data)
}

fn run_dir_name(from: &Path, run: &AuditRun) -> Result<String> {
    match from.file_name() {
        Some(n) => Ok(n.to_string_lossy().into_owned()),
        None => run.config.run_dir_name(),
    }
}

pub fn mitigate(ctx: &Ctx, a: &MitigateArgs) -> CmdResult {
    let strategy = parse_strategy(a.strategy.as_deref(), &ctx.file)?;
    let run = load_run(&a.from)?;
    let m = run_mitigation(&run, strategy)?;
    let dir = ctx.out.join(run_dir_name(&a.from, &run)?).join(strategy.as_str());
    write_mitigation(&dir, &m, run.config.seed)?;
    write_json(
        &dir.join("config.json"),
        &json!({ "command": "mitigate", "from": a.from, "strategy": strategy.as_str(), "audit": run.config }),
    )?;
    print!("{}", m.report.summary_text());
    Ok(())
}

pub fn recalibrate(ctx: &Ctx, a: &RecalibrateArgs) -> CmdResult {
    let run = load_run(&a.from)?;
    let (m, state) = run_recalibration(&run)?;
    let dir = ctx.out.join(run_dir_name(&a.from, &run)?).join("recalibrate");
    write_mitigation(&dir, &m, run.config.seed)?;
    write_json(&dir.join("recalibration.json"), &state)?;
    write_json(
        &dir.join("config.json"),
        &json!({ "command": "recalibrate", "from": a.from, "audit": run.config }),
    )?;
    print!("{}", m.report.summary_text());
    Ok(())
}

/// Recomputes a report from its own config: the audit, then the recorded mitigation.
fn recompute(report: &BiasReport) -> Result<BiasReport> {
    let run = run_audit(&report.config, report.config.source.load()?)?;
    Ok(match &report.mitigation {
        None => run.report,
        Some(m) if m.recalibration.is_some() => run_recalibration(&run)?.0.report,
        Some(m) => run_mitigation(&run, m.strategy)?.report,
    })
}

pub fn report(ctx: &Ctx, a: &ReportArgs) -> CmdResult {
    let text = read_text(&a.report)?;
    let report = BiasReport::from_json(&text)?;
    print!("{}", report.summary_text());
    if a.verify {
        let again = recompute(&report)?.to_canonical_json()?;
        if again != text {
            ensure_dir(&ctx.out)?;
            let path = ctx.out.join("recomputed-report.json");
            write_text(&path, &again)?;
            return Err(Failure::Mismatch(format!(
                "recomputed report differs from {}; recomputation written to {}",
                a.report.display(),
                path.display()
            )));
        }
        println!("verified: recomputation is byte-identical");
    }
    Ok(())
}

pub fn heatmap(ctx: &Ctx, a: &HeatmapArgs) -> CmdResult {
    let snapshot = ModelSnapshot::load(&a.snapshot)?;
    let model = snapshot.to_model()?;
    let grid = vit_grid(&model)?;
    let source = resolve_source(&a.data, &ctx.file, ctx.seed)?;
    let data = source.load()?;
    let idx = data
        .manifest
        .records
        .iter()
        .position(|r| r.sample_id == a.sample)
        .ok_or_else(|| Error::InvalidArgument(format!("--sample: no record with sample_id '{}'", a.sample)))?;
    let record = data.manifest.records[idx].clone();
    let classes: Vec<String> = data.manifest.taxonomy.iter().cloned().collect();
    if classes.len() != model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "--snapshot predicts {} classes but the data has {}",
            model.n_classes(),
            classes.len()
        ))
        .into());
    }
    let set = data.subset(&[idx]).to_train_set(&classes, model.architecture().input_size())?;
    let pass = model.forward(&set.batch(&[0])?, Mode::Eval)?;
    let (layers, heads, n) = pass
        .attention_dims()
        .ok_or_else(|| Error::MissingCache("forward pass kept no attention".into()))?;
    let map = match a.kind {
        HeatmapKind::Attention => {
            let layer = a.layer.unwrap_or(layers - 1);
            if layer >= layers {
                return Err(Error::InvalidArgument(format!("--layer {layer} out of range (model has {layers})")).into());
            }
            let full = match a.head {
                Some(h) if h >= heads => {
                    return Err(Error::InvalidArgument(format!("--head {h} out of range (model has {heads})")).into())
                }
                Some(h) => pass.attention(0, layer, h).expect("attention cached").to_vec(),
                None => {
                    let mut m = vec![0.0; n * n];
                    for h in 0..heads {
                        let att = pass.attention(0, layer, h).expect("attention cached");
                        m.iter_mut().zip(att).for_each(|(acc, v)| *acc += v / heads as f64);
                    }
                    m
                }
            };
            mean_query(&full, n)
        }
        HeatmapKind::Relevance => lrp_propagate(&model, &pass, 0, None)?.input().to_vec(),
    };
    let in_box = grid.tokens_in_box(&record.bbox, record.image_size)?.iter().map(|&t| map[t]).sum::<f64>()
        / map.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    ensure_dir(&ctx.out)?;
    let kind = format!("{:?}", a.kind).to_lowercase();
    let stem = ctx.out.join(format!("heatmap-{}-{kind}", file_stem(&a.sample)));
    let (pgm, csv) = export_heatmap(&map, grid.cols, grid.rows, a.scale, &stem)?;
    write_json(
        &stem.with_extension("json"),
        &json!({
            "sample_id": a.sample,
            "class_label": record.class_label,
            "predicted": classes[pass.predictions()[0]],
            "kind": kind,
            "layer": a.layer,
            "head": a.head,
            "in_box_fraction": in_box,
            "snapshot": a.snapshot,
        }),
    )?;
    println!("{}\n{}\nin-box share {in_box:.4}", pgm.display(), csv.display());
    Ok(())
}

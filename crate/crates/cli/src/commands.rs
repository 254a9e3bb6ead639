use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use panoseg::adapt::{adapt_loop, train_source, AdaptConfig, Labeled, LogRecord, TrainConfig};
use panoseg::data::{self, BenchmarkConfig, Image, LabelMap, Manifest, Split};
use panoseg::deform::{write_offset_csv, Restriction, OFFSET_CSV_HEADER};
use panoseg::geometry::{cubemap_to_erp_lut, resample, Cubemap, Face, ProjectionSpec, Raster};
use panoseg::metrics::{
    directional_miou, evaluate, fov_sweep, predict, write_direction_csv, write_fov_csv, ConfusionMatrix, EVAL_BATCH,
};
use panoseg::model::{DecoderKind, Model, ModelConfig, PatchEmbedKind, Preset};

use crate::output::{create_dir, fmt_opt, write_json, write_run, write_text, JsonLines, Palette};
use crate::{
    AblateHparamsArgs, AblateRArgs, AdaptArgs, Command, DecoderArg, DirArgs, EvalArgs, EvalData, FovArgs, GenDataArgs,
    ModelArgs, PatchEmbedArg, PresetArg, ProjectArgs, SplitArg, TrainArgs, VisualizeArgs,
};

pub const CHECKPOINT: &str = "model.t4p";

pub fn run(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Adapt(a) => adapt(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::FovSweep(a) => fov(a, argv),
        Command::DirMiou(a) => dir_miou(a, argv),
        Command::Project(a) => project(a, argv),
        Command::Visualize(a) => visualize(a, argv),
        Command::AblateR(a) => ablate_r(a, argv),
        Command::AblateHparams(a) => ablate_hparams(a, argv),
    }
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Toy => Preset::Toy,
        PresetArg::Tiny => Preset::Tiny,
        PresetArg::Small => Preset::Small,
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

/// Parses `--r`: a positive integer, or `inf` for no restriction.
pub fn parse_r(s: &str) -> Result<Restriction> {
    match s.trim() {
        "inf" | "Inf" | "INF" | "∞" => Ok(None),
        t => {
            let v: u32 = t.parse().with_context(|| format!("--r expects a positive integer or `inf`, got `{t}`"))?;
            ensure!(v > 0, "--r must be positive");
            Ok(Some(v))
        }
    }
}

fn r_name(r: Restriction) -> String {
    r.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} `{}` does not exist", path.display());
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}

/// Deserializes `base` with the keys of `overlay` replacing its fields.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overlay: Option<&Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(o) = overlay {
        let obj = o.as_object().context("config must be a JSON object")?;
        let target = v.as_object_mut().expect("configs serialize to objects");
        for (k, val) in obj {
            ensure!(target.contains_key(k), "unknown config key `{k}`");
            target.insert(k.clone(), val.clone());
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// Splits a run config file into its `model` section and the rest.
fn config_sections(path: Option<&PathBuf>) -> Result<(Option<Value>, Option<Value>)> {
    let Some(path) = path else { return Ok((None, None)) };
    let mut v = read_json(path)?;
    let obj = v.as_object_mut().context("config must be a JSON object")?;
    let model = obj.remove("model");
    Ok((model, Some(v)))
}

fn model_config(args: &ModelArgs, model_section: Option<&Value>, num_classes: usize) -> Result<ModelConfig> {
    let mut cfg = overlay(&ModelConfig::preset(preset(args.preset), num_classes), model_section)?;
    cfg.num_classes = num_classes;
    if let Some(d) = args.decoder {
        cfg.decoder = match d {
            DecoderArg::V1 => DecoderKind::V1,
            DecoderArg::V2 => DecoderKind::V2,
        };
    }
    if let Some(p) = args.patch_embed {
        cfg.patch_embed = match p {
            PatchEmbedArg::Standard => PatchEmbedKind::Standard,
            PatchEmbedArg::Deformable => PatchEmbedKind::Deformable,
        };
    }
    if let Some(r) = &args.r {
        cfg.r = parse_r(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn classes(manifest: &Path) -> Result<Vec<String>> {
    require_file(manifest, "manifest")?;
    Ok(Manifest::load(manifest)?.classes)
}

fn labeled(manifest: &Path, s: Split) -> Result<Vec<Labeled>> {
    require_file(manifest, "manifest")?;
    let samples = data::load_samples(manifest, Some(s))?;
    Ok(samples.into_iter().map(|x| (x.image, x.labels)).collect())
}

fn nonempty(set: Vec<Labeled>, manifest: &Path, s: &str) -> Result<Vec<Labeled>> {
    ensure!(!set.is_empty(), "manifest {} has no {s} samples", manifest.display());
    Ok(set)
}

fn refs(set: &[Labeled]) -> Vec<(&Image, &LabelMap)> {
    set.iter().map(|(i, l)| (i, l)).collect()
}

fn load_model(path: &Path, num_classes: usize) -> Result<Model> {
    require_file(path, "checkpoint")?;
    let model = Model::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    ensure!(
        model.cfg.num_classes == num_classes,
        "checkpoint predicts {} classes, manifest has {num_classes}",
        model.cfg.num_classes
    );
    Ok(model)
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let file = a.config.as_ref().map(|p| read_json(p)).transpose()?;
    let mut cfg = overlay(&BenchmarkConfig::default(), file.as_ref())?;
    cfg.seed = a.seed;
    create_dir(&a.out)?;
    let manifest = data::gen_benchmark(&a.out, &cfg)?;
    write_run(&a.out, "gen-data", argv, Some(cfg.seed), &cfg)?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let classes = classes(&a.manifest_source)?;
    let (model_section, rest) = config_sections(a.config.as_ref())?;
    let base = TrainConfig {
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut cfg = overlay(&base, rest.as_ref())?;
    cfg.seed = a.seed;
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    let mcfg = model_config(&a.model, model_section.as_ref(), classes.len())?;
    let source = nonempty(labeled(&a.manifest_source, Split::Train)?, &a.manifest_source, "train")?;
    let val_manifest = a.manifest_target.as_ref().unwrap_or(&a.manifest_source);
    let val = labeled(val_manifest, Split::Val)?;
    create_dir(&a.out)?;
    write_run(&a.out, "train", argv, Some(cfg.seed), json!({ "model": mcfg, "train": cfg }))?;

    let mut model = Model::new(mcfg, cfg.seed)?;
    let mut log = JsonLines::create(a.out.join("train_log.jsonl"))?;
    let start = Instant::now();
    let val_ref = (!val.is_empty()).then_some(val.as_slice());
    train_source(&mut model, &source, val_ref, &cfg, &mut |r| log.push(r))?;
    log.finish()?;
    model.save(a.out.join(CHECKPOINT))?;
    log::info!("trained {} iterations in {:.1}s", cfg.iters, start.elapsed().as_secs_f64());
    Ok(())
}

fn adapt(a: AdaptArgs, argv: &[String]) -> Result<()> {
    let classes = classes(&a.manifest_source)?;
    let (model_section, rest) = config_sections(a.config.as_ref())?;
    let mut cfg = overlay(&AdaptConfig::default(), rest.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.max_iters = n;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    cfg.validate()?;
    let mut model = match &a.checkpoint {
        Some(p) => load_model(p, classes.len())?,
        None => Model::new(model_config(&a.model, model_section.as_ref(), classes.len())?, cfg.seed)?,
    };
    let source = nonempty(labeled(&a.manifest_source, Split::Train)?, &a.manifest_source, "train")?;
    let target: Vec<Image> = labeled(&a.manifest_target, Split::Train)?.into_iter().map(|s| s.0).collect();
    ensure!(!target.is_empty(), "manifest {} has no train samples", a.manifest_target.display());
    let val = labeled(&a.manifest_target, Split::Val)?;
    create_dir(&a.out)?;
    write_run(&a.out, "adapt", argv, Some(cfg.seed), json!({ "model": model.cfg, "adapt": cfg }))?;

    let mut log = JsonLines::create(a.out.join("adapt_log.jsonl"))?;
    let val_ref = (!val.is_empty()).then_some(val.as_slice());
    let before = val_ref.map(|v| evaluate(&model, &refs(v))).transpose()?;
    let report = adapt_loop(&mut model, &source, &target, val_ref, &cfg, &mut |r| log.push(r))?;
    log.finish()?;
    model.save(a.out.join(CHECKPOINT))?;
    if let Some(p) = &report.prototypes {
        write_json(&a.out.join("prototypes.json"), p)?;
    }
    if let (Some(before), Some(v)) = (before, val_ref) {
        let after = evaluate(&model, &refs(v))?;
        let summary = json!({ "target_val_miou_before": before.miou(), "target_val_miou_after": after.miou() });
        write_json(&a.out.join("summary.json"), &summary)?;
        log::info!("target val mIoU {} -> {}", fmt_opt(before.miou()), fmt_opt(after.miou()));
    }
    Ok(())
}

struct EvalSet {
    model: Model,
    classes: Vec<String>,
    samples: Vec<Labeled>,
}

fn eval_set(d: &EvalData) -> Result<EvalSet> {
    let classes = classes(&d.manifest_target)?;
    let model = load_model(&d.checkpoint, classes.len())?;
    let name = format!("{:?}", d.split).to_lowercase();
    let samples = nonempty(labeled(&d.manifest_target, split(d.split))?, &d.manifest_target, &name)?;
    create_dir(&d.out)?;
    Ok(EvalSet {
        model,
        classes,
        samples,
    })
}

fn eval_record(d: &EvalData) -> Value {
    json!({
        "checkpoint": d.checkpoint,
        "manifest": d.manifest_target,
        "split": format!("{:?}", d.split).to_lowercase(),
    })
}

/// `metrics.json` contents for a confusion matrix.
pub fn metrics_json(conf: &ConfusionMatrix, classes: &[String]) -> Value {
    let iou: serde_json::Map<String, Value> =
        classes.iter().zip(conf.iou()).map(|(c, v)| (c.clone(), json!(v))).collect();
    let k = conf.num_classes;
    let rows: Vec<Vec<u64>> = (0..k).map(|g| (0..k).map(|p| conf.get(g, p)).collect()).collect();
    json!({
        "miou": conf.miou(),
        "pixel_accuracy": conf.pixel_accuracy(),
        "iou": iou,
        "confusion": rows,
        "pixels": conf.total(),
        "ignored": conf.ignored,
    })
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let set = eval_set(&a.data)?;
    write_run(&a.data.out, "eval", argv, None, eval_record(&a.data))?;
    let conf = evaluate(&set.model, &refs(&set.samples))?;
    write_json(&a.data.out.join("metrics.json"), &metrics_json(&conf, &set.classes))?;
    let mut csv = String::from("class,iou\n");
    for (c, v) in set.classes.iter().zip(conf.iou()) {
        csv += &format!("{c},{}\n", fmt_opt(v));
    }
    csv += &format!("mean,{}\n", fmt_opt(conf.miou()));
    write_text(&a.data.out.join("metrics.csv"), &csv)?;
    log::info!("mIoU {} over {} images", fmt_opt(conf.miou()), set.samples.len());
    Ok(())
}

fn fov(a: FovArgs, argv: &[String]) -> Result<()> {
    let set = eval_set(&a.data)?;
    let mut rec = eval_record(&a.data);
    rec["fovs"] = json!(a.fovs);
    write_run(&a.data.out, "fov-sweep", argv, None, rec)?;
    let rows = fov_sweep(&set.model, &refs(&set.samples), &a.fovs)?;
    let mut buf = Vec::new();
    write_fov_csv(&mut buf, &rows, &set.classes)?;
    write_text(&a.data.out.join("fov_sweep.csv"), &String::from_utf8(buf)?)?;
    for r in &rows {
        log::info!("fov {} mIoU {}", r.fov_deg, fmt_opt(r.miou));
    }
    Ok(())
}

fn dir_miou(a: DirArgs, argv: &[String]) -> Result<()> {
    let set = eval_set(&a.data)?;
    let mut rec = eval_record(&a.data);
    rec["dirs"] = json!(a.dirs);
    write_run(&a.data.out, "dir-miou", argv, None, rec)?;
    let images: Vec<&Image> = set.samples.iter().map(|s| &s.0).collect();
    let preds = predict(&set.model, &images, EVAL_BATCH)?;
    let pred_refs: Vec<&LabelMap> = preds.iter().collect();
    let gt_refs: Vec<&LabelMap> = set.samples.iter().map(|s| &s.1).collect();
    let scores = directional_miou(&pred_refs, &gt_refs, a.dirs, set.model.cfg.num_classes)?;
    let mut buf = Vec::new();
    write_direction_csv(&mut buf, &scores)?;
    write_text(&a.data.out.join("directional.csv"), &String::from_utf8(buf)?)?;
    Ok(())
}

fn image_to_raster(img: &Image) -> Raster {
    Raster {
        height: img.height,
        width: img.width,
        channels: 3,
        data: img.data.iter().map(|&v| v as f64).collect(),
    }
}

fn raster_to_image(r: &Raster) -> Image {
    Image {
        width: r.width,
        height: r.height,
        data: r.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

fn project(a: ProjectArgs, argv: &[String]) -> Result<()> {
    let mut cube = Cubemap::default();
    let mut size = None;
    for f in Face::ALL {
        let path = a.input.join(format!("{}.ppm", f.name()));
        require_file(&path, "face image")?;
        let img = data::load_image(&path)?;
        ensure!(img.width == img.height, "face {} is {}x{}, faces must be square", f.name(), img.width, img.height);
        match size {
            None => size = Some(img.width),
            Some(s) => ensure!(s == img.width, "face {} is {} px, expected {s}", f.name(), img.width),
        }
        cube.faces[f.index()] = Some(image_to_raster(&img));
    }
    let face_size = size.expect("six faces");
    let height = a.height.unwrap_or(2 * face_size);
    let spec = ProjectionSpec::new(height, face_size);
    let lut = cubemap_to_erp_lut(&spec)?;
    let erp = resample(&cube, &lut)?;
    create_dir(&a.out)?;
    write_run(&a.out, "project", argv, None, json!({ "input": a.input, "height": height, "face_size": face_size }))?;
    data::save_image(a.out.join("erp.ppm"), &raster_to_image(&erp))?;
    Ok(())
}

fn colorize(labels: &LabelMap, palette: &Palette) -> Image {
    Image {
        width: labels.width,
        height: labels.height,
        data: labels.data.iter().flat_map(|&l| palette.color(l)).collect(),
    }
}

const OVERLAY_SCALE: usize = 2;
const STAGE_COLORS: [[u8; 3]; 4] = [[255, 40, 40], [40, 220, 40], [40, 120, 255], [255, 255, 255]];

fn upscale(img: &Image, s: usize) -> Image {
    let (w, h) = (img.width * s, img.height * s);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let i = ((y / s) * img.width + x / s) * 3;
            data.extend_from_slice(&img.data[i..i + 3]);
        }
    }
    Image {
        width: w,
        height: h,
        data,
    }
}

fn dot(img: &mut Image, y: f64, x: f64, color: [u8; 3]) {
    let (py, px) = (y * OVERLAY_SCALE as f64, x * OVERLAY_SCALE as f64);
    if py < 0.0 || px < 0.0 {
        return;
    }
    let (py, px) = (py as usize, px as usize);
    if py < img.height && px < img.width {
        let i = (py * img.width + px) * 3;
        img.data[i..i + 3].copy_from_slice(&color);
    }
}

/// Anchors per axis drawn in each overlay.
const OVERLAY_ANCHORS: usize = 8;

fn visualize(a: VisualizeArgs, argv: &[String]) -> Result<()> {
    let set = eval_set(&a.data)?;
    let mut rec = eval_record(&a.data);
    rec["limit"] = json!(a.limit);
    write_run(&a.data.out, "visualize", argv, None, rec)?;
    let palette = Palette::builtin();
    ensure!(
        palette.classes.len() >= set.classes.len(),
        "palette has {} colors for {} classes",
        palette.classes.len(),
        set.classes.len()
    );
    for (entry, class) in palette.classes.iter().zip(&set.classes) {
        if entry.name != *class {
            log::warn!("palette color for `{}` is used for class `{class}`", entry.name);
        }
    }
    let out = &a.data.out;
    let mut csv = format!("image,{OFFSET_CSV_HEADER}\n");
    for (i, (img, gt)) in set.samples.iter().take(a.limit).enumerate() {
        let pred = predict(&set.model, &[img], 1)?.remove(0);
        data::save_image(out.join(format!("{i:03}_input.ppm")), img)?;
        data::save_image(out.join(format!("{i:03}_pred.ppm")), &colorize(&pred, &palette))?;
        data::save_image(out.join(format!("{i:03}_gt.ppm")), &colorize(gt, &palette))?;
        let x = data::images_to_tensor(&[img])?;
        for (stage, field, cfg, stride) in set.model.encoder_offsets(&x)? {
            let mut rows = String::new();
            write_offset_csv(&mut rows, stage, &field, &cfg, stride);
            let taps = cfg.patch_size * cfg.patch_size;
            let step_y = field.height.div_ceil(OVERLAY_ANCHORS).max(1);
            let step_x = field.width.div_ceil(2 * OVERLAY_ANCHORS).max(1);
            let mut overlay = upscale(img, OVERLAY_SCALE);
            for (n, line) in rows.lines().enumerate() {
                csv += &format!("{i},{line}\n");
                let pos = n / taps;
                let (oy, ox) = (pos / field.width, pos % field.width);
                if oy % step_y != 0 || ox % step_x != 0 {
                    continue;
                }
                let v: Vec<f64> = line.split(',').skip(1).map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                let half = stride as f64 / 2.0;
                dot(&mut overlay, v[0] + v[2] + half, v[1] + v[3] + half, STAGE_COLORS[(stage - 1) % 4]);
            }
            data::save_image(out.join(format!("{i:03}_offsets_stage{stage}.ppm")), &overlay)?;
        }
    }
    write_text(&out.join("offsets.csv"), &csv)?;
    Ok(())
}

/// `(value, mIoU)` table rows.
fn write_table(path: &Path, key: &str, rows: &[(String, Option<f64>)]) -> Result<()> {
    let mut csv = format!("{key},miou\n");
    for (k, m) in rows {
        csv += &format!("{k},{}\n", fmt_opt(*m));
    }
    write_text(path, &csv)
}

fn ablate_r(a: AblateRArgs, argv: &[String]) -> Result<()> {
    let classes = classes(&a.manifest_source)?;
    let grid: Vec<Restriction> = a.r.iter().map(|s| parse_r(s)).collect::<Result<_>>()?;
    ensure!(!grid.is_empty(), "--r grid is empty");
    let source = nonempty(labeled(&a.manifest_source, Split::Train)?, &a.manifest_source, "train")?;
    let eval_manifest = a.manifest_target.as_ref().unwrap_or(&a.manifest_source);
    let val = nonempty(labeled(eval_manifest, Split::Val)?, eval_manifest, "val")?;
    let train_cfg = TrainConfig {
        iters: a.iters,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let margs = ModelArgs {
        preset: a.preset,
        decoder: a.decoder,
        patch_embed: Some(PatchEmbedArg::Deformable),
        r: None,
    };
    let base = model_config(&margs, None, classes.len())?;
    create_dir(&a.out)?;
    let grid_names: Vec<String> = grid.iter().map(|&r| r_name(r)).collect();
    write_run(&a.out, "ablate-r", argv, Some(a.seed), json!({ "model": base, "train": train_cfg, "r": grid_names }))?;

    let mut log = JsonLines::create(a.out.join("ablate_r_log.jsonl"))?;
    let mut rows = Vec::new();
    for &r in &grid {
        let mut model = Model::new(ModelConfig { r, ..base.clone() }, a.seed)?;
        train_source(&mut model, &source, None, &train_cfg, &mut |rec| {
            log.push(&json!({ "r": r_name(r), "record": rec }))
        })?;
        let miou = evaluate(&model, &refs(&val))?.miou();
        log::info!("r = {} mIoU {}", r_name(r), fmt_opt(miou));
        rows.push((r_name(r), miou));
    }
    log.finish()?;
    write_table(&a.out.join("ablate_r.csv"), "r", &rows)
}

fn ablate_hparams(a: AblateHparamsArgs, argv: &[String]) -> Result<()> {
    let classes = classes(&a.manifest_source)?;
    let (_, rest) = config_sections(a.config.as_ref())?;
    let base = AdaptConfig {
        max_iters: a.iters,
        seed: a.seed,
        ..overlay(&AdaptConfig::default(), rest.as_ref())?
    };
    base.validate()?;
    if a.alpha.iter().any(|&v| v < 0.0) || a.temperature.iter().any(|&v| v <= 0.0) {
        bail!("alpha must be non-negative and temperature positive");
    }
    let source = nonempty(labeled(&a.manifest_source, Split::Train)?, &a.manifest_source, "train")?;
    let target: Vec<Image> = labeled(&a.manifest_target, Split::Train)?.into_iter().map(|s| s.0).collect();
    ensure!(!target.is_empty(), "manifest {} has no train samples", a.manifest_target.display());
    let val = nonempty(labeled(&a.manifest_target, Split::Val)?, &a.manifest_target, "val")?;
    let margs = ModelArgs {
        preset: a.preset,
        decoder: None,
        patch_embed: None,
        r: None,
    };
    let mcfg = model_config(&margs, None, classes.len())?;
    let train_cfg = TrainConfig {
        iters: a.source_iters,
        seed: a.seed,
        ..TrainConfig::default()
    };
    create_dir(&a.out)?;
    write_run(
        &a.out,
        "ablate-hparams",
        argv,
        Some(a.seed),
        json!({ "model": mcfg, "source": train_cfg, "adapt": base, "alpha": a.alpha, "temperature": a.temperature }),
    )?;

    let mut log = JsonLines::create(a.out.join("ablate_hparams_log.jsonl"))?;
    let mut source_model = Model::new(mcfg, a.seed)?;
    train_source(&mut source_model, &source, None, &train_cfg, &mut |r| log.push(r))?;
    let baseline = evaluate(&source_model, &refs(&val))?.miou();
    log::info!("source-only mIoU {}", fmt_opt(baseline));

    let sweep = |cfg: AdaptConfig, tag: String, log: &mut JsonLines| -> Result<Option<f64>> {
        let mut model = source_model.clone();
        adapt_loop(&mut model, &source, &target, None, &cfg, &mut |r: &LogRecord| {
            log.push(&json!({ "sweep": tag, "record": r }))
        })?;
        let miou = evaluate(&model, &refs(&val))?.miou();
        log::info!("{tag} mIoU {}", fmt_opt(miou));
        Ok(miou)
    };
    let mut alpha_rows = Vec::new();
    for &alpha in &a.alpha {
        let m = sweep(AdaptConfig { alpha, ..base.clone() }, format!("alpha={alpha}"), &mut log)?;
        alpha_rows.push((alpha.to_string(), m));
    }
    let mut temp_rows = Vec::new();
    for &temperature in &a.temperature {
        let m = sweep(AdaptConfig { temperature, ..base.clone() }, format!("temperature={temperature}"), &mut log)?;
        temp_rows.push((temperature.to_string(), m));
    }
    log.finish()?;
    write_table(&a.out.join("ablate_alpha.csv"), "alpha", &alpha_rows)?;
    write_table(&a.out.join("ablate_temperature.csv"), "temperature", &temp_rows)?;
    write_json(&a.out.join("source_only.json"), &json!({ "miou": baseline }))
}

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{config, runtime, CliError, FinetuneArgs, FlopsArgs, FramesArgs, GenArgs, GenKind, GradcheckArgs, MaskArgs, TrainArgs};
use crate::costmodel::{compare, to_csv, to_table, Comparison};
use crate::embedding::{tube_embed, EmbedWeights, TubeEmbedConfig};
use crate::frameselect::{select_informative, FrameSelectSettings, FrameSelectionRecord};
use crate::mva::{self, load_checkpoint, save_checkpoint, ModelConfig};
use crate::numerics::primitive_checks;
use crate::rero::{export_heatmap, importance_map, select_rero, subsample_visible, MaskDump};
use crate::seed;
use crate::videodata::{
    gen_motion_class_dataset, gen_moving_square, load_clip, normalize, save_clip, Background, ClassClipSpec, DatasetManifest, Direction, SquareSpec,
};

/// Relative-error threshold of the `gradcheck` command.
pub const GRAD_TOL: f64 = 1e-4;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)? + "\n";
    fs::write(path, text).map_err(|e| runtime(anyhow::Error::new(e).context(format!("writing {}", path.display()))))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(anyhow::Error::new(e).context(format!("creating {}", dir.display()))))
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    config::ConfigError::Invalid(vec![config::Violation { field: field.into(), message: message.into() }]).into()
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    if a.kind == GenKind::Square {
        return gen_square(a);
    }
    let spec = ClassClipSpec {
        frames: a.frames,
        height: a.height,
        width: a.width,
        size: a.size,
        max_speed: a.max_speed,
        noise_amp: a.noise,
        background: a.flat_background.map_or(Background::ValueNoise, Background::Flat),
    };
    if a.clips == 0 || a.clips % Direction::ALL.len() != 0 {
        return Err(invalid("clips", format!("{} must be a positive multiple of {}", a.clips, Direction::ALL.len())));
    }
    let manifest = gen_motion_class_dataset(&a.out, a.clips, &Direction::ALL, &spec, a.seed).map_err(runtime)?;
    write_json(&a.out.join("resolved_config.json"), &json!({ "args": a, "spec": spec, "classes": Direction::ALL }))?;
    let per_class: Vec<usize> =
        (0..Direction::ALL.len()).map(|c| manifest.entries.iter().filter(|e| e.label == Some(c)).count()).collect();
    write_json(&a.out.join("metrics.json"), &json!({ "clips": manifest.entries.len(), "per_class": per_class }))?;
    println!("wrote {} clips to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn gen_square(a: &GenArgs) -> Result<(), CliError> {
    let mut spec = SquareSpec::new(a.height, a.width, a.frames, a.size, (a.vx, a.vy), a.seed).with_noise(a.noise);
    if let Some(level) = a.flat_background {
        spec = spec.with_background(Background::Flat(level));
    }
    let (clip, motion) = gen_moving_square(&spec).map_err(|e| invalid("square", e.to_string()))?;
    create_dir(&a.out)?;
    save_clip(&clip, a.out.join("square.evc")).map_err(runtime)?;
    let frames: Vec<Vec<u8>> = (0..motion.frames).map(|t| motion.frame(t).iter().map(|&b| u8::from(b)).collect()).collect();
    write_json(&a.out.join("motion_mask.json"), &json!({ "height": motion.height, "width": motion.width, "frames": frames }))?;
    write_json(&a.out.join("resolved_config.json"), &json!({ "args": a, "spec": spec }))?;
    write_json(&a.out.join("metrics.json"), &json!({ "moving_pixels": motion.count() }))?;
    println!("wrote {}", a.out.join("square.evc").display());
    Ok(())
}

/// Embedding weights from a checkpoint, or a seeded initialisation.
fn embedding(ckpt: Option<&Path>, patch: usize, embed_dim: usize, channels: usize, seed_value: u64) -> Result<(EmbedWeights<f32>, TubeEmbedConfig), CliError> {
    match ckpt {
        Some(path) => {
            let (cfg, params) = load_checkpoint(path).map_err(runtime)?;
            if cfg.channels != channels {
                return Err(invalid("ckpt", format!("checkpoint expects {} channels, clip has {channels}", cfg.channels)));
            }
            let w = params.embed_weights().map_err(runtime)?;
            Ok((w, TubeEmbedConfig { patch: cfg.patch, embed_dim: cfg.enc_dim }))
        }
        None => {
            let cfg = TubeEmbedConfig { patch, embed_dim };
            let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(seed_value, 20));
            Ok((EmbedWeights::init(&cfg, channels, &mut rng), cfg))
        }
    }
}

pub fn mask(a: &MaskArgs) -> Result<(), CliError> {
    let clip = load_clip(&a.clip).map_err(runtime)?;
    let (weights, ecfg) = embedding(a.ckpt.as_deref(), a.patch, a.embed_dim, clip.channels, a.seed)?;
    ecfg.grid(clip.t_frames, clip.height, clip.width).map_err(|e| invalid("patch", e.to_string()))?;
    let frames = normalize::<f32>(&clip, &config::default_norm(clip.channels)).map_err(runtime)?;
    let grid = tube_embed(&frames, &weights, &ecfg).map_err(runtime)?;
    let imp = importance_map(&grid, a.metric).map_err(runtime)?;
    let sel = select_rero(&imp, a.rho_pre).map_err(|e| invalid("rho_pre", e.to_string()))?;
    let visible = match a.rho_post {
        Some(r) => Some(
            subsample_visible(&sel, r, seed::stream(a.seed, 21), a.allow_ratio_override)
                .map_err(|e| invalid("rho_pre*rho_post", e.to_string()))?,
        ),
        None => None,
    };
    create_dir(&a.out)?;
    let written = export_heatmap(&imp, Some(&sel), ecfg.patch, grid.patch_cols(), &a.out).map_err(runtime)?;
    write_json(&a.out.join("mask.json"), &MaskDump::new(&sel, visible.as_ref()))?;
    write_json(&a.out.join("importance.json"), &json!({ "tau": imp.tau, "j": imp.j, "values": imp.values }))?;
    write_json(&a.out.join("resolved_config.json"), a)?;
    write_json(
        &a.out.join("metrics.json"),
        &json!({ "tokens": imp.len(), "selected": sel.len(), "visible": visible.as_ref().map(|v| v.len()), "per_pair": sel.per_pair_counts() }),
    )?;
    println!("selected {} of {} tokens; wrote {} heatmaps to {}", sel.len(), imp.len(), written.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct FramesOutput<'a> {
    #[serde(flatten)]
    record: &'a FrameSelectionRecord,
    settings: &'a FrameSelectSettings,
    start: usize,
    seed: u64,
}

pub fn frames(a: &FramesArgs) -> Result<(), CliError> {
    let clip = load_clip(&a.clip).map_err(runtime)?;
    let (weights, ecfg) = embedding(a.ckpt.as_deref(), a.patch, a.embed_dim, clip.channels, a.seed)?;
    let settings = FrameSelectSettings {
        tau: a.tau,
        alpha: a.alpha,
        stride: a.stride,
        rho_pre: a.rho_pre,
        metric: a.metric,
        smoothing: !a.no_smoothing,
    };
    let norm = config::default_norm(clip.channels);
    let (_, record) = select_informative(&clip, &settings, a.start, &weights, ecfg.patch, &norm, seed::stream(a.seed, 22))
        .map_err(|e| invalid("frames", e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &FramesOutput { record: &record, settings: &settings, start: a.start, seed: a.seed })?;
    println!("selected pairs {:?}", record.selected_pairs);
    Ok(())
}

/// Config file, then `--set`, then the dedicated flags.
fn resolve(args: &TrainArgs, extra: &[String]) -> Result<(config::RunConfig, PathBuf), CliError> {
    let mut overrides = args.set.clone();
    if let Some(out) = &args.out {
        overrides.push(format!("out={}", out.display()));
    }
    if args.allow_ratio_override {
        overrides.push("allow_ratio_override=true".into());
    }
    overrides.extend_from_slice(extra);
    let cfg = config::load_config(args.config.as_deref(), &overrides)?;
    let out = cfg.out.clone().ok_or_else(|| invalid("out", "an output directory is required (--out or \"out\")"))?;
    Ok((cfg, out))
}

fn manifest(path: Option<&PathBuf>, field: &str, cfg: &config::RunConfig) -> Result<DatasetManifest, CliError> {
    let path = path.ok_or_else(|| invalid(field, "a dataset manifest path is required"))?;
    DatasetManifest::load(path, cfg.stride, 2 * cfg.tau).map_err(runtime)
}

fn finish(cfg: &mut config::RunConfig, clips: usize, out: &Path) -> Result<(), CliError> {
    cfg.resolve(clips);
    cfg.check()?;
    create_dir(out)?;
    fs::write(out.join("resolved_config.json"), cfg.resolved_json()).map_err(runtime)?;
    eprintln!("{} clips, batch {}: {} steps ({} warmup)", clips, cfg.batch_size, cfg.total_steps, cfg.warmup_steps);
    Ok(())
}

pub fn pretrain(a: &TrainArgs) -> Result<(), CliError> {
    let (mut cfg, out) = resolve(a, &["phase=pretrain".into()])?;
    let data = manifest(cfg.manifest.as_ref(), "manifest", &cfg)?;
    finish(&mut cfg, data.entries.len(), &out)?;
    let opts = cfg.pretrain_options();
    let report = mva::pretrain(&data, &opts).map_err(runtime)?;
    report.write_trace(out.join("loss.csv")).map_err(runtime)?;
    save_checkpoint(out.join("model.evck"), &opts.model, &report.params).map_err(runtime)?;
    let first = report.trace.first().map(|t| t.loss);
    let last = report.trace.last().map(|t| t.loss);
    write_json(
        &out.join("metrics.json"),
        &json!({
            "steps": report.trace.len(),
            "clips": data.entries.len(),
            "initial_loss": first,
            "final_loss": last,
        }),
    )?;
    println!("pre-training done: loss {:?} -> {:?}", first, last);
    Ok(())
}

/// Architecture fields that differ between a checkpoint and the run.
fn arch_mismatch(ckpt: &ModelConfig, run: &ModelConfig) -> Vec<config::Violation> {
    let a = serde_json::to_value(ckpt).expect("json");
    let b = serde_json::to_value(run).expect("json");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else { return Vec::new() };
    a.iter()
        .filter(|(k, v)| k.as_str() != "num_classes" && b.get(k.as_str()) != Some(v))
        .map(|(k, v)| config::Violation { field: k.clone(), message: format!("checkpoint has {v}, run config has {}", b[k.as_str()]) })
        .collect()
}

pub fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let mut extra = vec!["phase=finetune".to_string()];
    if let Some(order) = a.order {
        extra.push(format!("order={}", serde_json::to_string(&order).expect("json")));
    }
    if let Some(path) = &a.ckpt {
        extra.push(format!("checkpoint={}", path.display()));
    }
    if let Some(r) = a.rho_pre {
        extra.push(format!("rho_pre_ft={r}"));
    }
    let (mut cfg, out) = resolve(&a.train, &extra)?;
    let train = manifest(cfg.manifest.as_ref(), "manifest", &cfg)?;
    let test = match &cfg.test_manifest {
        Some(p) => Some(manifest(Some(p), "test_manifest", &cfg)?),
        None => None,
    };
    let classes = train.num_classes().into_iter().chain(test.as_ref().and_then(|t| t.num_classes())).max();
    cfg.num_classes = classes.ok_or_else(|| invalid("manifest", "fine-tuning needs labelled clips"))?;
    let init = match &cfg.checkpoint {
        Some(path) => {
            let (ckpt_cfg, params) = load_checkpoint(path).map_err(runtime)?;
            let v = arch_mismatch(&ckpt_cfg, &cfg.model());
            if !v.is_empty() {
                return Err(config::ConfigError::Invalid(v).into());
            }
            Some(params)
        }
        None => None,
    };
    finish(&mut cfg, train.entries.len(), &out)?;
    let opts = cfg.finetune_options();
    let report = mva::finetune(&train, test.as_ref(), &opts, init.as_ref()).map_err(runtime)?;
    fs::write(out.join("loss.csv"), report.trace_csv()).map_err(runtime)?;
    save_checkpoint(out.join("finetuned.evck"), &opts.model, &report.params).map_err(runtime)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "steps": report.trace.len(),
            "clips": train.entries.len(),
            "final_loss": report.trace.last().map(|t| t.loss),
            "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy,
            "from_checkpoint": cfg.checkpoint.is_some(),
        }),
    )?;
    println!("fine-tuning done: train accuracy {:.3}, test accuracy {:?}", report.train_accuracy, report.test_accuracy);
    Ok(())
}

pub fn flops(a: &FlopsArgs) -> Result<(), CliError> {
    for (name, v) in [("visible", a.visible), ("rho_pre", a.rho_pre), ("rho_pre_ft", a.rho_pre_ft)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(invalid(name, format!("{v} must lie in (0, 1]")));
        }
    }
    if a.batch == 0 {
        return Err(invalid("batch", "must be positive"));
    }
    let cmp = Comparison { visible_frac: a.visible, rho_pre: a.rho_pre, rho_pre_ft: a.rho_pre_ft, batch: a.batch, ..Comparison::default() };
    let rows = compare(&a.arch, &cmp);
    let text = match a.format.as_str() {
        "csv" => to_csv(&rows),
        "json" => serde_json::to_string_pretty(&rows).map_err(runtime)? + "\n",
        _ => to_table(&rows),
    };
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        fs::write(out.join("flops.csv"), to_csv(&rows)).map_err(runtime)?;
        write_json(&out.join("resolved_config.json"), a)?;
        write_json(&out.join("metrics.json"), &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    seed: u64,
    name: String,
    max_rel_error: f64,
    pass: bool,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for s in 0..a.seeds {
        for (name, err) in primitive_checks(s, a.h).map_err(runtime)? {
            rows.push(CheckRow { seed: s, name: name.into(), max_rel_error: err, pass: err < GRAD_TOL });
        }
        let r = mva::pipeline_grad_check(s, a.h, None).map_err(runtime)?;
        rows.push(CheckRow { seed: s, name: "pipeline".into(), max_rel_error: r.max_rel_error, pass: r.max_rel_error < GRAD_TOL });
    }
    for r in &rows {
        println!("{} seed {} {:<16} {:.3e}", if r.pass { "PASS" } else { "FAIL" }, r.seed, r.name, r.max_rel_error);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("resolved_config.json"), &json!({ "args": a, "threshold": GRAD_TOL }))?;
        write_json(&out.join("metrics.json"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::Invalid(format!("{failed} gradient check(s) above {GRAD_TOL:e}")));
    }
    Ok(())
}


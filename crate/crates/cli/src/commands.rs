//! Subcommand implementations. Each writes into a staged directory that is
//! moved into place, with a checksum manifest, only once the command succeeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::Context;
use log::{info, warn};
use puppetry_core::a2e::window_values;
use puppetry_core::audio_features::{load_logit_stream, windows_for_stream};
use puppetry_core::checkpoint::{Checkpoint, Stage};
use puppetry_core::face_model::{
    map_audio_expression, AudioExpressionCode, ExpressionCoefficients, FaceBasis, PersonMapping,
};
use puppetry_core::oracle::OracleWorld;
use puppetry_core::training::{
    adapt_new_target, load_a2e_model, load_mapping, mapping_checkpoint, A2eTrainer,
    RendererTrainer, RendererTrainingOptions, SequenceDataset, TargetDataset, TrainingSequence,
};
use serde::Serialize;

use crate::config::{Overrides, ProjectConfig};
use crate::layout::{self, rgb_png_bytes, SequenceContent, SequenceDir, BASIS_FILE, TOPOLOGY_FILE};
use crate::metrics::mean_color_distance;
use crate::output::{finish, write_json, StagedDir};
use crate::scene::{Scene, StageTimes};
use crate::{CommonArgs, ValidationError};

type Result<T> = anyhow::Result<T>;

fn invalid<T>(msg: String) -> Result<T> {
    Err(ValidationError(msg).into())
}

fn load_config(a: &CommonArgs) -> Result<ProjectConfig> {
    ProjectConfig::load(
        &a.config,
        &Overrides {
            seed: a.seed,
            epochs: a.epochs,
            resolution: a.resolution,
            data_root: a.data_root.clone(),
        },
    )
}

fn output_dir(a: &CommonArgs, command: &str) -> PathBuf {
    a.output
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return invalid(format!("checkpoint {} does not exist", path.display()));
    }
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Input checkpoints keyed by the stage recorded in their descriptor.
struct Inputs(Vec<(PathBuf, Checkpoint)>);

impl Inputs {
    fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut out: Vec<(PathBuf, Checkpoint)> = Vec::new();
        for p in paths {
            let ck = read_checkpoint(p)?;
            if let Some((q, _)) = out
                .iter()
                .find(|(_, c)| c.descriptor.stage == ck.descriptor.stage)
            {
                return invalid(format!(
                    "{} and {} are both {:?} checkpoints",
                    q.display(),
                    p.display(),
                    ck.descriptor.stage
                ));
            }
            out.push((p.clone(), ck));
        }
        Ok(Self(out))
    }

    fn get(&self, stage: Stage) -> Option<&Checkpoint> {
        self.0
            .iter()
            .find(|(_, c)| c.descriptor.stage == stage)
            .map(|(_, c)| c)
    }

    fn require(&self, stage: Stage) -> Result<&Checkpoint> {
        match self.get(stage) {
            Some(c) => Ok(c),
            None => invalid(format!(
                "a {stage:?} checkpoint is required (pass it with --checkpoint)"
            )),
        }
    }

    /// At most one checkpoint, of the given stage, for resuming.
    fn resume(&self, stage: Stage) -> Result<Option<&Checkpoint>> {
        match self.0.as_slice() {
            [] => Ok(None),
            [(_, c)] if c.descriptor.stage == stage => Ok(Some(c)),
            _ => invalid(format!(
                "expected at most one {stage:?} checkpoint to resume from"
            )),
        }
    }
}

/// Frames of the target used for fitting and training; the rest is held out.
fn fit_frame_count(total: usize, holdout_fraction: f64) -> Result<usize> {
    let held = (total as f64 * holdout_fraction).round() as usize;
    if held >= total {
        return invalid(format!(
            "holding out {held} of {total} target frames leaves nothing to fit"
        ));
    }
    Ok(total - held)
}

fn open_target(cfg: &ProjectConfig) -> Result<SequenceDir> {
    let root = cfg.require_data_root()?;
    let t = SequenceDir::open(root, &cfg.target)?;
    if t.manifest.resolution != cfg.resolution {
        return invalid(format!(
            "target sequence is {}x{0} pixels but the configured resolution is {}",
            t.manifest.resolution, cfg.resolution
        ));
    }
    Ok(t)
}

fn append_jsonl<T: Serialize>(log: &mut String, rec: &T) -> Result<()> {
    writeln!(log, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

pub fn make_oracle_corpus(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let oc = &cfg.oracle;
    if oc.persons == 0 {
        return invalid("oracle.persons must be at least 1".into());
    }
    let mut jobs: Vec<(String, u64, usize)> = (0..oc.persons)
        .map(|p| (format!("person{p}"), p, oc.frames))
        .collect();
    if jobs.iter().any(|(n, ..)| *n == cfg.target) {
        return invalid(format!(
            "target name {} collides with a training sequence",
            cfg.target
        ));
    }
    jobs.push((cfg.target.clone(), oc.persons, oc.target_frames));

    let root = a.output.clone().unwrap_or_else(|| cfg.data_root.clone());
    let mut world = OracleWorld::new(&cfg.oracle_spec())?;
    let stage = StagedDir::new(&root)?;
    fs::write(stage.path().join(BASIS_FILE), world.basis.to_bytes())?;
    fs::write(stage.path().join(TOPOLOGY_FILE), world.topology.to_bytes())?;
    for (name, person, frames) in jobs {
        world.spec.person = person;
        let seq = world.generate(frames)?;
        layout::write_sequence(
            &stage.path().join(&name),
            &SequenceContent {
                person,
                fps: puppetry_core::oracle::ORACLE_FPS,
                logits: &seq.logits,
                expressions: &seq.expressions,
                shape: &seq.person.shape,
                frames: &seq.images,
                uvmaps: &seq.uvmaps,
                poses: &seq.poses,
                masks: &seq.masks,
            },
        )?;
        info!("wrote sequence {name} ({frames} frames, person {person})");
    }
    finish(stage, "make-oracle-corpus")
}

fn training_dataset(cfg: &ProjectConfig) -> Result<(Vec<String>, SequenceDataset)> {
    let root = cfg.require_data_root()?;
    let names = if cfg.sequences.is_empty() {
        layout::list_sequences(root)?
            .into_iter()
            .filter(|n| *n != cfg.target)
            .collect()
    } else {
        cfg.sequences.clone()
    };
    if names.is_empty() {
        return invalid(format!("no training sequences under {}", root.display()));
    }
    let mut basis: Option<FaceBasis> = None;
    let mut sequences = Vec::with_capacity(names.len());
    for name in &names {
        let dir = SequenceDir::open(root, name)?;
        let b = dir.basis()?;
        match &basis {
            None => basis = Some(b),
            Some(first) if *first != b => {
                return invalid(format!("sequence {name} uses a different face basis"))
            }
            Some(_) => {}
        }
        let au = dir.audio()?;
        sequences.push(TrainingSequence {
            person: dir.manifest.person,
            windows: au.windows,
            expressions: au.expressions,
            shape: au.shape,
        });
    }
    let basis = basis.expect("at least one sequence");
    Ok((names, SequenceDataset { basis, sequences }))
}

pub fn train_a2e(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let (names, data) = training_dataset(&cfg)?;
    let tcfg = cfg.a2e_training();
    let inputs = Inputs::load(&a.checkpoints)?;
    let mut trainer = match inputs.resume(Stage::A2e)? {
        Some(ck) => A2eTrainer::resume(&data, &tcfg, ck)?,
        None => A2eTrainer::new(&data, &tcfg)?,
    };
    let stage = StagedDir::new(&output_dir(a, "train-a2e"))?;
    let mut log = String::new();
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        info!(
            "epoch {}/{} lr {:.2e} train {:.4} validation {}",
            rec.epoch,
            tcfg.epochs,
            rec.learning_rate,
            rec.train.loss,
            rec.validation
                .map_or("-".into(), |v| format!("{:.4}", v.loss))
        );
        append_jsonl(&mut log, &rec)?;
    }
    fs::write(stage.path().join("train_log.jsonl"), log)?;
    trainer.checkpoint().save(stage.path().join("a2e.ckpt"))?;
    if let Some(best) = trainer.best_checkpoint() {
        best.save(stage.path().join("a2e_best.ckpt"))?;
    }
    // mapping i in the checkpoint belongs to sequence i of this list
    write_json(&stage.path().join("sequences.json"), &names)?;
    finish(stage, "train-a2e")
}

#[derive(Serialize)]
struct FitReport {
    frames: usize,
    held_out: usize,
    rank: usize,
    rank_deficient: bool,
    residual: f64,
}

pub fn fit_target(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let inputs = Inputs::load(&a.checkpoints)?;
    let model = load_a2e_model(inputs.require(Stage::A2e)?)?;
    let target = open_target(&cfg)?;
    let au = target.audio()?;
    let n = au.windows.len();
    let fit_frames = fit_frame_count(n, cfg.holdout_fraction)?;
    let fit = adapt_new_target(
        &model.net,
        &au.windows[..fit_frames],
        &au.expressions[..fit_frames],
        cfg.ridge,
    )?;
    info!(
        "fitted target mapping on {fit_frames} frames (rank {})",
        fit.rank
    );
    let stage = StagedDir::new(&output_dir(a, "fit-target"))?;
    mapping_checkpoint(&fit, fit_frames, cfg.ridge).save(stage.path().join("mapping.ckpt"))?;
    write_json(
        &stage.path().join("fit.json"),
        &FitReport {
            frames: fit_frames,
            held_out: n - fit_frames,
            rank: fit.rank,
            rank_deficient: fit.rank_deficient,
            residual: fit.residual,
        },
    )?;
    finish(stage, "fit-target")
}

pub fn train_renderer(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let target = open_target(&cfg)?;
    let fit_frames = fit_frame_count(target.manifest.frame_count, cfg.holdout_fraction)?;
    let data = TargetDataset {
        frames: target.frames(0..fit_frames)?,
    };
    let tcfg = cfg.renderer_training_config();
    let opts = RendererTrainingOptions {
        renderer: cfg.renderer,
        erosion_radius: cfg.erosion_radius(),
        perceptual: cfg.perceptual,
    };
    let inputs = Inputs::load(&a.checkpoints)?;
    let mut trainer = match inputs.resume(Stage::Renderer)? {
        Some(ck) => RendererTrainer::resume(data, &tcfg, opts, ck)?,
        None => RendererTrainer::new(data, &tcfg, opts)?,
    };
    let stage = StagedDir::new(&output_dir(a, "train-renderer"))?;
    let mut log = String::new();
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        info!(
            "epoch {}/{} lr {:.2e} loss {:.4} final l1 {:.4}",
            rec.epoch, tcfg.epochs, rec.learning_rate, rec.loss, rec.final_l1
        );
        append_jsonl(&mut log, &rec)?;
    }
    fs::write(stage.path().join("train_log.jsonl"), log)?;
    trainer
        .checkpoint()
        .save(stage.path().join("renderer.ckpt"))?;
    write_json(
        &stage.path().join("summary.json"),
        &serde_json::json!({ "frames": fit_frames, "final_l1": trainer.mean_l1()? }),
    )?;
    finish(stage, "train-renderer")
}

/// `M z` for a network code.
pub fn delta_for(code: &[f32], mapping: &PersonMapping) -> Result<ExpressionCoefficients> {
    let z: Vec<f64> = code.iter().map(|&v| v as f64).collect();
    Ok(map_audio_expression(
        &AudioExpressionCode::new(&z)?,
        mapping,
    ))
}

#[derive(Serialize)]
struct Timing {
    frames: usize,
    mapping_ms: f64,
    rasterization_ms: f64,
    rendering_ms: f64,
}

fn per_frame_ms(d: Duration, frames: usize) -> f64 {
    d.as_secs_f64() * 1e3 / frames.max(1) as f64
}

pub fn infer(a: &CommonArgs, max_frames: Option<usize>) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let inputs = Inputs::load(&a.checkpoints)?;
    let model = load_a2e_model(inputs.require(Stage::A2e)?)?;
    let mapping = load_mapping(inputs.require(Stage::Mapping)?)?;
    let target = open_target(&cfg)?;
    let au = target.audio()?;
    let scene = Scene::from_sequence(&target, au.shape, inputs.require(Stage::Renderer)?)?;
    let poses = target.poses()?;

    let logits = match &cfg.infer.logits {
        Some(p) if !p.is_file() => {
            return invalid(format!("logit file {} does not exist", p.display()))
        }
        Some(p) => {
            load_logit_stream(p).with_context(|| format!("cannot load logits {}", p.display()))?
        }
        None => au.logits,
    };
    let windows = windows_for_stream(&logits, target.manifest.fps)?;
    let count = max_frames.map_or(windows.len(), |m| m.min(windows.len()));
    if count == 0 {
        return invalid("the logit stream yields no frames".into());
    }

    let t0 = Instant::now();
    let inputs: Vec<Vec<f32>> = windows.iter().map(window_values::<f32>).collect();
    let codes = model.net.predict_sequence(&inputs)?;
    let deltas = codes[..count]
        .iter()
        .map(|c| delta_for(c, &mapping))
        .collect::<Result<Vec<_>>>()?;
    let mapping_time = t0.elapsed();

    // poses and backgrounds cycle through the target footage
    let n = target.manifest.frame_count;
    let sources = target.frames(0..count.min(n))?;
    let stage = StagedDir::new(&output_dir(a, "infer"))?;
    fs::create_dir(stage.path().join("frames"))?;
    let mut times = StageTimes::default();
    for (t, delta) in deltas.iter().enumerate() {
        let src = &sources[t % n];
        let img = scene.render(delta, &poses[t % n], &src.reference, &src.mask, &mut times)?;
        fs::write(
            stage.path().join(layout::frame_file("frames", t, "png")),
            rgb_png_bytes(&img)?,
        )?;
    }
    write_json(
        &stage.path().join("timing.json"),
        &Timing {
            frames: count,
            mapping_ms: per_frame_ms(mapping_time, count),
            rasterization_ms: per_frame_ms(times.rasterization, count),
            rendering_ms: per_frame_ms(times.rendering, count),
        },
    )?;
    if cfg.infer.video {
        encode_video(stage.path(), target.manifest.fps);
    }
    info!("rendered {count} frames");
    finish(stage, "infer")
}

/// Best effort: a missing or failing `ffmpeg` only produces a warning.
fn encode_video(dir: &Path, fps: f64) {
    let status = std::process::Command::new("ffmpeg")
        .args([
            "-y",
            "-loglevel",
            "error",
            "-framerate",
            &fps.to_string(),
            "-i",
        ])
        .arg(dir.join("frames/%06d.png"))
        .args(["-pix_fmt", "yuv420p"])
        .arg(dir.join("video.mp4"))
        .status();
    match status {
        Ok(s) if s.success() => {}
        Ok(s) => warn!("ffmpeg exited with {s}; no video written"),
        Err(e) => warn!("cannot run ffmpeg ({e}); no video written"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceSummary {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

impl DistanceSummary {
    fn new(per_frame: Vec<f64>) -> Self {
        Self {
            mean: per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64,
            per_frame,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Half-open range of held-out frame indices.
    pub held_out: [usize; 2],
    /// Renders driven by audio-predicted expressions.
    pub audio_driven: DistanceSummary,
    /// Renders driven by the tracked expressions.
    pub visual: DistanceSummary,
}

pub fn eval(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let inputs = Inputs::load(&a.checkpoints)?;
    let model = load_a2e_model(inputs.require(Stage::A2e)?)?;
    let mapping = load_mapping(inputs.require(Stage::Mapping)?)?;
    let target = open_target(&cfg)?;
    let au = target.audio()?;
    let n = au.windows.len();
    let start = fit_frame_count(n, cfg.holdout_fraction)?;
    if start == n {
        return invalid("holdout_fraction leaves no held-out frames to evaluate".into());
    }
    let scene = Scene::from_sequence(&target, au.shape.clone(), inputs.require(Stage::Renderer)?)?;
    let poses = target.poses()?;
    let inputs: Vec<Vec<f32>> = au.windows.iter().map(window_values::<f32>).collect();
    let codes = model.net.predict_sequence(&inputs)?;
    let frames = target.frames(start..n)?;

    let stage = StagedDir::new(&output_dir(a, "eval"))?;
    for d in ["audio", "visual"] {
        fs::create_dir(stage.path().join(d))?;
    }
    let mut times = StageTimes::default();
    let (mut audio, mut visual) = (Vec::new(), Vec::new());
    for (f, t) in frames.iter().zip(start..n) {
        let pred = scene.render(
            &delta_for(&codes[t], &mapping)?,
            &poses[t],
            &f.reference,
            &f.mask,
            &mut times,
        )?;
        let tracked = scene.render(
            &au.expressions[t],
            &poses[t],
            &f.reference,
            &f.mask,
            &mut times,
        )?;
        audio.push(mean_color_distance(&pred, &f.reference));
        visual.push(mean_color_distance(&tracked, &f.reference));
        fs::write(
            stage.path().join(layout::frame_file("audio", t, "png")),
            rgb_png_bytes(&pred)?,
        )?;
        fs::write(
            stage.path().join(layout::frame_file("visual", t, "png")),
            rgb_png_bytes(&tracked)?,
        )?;
    }
    let report = EvalReport {
        held_out: [start, n],
        audio_driven: DistanceSummary::new(audio),
        visual: DistanceSummary::new(visual),
    };
    info!(
        "held-out color distance: audio-driven {:.4}, visual {:.4}",
        report.audio_driven.mean, report.visual.mean
    );
    write_json(&stage.path().join("report.json"), &report)?;
    finish(stage, "eval")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_rounds_and_rejects_empty_fits() {
        assert_eq!(fit_frame_count(300, 0.1).unwrap(), 270);
        assert_eq!(fit_frame_count(25, 0.1).unwrap(), 22);
        assert_eq!(fit_frame_count(10, 0.0).unwrap(), 10);
        assert!(fit_frame_count(1, 0.6).is_err());
    }
}

//! Subcommands of the `strata` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use strata::compositing::{ExternalHook, Harmonizer, IdentityHook};
use strata::metrics::{build_tracks, evaluate, load_detections, MetricsReport};
use strata::scene::{load_scene, SceneOverrides, SceneSpec};

#[derive(Debug, Parser)]
#[command(name = "strata", version, about = "Layered text-to-video generation with box trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate background, foreground layers, blend and harmonized frames.
    Generate {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
        /// Harmonization command; identity when absent.
        #[arg(long)]
        hook: Option<String>,
    },
    /// Re-blend and re-harmonize an existing output directory.
    Blend {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hook: Option<String>,
    },
    /// Score detections against the scene's box tracks; writes metrics.json.
    Metrics {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the interpolated box of every layer at every frame.
    Interp {
        #[command(flatten)]
        scene: SceneArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "gamma-key")]
    pub gamma_key: Option<f64>,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub mu2: Option<f64>,
    /// Fraction of the steps conditioned on the raw background.
    #[arg(long = "t-eps")]
    pub t_eps: Option<f64>,
}

impl SceneArgs {
    pub fn overrides(&self) -> SceneOverrides<f64> {
        SceneOverrides {
            seed: self.seed,
            steps: self.steps,
            frames: self.frames,
            lambda: self.lambda,
            gamma_key: self.gamma_key,
            mu1: self.mu1,
            mu2: self.mu2,
            t_eps_fraction: self.t_eps,
        }
    }

    pub fn load(&self) -> Result<SceneSpec<f64>> {
        let scene = load_scene(&self.scene).with_context(|| format!("loading scene {}", self.scene.display()))?;
        scene
            .with_overrides(&self.overrides())
            .with_context(|| format!("applying overrides to {}", self.scene.display()))
    }
}

fn hook_for(command: Option<&str>, out: &Path) -> (Box<dyn Harmonizer<f64>>, String) {
    match command {
        None => (Box::new(IdentityHook), "identity".into()),
        Some(cmd) => (
            Box::new(ExternalHook::new(cmd, out.join(".harmonize"))),
            cmd.to_string(),
        ),
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { scene, out, hook } => {
            let spec = scene.load()?;
            let (hook, name) = hook_for(hook.as_deref(), &out);
            let output = strata::generate_to_dir(&spec, &out, hook.as_ref(), &name)?;
            writeln!(
                stdout,
                "wrote {} layer(s), {} frame(s) to {}",
                output.layers.len(),
                spec.frames,
                out.display()
            )?;
        }
        Command::Blend { out, hook } => {
            let (hook, _) = hook_for(hook.as_deref(), &out);
            let n = strata::reblend_dir(&out, hook.as_ref())?;
            writeln!(stdout, "blended {n} layer(s) in {}", out.display())?;
        }
        Command::Metrics { scene, detections, out } => {
            let report = metrics_report(&scene.load()?, &detections)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("metrics.json");
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            let cd = report.cd.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            writeln!(
                stdout,
                "mIoU={} AP50={} Cov={} CD={cd}",
                report.miou, report.ap50, report.coverage
            )?;
        }
        Command::Interp { scene } => {
            let spec = scene.load()?;
            for line in interp_lines(&spec)? {
                writeln!(stdout, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Detections file scored against the scene's tracks, repeated for each video id.
pub fn metrics_report(scene: &SceneSpec<f64>, detections: &Path) -> Result<MetricsReport<f64>> {
    let records = load_detections::<f64>(detections)
        .with_context(|| format!("reading detections {}", detections.display()))?;
    let tracks = scene.tracks()?;
    let preds = build_tracks(&records, tracks.len(), scene.frames)
        .with_context(|| format!("reading detections {}", detections.display()))?;
    if tracks.is_empty() {
        bail!("scene has no foreground layers to score");
    }
    let gts: Vec<_> = preds.iter().map(|p| tracks[p.object - 1].clone()).collect();
    Ok(evaluate(&preds, &gts)?)
}

/// `layer frame x0 y0 x1 y1`, both indices 1-based.
pub fn interp_lines(scene: &SceneSpec<f64>) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for (li, track) in scene.tracks()?.iter().enumerate() {
        for (fi, b) in track.boxes.iter().enumerate() {
            lines.push(format!("{} {} {} {} {} {}", li + 1, fi + 1, b.x0, b.y0, b.x1, b.y1));
        }
    }
    Ok(lines)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyenet_core::inference::{first_frame_masks, labels_to_tubes, run_dyenet, tubes_to_labels};
use dyenet_core::io::{checkpoint, load_dataset, load_labels, load_sequence, save_labels};
use dyenet_core::overlay::render_overlay;
use dyenet_core::synth::{easy_clip, gen_synthetic, occlusion_clip, random_spec};
use dyenet_core::trainer::{curve_csv, train_with};
use dyenet_core::{evaluate, init_params, Config, DyeError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dyenet", version, about = "Instance video segmentation with re-identification and mask propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set remp.attention=off`; may repeat
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| DyeError::Config(format!("`{kv}` is not KEY=VALUE")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two objects, one hidden for four frames by a passing bar
    Occlusion,
    /// Two slowly moving objects, no occlusion
    Easy,
    /// Randomized clips for training
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences with exact masks and flow
    Synth {
        #[arg(long, value_enum, default_value = "occlusion")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of clips (random preset only; written to seq000, seq001, ...)
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Frame side in pixels (random preset only)
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model and write a checkpoint
    Train {
        /// A sequence directory or a directory of sequence directories
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV
        #[arg(long)]
        curve: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Segment every instance given its first-frame mask
    Segment {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for label maps and the iteration report
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predicted label maps against the sequence's ground truth
    Eval {
        #[arg(long)]
        sequence: PathBuf,
        /// Directory of predicted %05d.pgm label maps
        #[arg(long)]
        pred: PathBuf,
        /// Write the report as CSV here instead of printing a table
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Blend predicted masks over the frames
    Overlay {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every configuration key with its default value
    Config,
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| DyeError::Load { path: path.to_path_buf(), msg: e.to_string() }.into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { preset, out, seed, count, frames, size } => match preset {
            Preset::Occlusion => {
                gen_synthetic(&occlusion_clip(seed), &out)?;
            }
            Preset::Easy => {
                gen_synthetic(&easy_clip(seed, frames), &out)?;
            }
            Preset::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in 0..count {
                    let mut spec = random_spec(&mut rng, size, size, frames);
                    spec.name = format!("seq{i:03}");
                    gen_synthetic(&spec, &out.join(&spec.name))?;
                }
            }
        },
        Command::Train { data, out, curve, config } => {
            let cfg = config.resolve()?;
            let dataset = load_dataset(&data)?;
            let every = (cfg.train.iterations / 20).max(1);
            let result = train_with(&dataset, &cfg.train, init_params(cfg.train.dims, cfg.train.seed), |r| {
                if r.step % every == 0 || r.step + 1 == cfg.train.iterations {
                    eprintln!(
                        "step {:>6}  L {:.4}  reid {:.4}  mask {:.4}  remp {:.4}",
                        r.step, r.loss.total, r.loss.reid, r.loss.mask, r.loss.remp
                    );
                }
            })?;
            checkpoint::save(&result.params, &out)?;
            if let Some(p) = curve {
                write_file(&p, &curve_csv(&result.curve))?;
            }
        }
        Command::Segment { sequence, checkpoint: ckpt, out, config } => {
            let cfg = config.resolve()?;
            let seq = load_sequence(&sequence)?;
            let params = checkpoint::load(&ckpt)?;
            let first = first_frame_masks(&seq)?;
            let result = run_dyenet(&seq, &first, &params, &cfg.infer)?;
            let labels = tubes_to_labels(&result.tubes, seq.len(), seq.width(), seq.height());
            save_labels(&labels, seq.original_size, &out.join("masks"))?;
            let mut report = String::from("iteration,matches,new_starting_points,tracklets,templates,precision,recall\n");
            for it in &result.iterations {
                let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
                report.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    it.iteration,
                    it.matches,
                    it.new_starting_points,
                    it.tracklets,
                    it.templates,
                    opt(it.precision),
                    opt(it.recall)
                ));
            }
            write_file(&out.join("iterations.csv"), &report)?;
            eprintln!("{} tubes after {} iterations", result.tubes.len(), result.iterations.len());
        }
        Command::Eval { sequence, pred, csv, config } => {
            let cfg = config.resolve()?;
            let seq = load_sequence(&sequence)?;
            let gt = seq.gt.as_ref().ok_or_else(|| DyeError::MissingData(format!("`{}` has no masks", seq.name)))?;
            let (w, h) = seq.original_size;
            let gt: Vec<_> = gt.iter().map(|l| l.crop(w, h)).collect();
            let report = evaluate(&gt, &load_labels(&pred)?, (w, h), cfg.boundary_tol)?;
            match csv {
                Some(p) => write_file(&p, &report.to_csv())?,
                None => print!("{}", report.to_table()),
            }
        }
        Command::Overlay { sequence, pred, out } => {
            let seq = load_sequence(&sequence)?;
            let (pw, ph) = (seq.width(), seq.height());
            let labels: Vec<_> = load_labels(&pred)?.iter().map(|l| l.padded(pw, ph)).collect();
            render_overlay(&seq, &labels_to_tubes(&labels), &out)?;
        }
        Command::Config => print!("{}", Config::default().to_text()),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<DyeError>() {
        Some(d) if d.is_contract() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.root_cause());
            ExitCode::from(exit_code(&e))
        }
    }
}

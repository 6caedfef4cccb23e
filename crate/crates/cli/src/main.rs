//! `deblur`: dataset build, training stages, inference, evaluation and plots.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use deblur_core::checkpoint::Checkpoint;
use deblur_core::codec::{pretrain_codec, Codec, CodecKind};
use deblur_core::config::RunConfig;
use deblur_core::dataset::{build_toy_dataset, DatasetManifest, LoadedDataset, Split};
use deblur_core::error::Error;
use deblur_core::image::ImageArray;
use deblur_core::plot::{line_plot, scatter_plot, write_svg, Table};
use deblur_core::runtime::{evaluate, sweep_csv, timestep_sweep, Deblurrer, TMode};
use deblur_core::train::{load_trained, run_stage, RunContext, RunLayout, Stage};

#[derive(Parser, Debug)]
#[command(name = "deblur", version, about = "One-step diffusion deblurring workbench")]
struct Cli {
    /// Run configuration (TOML); defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a toy trajectory dataset.
    BuildData {
        #[arg(long)]
        scenes: Option<usize>,
        /// Image size as HxW.
        #[arg(long)]
        size: Option<String>,
        /// Comma-separated frame counts.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a learned codec on the sharp frames of a dataset.
    PretrainCodec {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Training dataset (directory or manifest file).
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding the stage checkpoints and metrics.
        #[arg(long)]
        run: PathBuf,
        /// Codec checkpoint for stage 1 (learned codecs only).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Continue an interrupted stage from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Save and stop once the stage reaches this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Restore every PNG of a directory.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `fixed:<t>` or `predicted`.
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Score restorations of a dataset against its sharp frames.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Fixed-t evaluation at several timesteps.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<f64>>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the configuration record of a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Render sweep or report CSVs as SVG plots.
    Plot {
        /// Sweep CSV: one line per metric against t.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Report CSVs: PSNR against lpips_proxy.
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation =
                e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation)) || e.downcast_ref::<UsageError>().is_some();
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

/// Bad command-line input detected by the CLI itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.txt")
    } else {
        p.to_path_buf()
    }
}

fn load_data(p: &Path) -> anyhow::Result<LoadedDataset> {
    let m = DatasetManifest::load(&manifest_path(p))?;
    Ok(LoadedDataset::load(m)?)
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| UsageError(format!("--size must be HxW, got '{s}'")))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|_| UsageError(format!("--size must be HxW, got '{s}'")));
    Ok((parse(h)?, parse(w)?))
}

fn t_mode(flag: Option<&str>, cfg: &RunConfig) -> anyhow::Result<TMode> {
    Ok(match flag {
        Some(s) => s.parse()?,
        None => cfg.infer.t_mode,
    })
}

fn deblurrer(run: &Path) -> anyhow::Result<Deblurrer> {
    let (f, net) = load_trained(&RunLayout::new(run))?;
    Ok(Deblurrer::new(f, net))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let hash = cfg.hash();
    match cli.command {
        Command::BuildData { scenes, size, frames, seed, split, out } => {
            let mut dc = match split.as_str() {
                "train" => cfg.data.train.clone(),
                "test" => cfg.data.test.clone(),
                other => bail!(UsageError(format!("--split must be 'train' or 'test', got '{other}'"))),
            };
            dc.split = if split == "train" { Split::Train } else { Split::Test };
            if let Some(n) = scenes {
                dc.num_scenes = n;
            }
            if let Some(s) = size {
                (dc.height, dc.width) = parse_size(&s)?;
            }
            if let Some(f) = frames {
                dc.n_frames_choices = f;
            }
            if let Some(s) = seed {
                dc.seed = s;
            }
            let m = build_toy_dataset(&dc, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
            println!("config_hash = {}", m.config_hash);
            println!("content_hash = {}", m.content_hash());
        }
        Command::PretrainCodec { data, out } => {
            let d = load_data(&data)?;
            let mut codec = Codec::new(cfg.codec.arch.clone(), cfg.codec.pretrain.seed)?;
            let sharp: Vec<ImageArray> = d.images.iter().map(|pts| pts[0].clone()).collect();
            let curve = pretrain_codec(&mut codec, &sharp, &cfg.codec.pretrain)?;
            let mut ck = codec.to_checkpoint();
            ck.set_meta("run_config_hash", hash.as_str());
            ck.save(&out)?;
            println!("codec reconstruction mse {:.3e} -> {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Command::Train { stage, data, run, codec, resume, stop_after } => {
            let stage = Stage::from_number(stage)?;
            let d = load_data(&data)?;
            let layout = RunLayout::new(&run);
            let codec = if stage == Stage::Foundation { Some(stage1_codec(&cfg, codec.as_deref(), &run)?) } else { None };
            let ctx =
                RunContext { model: &cfg.model, train: &cfg.train, data: &d, layout: &layout, config_hash: &hash, resume, stop_after };
            let rep = run_stage(stage, &ctx, codec)?;
            fs::write(run.join("config.toml"), format!("# config_hash = {hash}\n{}", cfg.to_toml())).context("writing config echo")?;
            println!("stage {} ran {} steps -> {}", stage.number(), rep.steps_run, rep.checkpoint.display());
        }
        Command::Infer { input, out, t, run } => {
            let mut ic = cfg.infer.clone();
            ic.t_mode = t_mode(t.as_deref(), &cfg)?;
            let db = deblurrer(&run)?;
            let mut names: Vec<PathBuf> = fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            names.sort();
            if names.is_empty() {
                bail!(UsageError(format!("no PNG files in {}", input.display())));
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut log = format!("# config={hash} t_mode={}\nfile,t_used\n", ic.t_mode);
            for p in &names {
                let img = ImageArray::load_png(p)?;
                let r = db.deblur_one_step(&ic, &img)?;
                let name = p.file_name().expect("listed file");
                r.image.save_png(&out.join(name))?;
                log.push_str(&format!("{},{:.4}\n", name.to_string_lossy(), r.t_used));
            }
            fs::write(out.join("restored.csv"), log).context("writing restored.csv")?;
            println!("restored {} images into {}", names.len(), out.display());
        }
        Command::Eval { manifest, report, t, run } => {
            let mut ic = cfg.infer.clone();
            ic.t_mode = t_mode(t.as_deref(), &cfg)?;
            let d = load_data(&manifest)?;
            let mut rep = evaluate(&deblurrer(&run)?, &ic, &d)?;
            rep.metadata.push(("run_config".into(), hash.clone()));
            write_out(&report, &rep.to_csv())?;
            println!(
                "psnr {:.3} (blurry {:.3})  ssim {:.4}  lpips_proxy {:.4} (blurry {:.4})",
                rep.mean.psnr, rep.blurry_baseline.psnr, rep.mean.ssim, rep.mean.lpips_proxy, rep.blurry_baseline.lpips_proxy
            );
        }
        Command::Sweep { t, manifest, out, run } => {
            let ts = t.unwrap_or_else(|| cfg.eval.sweep_t.clone());
            let d = load_data(&manifest)?;
            let rows = timestep_sweep(&deblurrer(&run)?, &cfg.infer, &d, &ts)?;
            write_out(&out, &sweep_csv(&rows, &format!("config={hash}")))?;
            for r in &rows {
                println!("t={:>5}  psnr {:.3}  ssim {:.4}  lpips_proxy {:.4}", r.t, r.psnr, r.ssim, r.lpips_proxy);
            }
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path)?;
            println!("kind = {}", ck.kind().unwrap_or("?"));
            print!("{}", ck.summary());
        }
        Command::Plot { sweep, reports, out } => {
            if sweep.is_none() && reports.is_empty() {
                bail!(UsageError("plot needs --sweep or --reports".into()));
            }
            let mut outputs = Vec::new();
            if let Some(p) = sweep {
                let (svg, _) = line_plot(&Table::read(&p)?, "t")?;
                outputs.push((out.join("sweep.svg"), svg));
            }
            if !reports.is_empty() {
                let tables = reports
                    .iter()
                    .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), Table::read(p)?)))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let (svg, _) = scatter_plot(&tables)?;
                outputs.push((out.join("perception_distortion.svg"), svg));
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (path, svg) in outputs {
                write_svg(&svg.replacen("<svg ", &format!("<!-- config={hash} -->\n<svg "), 1), &path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn stage1_codec(cfg: &RunConfig, flag: Option<&Path>, run: &Path) -> anyhow::Result<Codec> {
    let default = run.join("codec.ckpt");
    let path = flag.map(Path::to_path_buf).or_else(|| default.exists().then_some(default));
    if let Some(p) = path {
        let c = Codec::load(&p)?;
        if c.config != cfg.codec.arch {
            bail!(UsageError(format!("{} was built for a different codec.arch than the config", p.display())));
        }
        return Ok(c);
    }
    if cfg.codec.arch.kind != CodecKind::Exact {
        bail!(UsageError("learned codec needs a checkpoint: run pretrain-codec first and pass --codec".into()));
    }
    Ok(Codec::new(cfg.codec.arch.clone(), 0)?)
}

fn write_out(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

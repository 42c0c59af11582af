use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use convtr::config::{RunConfig, OUTPUT_ENV};
use convtr::data::{generate_scene, split_scenes, Scene, SynthConfig, CLASS_NAMES};
use convtr::eval::{benchmark_inference, miou, plan_tiles, save_class_map, tiled_inference};
use convtr::model::{ConvTr, ModelConfig, Variant, TRANSFORMER_ONLY_MAX_PATCH};
use convtr::rng;
use convtr::train::{checkpoint_precision, evaluate_scenes, Checkpoint, Trainer};
use convtr::verify::gradcheck_suite;
use convtr::{Error, Precision, Real};

const MODEL_SEED_TAG: u64 = 0x5eed_0001;
const SCENE_SEED_TAG: u64 = 0x5eed_1000;

#[derive(Parser)]
#[command(name = "convtr", version, about = "Hybrid convolution-transformer sea-ice segmentation of dual-polarization SAR scenes")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides io.output and the environment).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into data.scenes_dir.
    Synth {
        /// Number of scenes (defaults to data.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the scenes in data.scenes_dir.
    Train {
        /// Continue from the latest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint with tiled inference.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Scene files; defaults to every scene in data.scenes_dir.
        scenes: Vec<PathBuf>,
    },
    /// Segment one scene into a class raster.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        /// Output raster (defaults to `<output>/<scene id>.segm`).
        #[arg(long = "map", value_name = "PATH")]
        map: Option<PathBuf>,
    },
    /// Time full-scene inference of several variants.
    Bench(BenchArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true, value_name = "COMPONENT")]
        sabotage: Option<String>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Parameters to time; random initialization when absent.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Scene side (defaults to eval.bench_size).
    #[arg(long)]
    size: Option<usize>,
    /// Timed runs (defaults to eval.bench_repeats).
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated variants (defaults to eval.bench_variants).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
}

/// Process outcome: an exit code and a message for standard error.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => 1,
            Error::NumericFault { .. } => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn help_text() -> String {
    let mut s = String::from("Configuration keys (set in --config files or with --set KEY=VALUE):\n");
    for d in RunConfig::help_table() {
        let recipe = if d.recipe { "  [published recipe]" } else { "" };
        s.push_str(&format!("  {:<24} {:<22} {}{recipe}\n", d.key, d.default, d.about));
    }
    s.push_str(&format!("\nEnvironment: {OUTPUT_ENV} overrides io.output.\n"));
    s.push_str("Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric fault, 4 verification failure.");
    s
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(help_text());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::var(OUTPUT_ENV).ok())?;
    for kv in &cli.sets {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { count } => synth(&cfg, count.unwrap_or(cfg.data.count)),
        Command::Train { resume } => {
            cfg.validate()?;
            match cfg.model.precision {
                Precision::Single => train::<f32>(&cfg, resume),
                Precision::Double => train::<f64>(&cfg, resume),
            }
        }
        Command::Eval { checkpoint, scenes } => match checkpoint_precision(&checkpoint)? {
            Precision::Single => eval::<f32>(&cfg, &checkpoint, &scenes),
            Precision::Double => eval::<f64>(&cfg, &checkpoint, &scenes),
        },
        Command::Infer { checkpoint, scene, map } => match checkpoint_precision(&checkpoint)? {
            Precision::Single => infer::<f32>(&cfg, &checkpoint, &scene, map),
            Precision::Double => infer::<f64>(&cfg, &checkpoint, &scene, map),
        },
        Command::Bench(args) => bench(&cfg, args),
        Command::Gradcheck { seeds, sabotage } => gradcheck(seeds, sabotage.as_deref()),
    }
}

fn synth(cfg: &RunConfig, count: usize) -> Outcome {
    let dir = &cfg.data.scenes_dir;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    let mut manifest = String::new();
    for i in 0..count {
        let sc = SynthConfig { seed: rng::derive(cfg.seed, SCENE_SEED_TAG + i as u64), ..cfg.data.synth.clone() };
        let id = format!("scene-{i:04}");
        let scene = generate_scene(&sc, &id)?;
        scene.save(&dir.join(format!("{id}.scene")))?;
        let f = scene.class_fractions();
        let line = format!("id={id} height={} width={} sea={:.4} ice={:.4} land={:.4}", scene.height, scene.width, f[0], f[1], f[2]);
        println!("{line}");
        manifest.push_str(&line);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest).map_err(Error::from)?;
    println!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>, Error> {
    paths.iter().map(|p| Scene::load(p)).collect()
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf, Error> {
    let not_found = || Error::DataNotFound { what: "epoch checkpoint to resume from".into(), path: dir.to_path_buf() };
    let entries = std::fs::read_dir(dir).map_err(|_| not_found())?;
    let mut best: Option<(usize, PathBuf)> = None;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let epoch = name.strip_prefix("epoch-").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse::<usize>().ok());
        if let Some(n) = epoch.filter(|n| best.as_ref().is_none_or(|(b, _)| n > b)) {
            best = Some((n, e.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(not_found)
}

fn train<T: Real>(cfg: &RunConfig, resume: bool) -> Outcome {
    let paths = Scene::list_dir(&cfg.data.scenes_dir)?;
    if paths.is_empty() {
        return Err(Error::DataNotFound { what: "scene files (*.scene)".into(), path: cfg.data.scenes_dir.clone() }.into());
    }
    let scenes = load_scenes(&paths)?;
    let (train_idx, val_idx) = split_scenes(scenes.len(), cfg.data.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));
    println!("training on {} scenes, validating on {}", train_set.len(), val_set.len());
    let mut trainer = if resume {
        let path = latest_checkpoint(&cfg.output)?;
        println!("resuming from {}", path.display());
        let mut t = Trainer::resume(Checkpoint::<T>::load(&path)?, train_set, val_set)?;
        t.config.epochs = cfg.train.epochs;
        t
    } else {
        let model = ConvTr::<T>::new(&cfg.model, rng::derive(cfg.seed, MODEL_SEED_TAG))?;
        let tc = convtr::train::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
        Trainer::new(model, tc, train_set, val_set)?
    };
    trainer.overlap = cfg.eval.overlap;
    trainer.workers = cfg.eval.workers;
    std::fs::create_dir_all(&cfg.output).map_err(Error::from)?;
    std::fs::write(cfg.output.join("run.cfg"), cfg.to_string()).map_err(Error::from)?;
    let mut trainer = trainer.with_output(&cfg.output);
    trainer.run(|log| println!("{log}"))?;
    println!("best_miou={:.4} checkpoints in {}", trainer.best_miou.unwrap_or(0.0), cfg.output.display());
    Ok(())
}

fn check_overlap(overlap: usize, model: &ModelConfig) -> Result<(), Error> {
    if overlap % 2 != 0 || overlap >= model.patch {
        return Err(Error::Config(format!("eval.overlap = {overlap} must be even and below the checkpoint's patch {}", model.patch)));
    }
    Ok(())
}

fn eval<T: Real>(cfg: &RunConfig, checkpoint: &Path, scenes: &[PathBuf]) -> Outcome {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    check_overlap(cfg.eval.overlap, &ckpt.model.config)?;
    let paths = if scenes.is_empty() { Scene::list_dir(&cfg.data.scenes_dir)? } else { scenes.to_vec() };
    let scenes = load_scenes(&paths)?;
    let cm = evaluate_scenes(&ckpt.model, &scenes, &ckpt.stats, cfg.eval.overlap, cfg.eval.workers)?;
    let report = miou(&cm)?;
    println!("scenes={} pixels={}", scenes.len(), cm.total());
    for (c, iou) in report.per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        match iou {
            Some(v) => println!("iou[{name}]={v:.4}"),
            None => println!("iou[{name}]=absent"),
        }
    }
    println!("miou={:.4}", report.miou);
    println!("confusion (rows truth, columns prediction):");
    for t in 0..cm.classes {
        let row: Vec<String> = (0..cm.classes).map(|p| format!("{:>10}", cm.get(t, p))).collect();
        println!("  {:<5} {}", CLASS_NAMES.get(t).copied().unwrap_or("class"), row.join(" "));
    }
    Ok(())
}

fn infer<T: Real>(cfg: &RunConfig, checkpoint: &Path, scene: &Path, map: Option<PathBuf>) -> Outcome {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    check_overlap(cfg.eval.overlap, &ckpt.model.config)?;
    let scene = Scene::load(scene)?;
    let start = Instant::now();
    let plan = plan_tiles(scene.height, scene.width, ckpt.model.config.patch, cfg.eval.overlap)?;
    let out = tiled_inference(&ckpt.model, &scene, &plan, &ckpt.stats, cfg.eval.workers)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let path = map.unwrap_or_else(|| cfg.output.join(format!("{}.segm", scene.id)));
    save_class_map(&path, &scene.id, scene.height, scene.width, &out.classes.data)?;
    println!("scene={} size={}x{} tiles={} wall_ms={ms:.1} map={}", scene.id, scene.height, scene.width, plan.tiles.len(), path.display());
    Ok(())
}

fn bench(cfg: &RunConfig, args: BenchArgs) -> Outcome {
    let size = args.size.unwrap_or(cfg.eval.bench_size);
    let repeats = args.repeats.unwrap_or(cfg.eval.bench_repeats);
    let variants = if args.variants.is_empty() { cfg.eval.bench_variants.clone() } else { args.variants };
    let loaded = match &args.checkpoint {
        Some(p) if p.exists() => Some(Checkpoint::<f32>::load(p)?),
        Some(p) => {
            println!("notice: checkpoint {} not found, using random initialization", p.display());
            None
        }
        None => {
            println!("notice: no checkpoint given, using random initialization");
            None
        }
    };
    for variant in variants {
        let model = match &loaded {
            Some(c) if c.model.variant() == variant => c.model.clone(),
            _ => {
                let mut mc = ModelConfig { variant, precision: Precision::Single, ..cfg.model.clone() };
                if variant == Variant::TransformerOnly && mc.patch > TRANSFORMER_ONLY_MAX_PATCH {
                    mc.patch = TRANSFORMER_ONLY_MAX_PATCH;
                }
                ConvTr::<f32>::new(&mc, rng::derive(cfg.seed, MODEL_SEED_TAG))?
            }
        };
        let report = benchmark_inference(&model, size, repeats, cfg.eval.bench_warmup, cfg.eval.overlap, cfg.eval.workers)?;
        println!("{report}");
    }
    Ok(())
}

fn gradcheck(seeds: usize, sabotage: Option<&str>) -> Outcome {
    let rows = gradcheck_suite(seeds, sabotage)?;
    for r in &rows {
        println!("{r}");
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        println!("all {} components pass", rows.len());
        Ok(())
    } else {
        Err(Failure { code: 4, message: format!("gradient check failed for: {}", failed.join(", ")) })
    }
}

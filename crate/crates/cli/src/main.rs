use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use focalcomm::eval::{evaluate, sweep_compression, sweep_csv, sweep_plot_data, COMPRESSION_RATIOS};
use focalcomm::him::{heatmap_pgm, Mode};
use focalcomm::model::{prepare, Model, PreparedScene};
use focalcomm::numcore::Graph;
use focalcomm::scenesim::{generate_scene, scene_seed, Scene};
use focalcomm::train::train;
use focalcomm::RunConfig;

mod checkpoint;

#[derive(Parser)]
#[command(
    name = "focalcomm",
    version,
    about = "Multi-agent BEV detection with hard instance mining and query-guided fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Micro,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    None,
    Him,
    Qaff,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train with plain SGD and write a checkpoint plus a per-step log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenes: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally with components disabled.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_enum, default_value_t = Ablate::None)]
        ablate: Ablate,
        /// Report path; the report goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train one model per compression ratio and tabulate mAP.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train_scenes: PathBuf,
        #[arg(long)]
        eval_scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = COMPRESSION_RATIOS)]
        ratios: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory receiving `sweep.csv` and `sweep_plot.dat`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write every agent's stage heatmaps as PGM images.
    Dump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()));
    }
    Ok(match args.preset {
        Preset::Desk => RunConfig::default(),
        Preset::Micro => RunConfig::micro(),
        Preset::Toy => RunConfig::toy(),
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scene::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `scene_<seed>_<index>.json` sorts by seed then numeric index; other
/// names by themselves.
fn scene_sort_key(path: &Path) -> (String, u64, String) {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.trim_end_matches(".json");
    match stem.rsplit_once('_').map(|(head, tail)| (head, tail.parse::<u64>())) {
        Some((head, Ok(i))) => (head.to_string(), i, name.clone()),
        _ => (stem.to_string(), 0, name.clone()),
    }
}

fn load_scenes(dir: &Path, cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort_by_key(|p| scene_sort_key(p));
    if paths.is_empty() {
        bail!("no scene files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let scene = read_scene(p)?;
            prepare(&scene, &cfg.model.voxel, cfg.model.max_agents)
                .with_context(|| format!("preparing {}", p.display()))
        })
        .collect()
}

fn cmd_gen(seed: u64, count: usize, out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let scene = generate_scene(scene_seed(seed, i as u64), &cfg.scene)?;
        write(&out.join(format!("scene_{seed}_{i}.json")), scene.to_json()?)?;
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, scenes: &Path, steps: Option<usize>, out: &Path, log: Option<&Path>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let scenes = if cfg.train.steps > 0 { load_scenes(scenes, &cfg)? } else { Vec::new() };
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut lines = String::new();
    train(&mut model, &scenes, &cfg.train, |r| {
        lines.push_str(&serde_json::to_string(r).expect("step record serializes"));
        lines.push('\n');
    })?;
    write(out, checkpoint::save(&model, &cfg)?)?;
    let log = log.map_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())), Path::to_path_buf);
    write(&log, lines)
}

fn cmd_eval(ckpt: &Path, scenes: &Path, ablate: Ablate, out: Option<&Path>, jobs: usize) -> Result<()> {
    let (mut cfg, params) = checkpoint::read(ckpt)?;
    if matches!(ablate, Ablate::Him | Ablate::Both) {
        cfg.model.him_enabled = false;
    }
    if matches!(ablate, Ablate::Qaff | Ablate::Both) {
        cfg.model.qaff_enabled = false;
    }
    let model = checkpoint::restore(&cfg, &params)?;
    let scenes = load_scenes(scenes, &cfg)?;
    let report = evaluate(&model, &scenes, &cfg.eval, jobs)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cfg: &RunConfig,
    train_dir: &Path,
    eval_dir: &Path,
    ratios: &[usize],
    steps: Option<usize>,
    out: &Path,
    jobs: usize,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let train_scenes = load_scenes(train_dir, &cfg)?;
    let eval_scenes = load_scenes(eval_dir, &cfg)?;
    let rows = sweep_compression(
        |ratio| {
            let mut m = cfg.model.clone();
            m.compression_ratio = ratio;
            let mut model = Model::new(&m, cfg.seed)?;
            train(&mut model, &train_scenes, &cfg.train, |_| {})?;
            Ok(model)
        },
        &eval_scenes,
        ratios,
        &cfg.eval,
        jobs,
    )?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("sweep.csv"), sweep_csv(&rows))?;
    write(&out.join("sweep_plot.dat"), sweep_plot_data(&rows))
}

fn cmd_dump(ckpt: &Path, scene: &Path, out: &Path) -> Result<()> {
    let (cfg, params) = checkpoint::read(ckpt)?;
    let model = checkpoint::restore(&cfg, &params)?;
    let scene = prepare(&read_scene(scene)?, &cfg.model.voxel, cfg.model.max_agents)?;
    let mut g = Graph::new(&model.store);
    let fwd = model.forward(&mut g, &scene, Mode::Infer)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (id, him) in fwd.agent_ids.iter().zip(&fwd.him) {
        for (s, stage) in him.stages.iter().enumerate() {
            let logits = g.value(stage.heatmap);
            for k in 0..logits.shape()[0] {
                write(&out.join(format!("agent{id}_stage{s}_class{k}.pgm")), heatmap_pgm(logits, k)?)?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { seed, count, out, cfg } => cmd_gen(seed, count, &out, &load_config(&cfg)?),
        Command::Train { cfg, scenes, steps, out, log } => {
            cmd_train(&load_config(&cfg)?, &scenes, steps, &out, log.as_deref())
        }
        Command::Eval { ckpt, scenes, ablate, out, jobs } => cmd_eval(&ckpt, &scenes, ablate, out.as_deref(), jobs),
        Command::Sweep { cfg, train_scenes, eval_scenes, ratios, steps, out, jobs } => {
            cmd_sweep(&load_config(&cfg)?, &train_scenes, &eval_scenes, &ratios, steps, &out, jobs)
        }
        Command::Dump { ckpt, scene, out } => cmd_dump(&ckpt, &scene, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

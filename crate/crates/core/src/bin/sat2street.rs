use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use sat2street::datasets::{write_synthetic, Split, SyntheticSizes};
use sat2street::pipeline::config::CONFIG_KEYS;
use sat2street::pipeline::manifest::Manifest;
use sat2street::pipeline::report::report_from_metrics;
use sat2street::pipeline::stages::full_path;
use sat2street::pipeline::{infer, run_all, run_stage1, run_stage2, run_stage3, run_stage4, Checkpoint, Pipeline, PipelineConfig};
use sat2street::Result;

#[derive(Parser, Debug)]
#[command(name = "sat2street", version, about = "Train and run the satellite-to-street-view panorama pipeline")]
struct Cli {
    /// Flat `key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for checkpoints, caches, manifests and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Config override, repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural paired dataset into `data.root` (or `--dest`).
    MakeSynthetic {
        /// Training pairs.
        #[arg(long)]
        count: usize,
        /// Test pairs; defaults to a quarter of `--count`.
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train one stage (1-4) or all of them in order.
    Train {
        #[arg(long, default_value = "all", value_parser = ["1", "2", "3", "4", "all"])]
        stage: String,
        /// Continue from `stage<N>.partial.ckpt` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Run one satellite image through the full pipeline.
    Infer {
        #[arg(long)]
        satellite: PathBuf,
        /// Prompt text; defaults to `prompt.text`.
        #[arg(long)]
        caption: Option<String>,
        /// Defaults to `<out>/full.ckpt`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory; defaults to `<out>/infer`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Score a split and write report.csv, report.md and metrics.json into the run directory.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Re-render report.csv and report.md from metrics.json.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeSynthetic { .. } => "make-synthetic",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
        }
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys (set in --config files or with --set KEY=VALUE):\n");
    for (key, doc) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<28} {doc}\n"));
    }
    s
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, args: &[String]) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.as_path();
    Manifest::new(cli.command.name(), args, &cfg)?.write(out)?;
    let ckpt_or_default = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| full_path(out));
    match &cli.command {
        Command::MakeSynthetic { count, test_count, dest } => {
            let dest = dest.as_deref().unwrap_or(&cfg.data_root);
            let sizes = SyntheticSizes { satellite: cfg.satellite_size, pano_height: cfg.pano_height, ..Default::default() };
            let tests = test_count.unwrap_or(count.div_ceil(4));
            write_synthetic(dest, cfg.seed, *count, tests, sizes)?;
            println!("wrote {count} train and {tests} test pairs to {}", dest.display());
        }
        Command::Train { stage, resume } => {
            let outcomes = match stage.as_str() {
                "1" => vec![run_stage1(&cfg, out, *resume)?],
                "2" => vec![run_stage2(&cfg, out, *resume)?],
                "3" => vec![run_stage3(&cfg, out, *resume)?],
                "4" => vec![run_stage4(&cfg, out, *resume)?],
                _ => run_all(&cfg, out, *resume)?,
            };
            for o in outcomes {
                let last = o.history.last().copied().unwrap_or(f64::NAN);
                println!("stage {}: {} updates, final loss {last:.5}, wrote {}", o.stage, o.history.len(), o.path.display());
            }
        }
        Command::Infer { satellite, caption, ckpt, dest } => {
            let dest = dest.clone().unwrap_or_else(|| out.join("infer"));
            infer::infer(&cfg, &ckpt_or_default(ckpt), satellite, caption.as_deref(), &dest)?;
            println!("wrote outputs to {}", dest.display());
        }
        Command::Evaluate { split, ckpt } => {
            let pipe = Pipeline::from_checkpoint(&cfg, &Checkpoint::load(ckpt_or_default(ckpt))?)?
                .with_cache(out.join("cache"));
            let r = infer::evaluate(&cfg, &pipe, *split, out)?;
            print_summary(&r, out);
        }
        Command::Report => {
            let r = report_from_metrics(out)?;
            print_summary(&r, out);
        }
    }
    Ok(())
}

fn print_summary(r: &sat2street::metrics::MetricReport, out: &Path) {
    println!(
        "n={} ssim={:.4} psnr={:.3} fid-proxy={:.4} lpips-proxy={:.4}; report in {}",
        r.n_pairs,
        r.ssim,
        r.psnr,
        r.fid,
        r.lpips,
        out.join("report.md").display()
    );
    if let Some(w) = &r.warning {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let matches = Cli::command().after_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chase_core::evaluation::{evaluate, EvalMode, MetricReport};
use chase_core::model::{Checkpoint, ModelKind};
use chase_core::pipeline::{run_benchmark, train_stage};
use chase_core::pseudolabel::{build_holes_dataset, read_holes, write_holes};
use chase_core::synthdata::{generate_datasets, Datasets, SynthConfig};
use chase_core::trainer::{init_cohetero_from_pretrained, pretrain, pretrain_csv, RunDir, TrainConfig};
use chase_core::volume_io::{read_datasets, write_datasets};

#[derive(Parser)]
#[command(name = "chase", version, about = "Multi-phase liver segmentation with co-heterogeneous and adversarial adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic studies and write them to --out.
    GenData {
        /// Data generator TOML; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training of the single-phase network on the labelled set.
    Pretrain(TrainArgs),
    /// Joint training from a pretrained checkpoint.
    Train(TrainArgs),
    /// Pseudo-label enclosed holes in the predicted liver of unlabelled studies.
    BuildHoles {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = chase_core::pseudolabel::MIN_HOLE_VOXELS)]
        min_size: usize,
    },
    /// Joint training with the holes term, starting from a joint checkpoint.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Directory written by build-holes.
        #[arg(long)]
        holes: PathBuf,
    },
    /// Score a checkpoint on held-out target studies.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// NC, A, V, D, all or combos; repeatable. Defaults to the four
        /// phases plus all.
        #[arg(long)]
        mode: Vec<EvalMode>,
        /// Model name written into the tables; defaults to the checkpoint stage.
        #[arg(long)]
        name: Option<String>,
        /// Score the source test split instead.
        #[arg(long)]
        source: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics.csv files into summary, box-plot and text tables.
    Report {
        /// Directories holding metrics.csv (and optionally skipped.csv).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages end to end on generated data.
    Benchmark {
        /// Training TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data generator TOML.
        #[arg(long)]
        data_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Training TOML; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting checkpoint (not used by pretrain).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut tc = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            tc.seed = s;
        }
        tc.validate()?;
        Ok(tc)
    }

    fn start(&self) -> Result<Checkpoint> {
        let path = self.checkpoint.as_ref().context("--checkpoint is required")?;
        Ok(Checkpoint::load(path)?)
    }
}

fn load_data(dir: &Path) -> Result<Datasets> {
    read_datasets(dir).with_context(|| format!("reading datasets from {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(&dir.join("metrics.csv"), &report.rows_csv())?;
    write(&dir.join("skipped.csv"), &report.skipped_csv())?;
    write(&dir.join("summary.csv"), &report.summary_csv())?;
    write(&dir.join("boxplot.csv"), &report.boxplot_csv())?;
    write(&dir.join("summary.txt"), &report.text_summary())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => SynthConfig::load(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = generate_datasets(&cfg)?;
            let records = write_datasets(&out, &data)?;
            write(&out.join("data.toml"), &cfg.to_toml())?;
            println!("wrote {} studies to {}", records.len(), out.display());
        }
        Cmd::Pretrain(args) => {
            let tc = args.config()?;
            let data = load_data(&args.data)?;
            let run = RunDir::create(&args.out, &tc)?;
            let outcome = pretrain(&tc, &data.labeled, &data.source_val, |e| {
                eprintln!("epoch {:>3}  loss {:.5}  val DSC {:.4}", e.epoch, e.loss, e.val_dsc)
            })?;
            let path = run.checkpoint_path("pretrain");
            outcome.checkpoint.save(&path)?;
            run.write("pretrain_log.csv", &pretrain_csv(&outcome.log))?;
            println!("best validation DSC {:.4}; checkpoint {}", outcome.best_val_dsc, path.display());
        }
        Cmd::Train(args) => {
            let tc = args.config()?;
            let start = args.start()?;
            let init = match start.kind {
                ModelKind::Single => init_cohetero_from_pretrained(&start, &tc.disc(), tc.seed)?,
                ModelKind::Hetero => start,
            };
            let data = load_data(&args.data)?;
            let run = RunDir::create(&args.out, &tc)?;
            train_stage(&tc, &init, &data, &[], tc.chase_epochs, "chase", &run)?;
            println!("checkpoint {}", run.checkpoint_path("chase").display());
        }
        Cmd::BuildHoles {
            data,
            checkpoint,
            out,
            min_size,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_data(&data)?;
            let holes = build_holes_dataset(&ck.model(), &data.unlabeled, min_size)?;
            write_holes(&out, &holes)?;
            let voxels: usize = holes.iter().map(|h| h.hole_voxels()).sum();
            println!("{} studies with holes ({voxels} voxels) written to {}", holes.len(), out.display());
        }
        Cmd::Finetune { train, holes } => {
            let tc = train.config()?;
            let start = train.start()?;
            if start.kind != ModelKind::Hetero {
                bail!("finetune starts from a joint-training checkpoint");
            }
            let data = load_data(&train.data)?;
            let holes = read_holes(&holes)?;
            let run = RunDir::create(&train.out, &tc)?;
            train_stage(&tc, &start, &data, &holes, tc.finetune_epochs, "finetune", &run)?;
            println!("checkpoint {}", run.checkpoint_path("finetune").display());
        }
        Cmd::Eval {
            data,
            checkpoint,
            mode,
            name,
            source,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_data(&data)?;
            let modes = if mode.is_empty() { EvalMode::standard() } else { mode };
            let name = name.unwrap_or_else(|| ck.stage.clone());
            let studies = if source { &data.source_test } else { &data.target_test };
            let report = evaluate(&ck.model(), &name, studies, &modes)?;
            write_report(&out, &report)?;
            print!("{}", report.text_summary());
        }
        Cmd::Report { inputs, out } => {
            let mut report = MetricReport::default();
            for dir in &inputs {
                let rows = fs::read_to_string(dir.join("metrics.csv"))
                    .with_context(|| format!("reading {}", dir.join("metrics.csv").display()))?;
                let skipped = fs::read_to_string(dir.join("skipped.csv")).ok();
                report.extend(MetricReport::from_csv(&rows, skipped.as_deref())?);
            }
            write_report(&out, &report)?;
            print!("{}", report.text_summary());
        }
        Cmd::Benchmark {
            config,
            data_config,
            seed,
            out,
        } => {
            let mut tc = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let mut synth = match data_config {
                Some(p) => SynthConfig::load(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                tc.seed = s;
                synth.seed = s;
            }
            let outcome = run_benchmark(&synth, &tc, &out, |m| eprintln!("{m}"))?;
            print!("{}", outcome.report.text_summary());
            println!("{:#?}", outcome.numbers);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}

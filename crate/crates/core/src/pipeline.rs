//! The full desk-scale experiment: data, source-only baseline, joint
//! training, hole pseudo-labels, finetuning, and evaluation of all three
//! models on the held-out target studies.

use std::path::Path;
use std::time::Instant;

use crate::ada::ForwardCounter;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, mean_dsc_over, EvalMode, MetricReport};
use crate::model::Checkpoint;
use crate::pseudolabel::{build_holes_dataset, write_holes, HolesRecord};
use crate::synthdata::{generate_datasets, Datasets, SynthConfig};
use crate::trainer::{init_cohetero_from_pretrained, loss_csv, pretrain, pretrain_csv, run_chase, RunDir, TrainConfig};

pub const BASELINE: &str = "baseline";
pub const CHASE: &str = "chase";
pub const FINETUNED: &str = "chase+holes";

/// Headline numbers of a benchmark run (mean liver-region DSC).
#[derive(Clone, Debug, PartialEq)]
pub struct BenchNumbers {
    pub baseline_nc: f64,
    pub baseline_v: f64,
    pub baseline_all: f64,
    pub chase_nc: f64,
    pub chase_all: f64,
    pub finetuned_all: f64,
    pub chase_tace_all: f64,
    pub finetuned_tace_all: f64,
    pub source_val_dsc: f64,
    pub holes_studies: usize,
    pub tace_studies: usize,
}

pub struct BenchOutcome {
    pub numbers: BenchNumbers,
    pub report: MetricReport,
    pub holes: Vec<HolesRecord>,
}

fn need(v: Option<f64>, what: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Contract(format!("no scored studies for {what}")))
}

/// Runs the joint loop from `start` and saves `<stage>_loss.csv` and the
/// `<stage>` checkpoint into `run`.
pub fn train_stage(
    tc: &TrainConfig,
    start: &Checkpoint,
    data: &Datasets,
    holes: &[HolesRecord],
    epochs: usize,
    stage: &str,
    run: &RunDir,
) -> Result<Checkpoint> {
    let counter = ForwardCounter::new();
    let out = run_chase(tc, start, &data.labeled, &data.unlabeled, holes, epochs, &counter, |_| {})?;
    run.write(&format!("{stage}_loss.csv"), &loss_csv(&out.losses))?;
    let ck = out.state.checkpoint(stage, &tc.disc());
    ck.save(&run.checkpoint_path(stage))?;
    Ok(ck)
}

/// Runs every stage into `out` and writes `metrics.csv`, `summary.csv`,
/// `boxplot.csv`, `skipped.csv` and `summary.txt`.
pub fn run_benchmark(
    synth: &SynthConfig,
    tc: &TrainConfig,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<BenchOutcome> {
    let t0 = Instant::now();
    let stamp = |msg: String| format!("[{:>6.1}s] {msg}", t0.elapsed().as_secs_f64());
    let run = RunDir::create(out, tc)?;
    run.write("data.toml", &synth.to_toml())?;
    let data = generate_datasets(synth)?;
    log(&stamp(format!(
        "data: {} labelled, {} unlabelled, {} target test",
        data.labeled.len(),
        data.unlabeled.len(),
        data.target_test.len()
    )));

    let pre = pretrain(tc, &data.labeled, &data.source_val, |e| {
        log(&format!("  pretrain epoch {} loss {:.4} val DSC {:.4}", e.epoch, e.loss, e.val_dsc))
    })?;
    pre.checkpoint.save(&run.checkpoint_path("pretrain"))?;
    run.write("pretrain_log.csv", &pretrain_csv(&pre.log))?;
    log(&stamp(format!("pretrain best val DSC {:.4}", pre.best_val_dsc)));

    let init = init_cohetero_from_pretrained(&pre.checkpoint, &tc.disc(), tc.seed)?;
    let chase = train_stage(tc, &init, &data, &[], tc.chase_epochs, "chase", &run)?;
    log(&stamp("joint training done".into()));

    let holes = build_holes_dataset(&chase.model(), &data.unlabeled, tc.min_hole_voxels)?;
    write_holes(&out.join("holes"), &holes)?;
    log(&stamp(format!("holes dataset: {} studies", holes.len())));

    let fine = train_stage(tc, &chase, &data, &holes, tc.finetune_epochs, "finetune", &run)?;
    log(&stamp("finetune done".into()));

    let test = &data.target_test;
    let mut report = evaluate(&pre.checkpoint.model(), BASELINE, test, &EvalMode::standard())?;
    let mut modes = EvalMode::standard();
    modes.push(EvalMode::AllCombos);
    report.extend(evaluate(&chase.model(), CHASE, test, &modes)?);
    report.extend(evaluate(&fine.model(), FINETUNED, test, &modes)?);
    log(&stamp("evaluation done".into()));

    let tace: Vec<&str> = test.iter().filter(|s| s.cavities > 0).map(|s| s.id.as_str()).collect();
    let numbers = BenchNumbers {
        baseline_nc: need(report.mean_dsc(BASELINE, "NC"), "baseline NC")?,
        baseline_v: need(report.mean_dsc(BASELINE, "V"), "baseline V")?,
        baseline_all: need(report.mean_dsc(BASELINE, "all"), "baseline all")?,
        chase_nc: need(report.mean_dsc(CHASE, "NC"), "chase NC")?,
        chase_all: need(report.mean_dsc(CHASE, "all"), "chase all")?,
        finetuned_all: need(report.mean_dsc(FINETUNED, "all"), "finetuned all")?,
        chase_tace_all: need(mean_dsc_over(&report, CHASE, "all", &tace), "chase on cavity studies")?,
        finetuned_tace_all: need(mean_dsc_over(&report, FINETUNED, "all", &tace), "finetuned on cavity studies")?,
        source_val_dsc: pre.best_val_dsc,
        holes_studies: holes.len(),
        tace_studies: tace.len(),
    };
    run.write("metrics.csv", &report.rows_csv())?;
    run.write("summary.csv", &report.summary_csv())?;
    run.write("boxplot.csv", &report.boxplot_csv())?;
    run.write("skipped.csv", &report.skipped_csv())?;
    run.write("summary.txt", &report.text_summary())?;
    Ok(BenchOutcome {
        numbers,
        report,
        holes,
    })
}

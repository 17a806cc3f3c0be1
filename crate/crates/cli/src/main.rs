use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use clipdistill::checkpoint::{self, Checkpoint, CheckpointMeta};
use clipdistill::config::RunConfig;
use clipdistill::eval::ablation_report;
use clipdistill::gradsuite;
use clipdistill::metrics::{MetricsLog, Record};
use clipdistill::nn::ParamSet;
use clipdistill::pipeline::{self as pl, DataBundle};
use clipdistill::{Error, Result};

/// Two-stage distillation and contrastive alignment on a synthetic
/// bilingual world.
#[derive(Parser)]
#[command(name = "clipdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, training pairs and eval split.
    GenData(Common),
    /// Build the frozen, aligned teacher.
    MakeTeacher(Common),
    /// Stage 1: distill the student image tower.
    DistillImage(Common),
    /// Stage 1: distill the student text tower.
    DistillText(Common),
    /// Stage 2: contrastive alignment with the image tower frozen.
    Align(Common),
    /// Zero-shot evaluation of the aligned model.
    Eval(Common),
    /// Stage-1-only versus full pipeline comparison.
    Ablate(Common),
    /// Finite-difference gradient checks for every loss.
    Gradcheck(Common),
    /// Summarize all stages into report.txt.
    Report(Common),
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    start: Instant,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        std::fs::create_dir_all(&common.out)?;
        Ok(Self {
            cfg,
            out: common.out.clone(),
            start: Instant::now(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    /// Loads an upstream artifact and checks it was produced under the
    /// same config and seed.
    fn load(&self, file: &str) -> Result<Checkpoint> {
        let ck = checkpoint::load(&self.path(file))?;
        if ck.meta.config_hash != self.cfg.hash() {
            return Err(Error::InvalidArgument(format!(
                "{} was written under config {} but the current config hashes to {}",
                self.path(file).display(),
                ck.meta.config_hash,
                self.cfg.hash()
            )));
        }
        Ok(ck)
    }

    fn data(&self) -> Result<DataBundle> {
        pl::data_from_checkpoint(&self.load(pl::DATA_FILE)?)
    }

    fn save(&self, file: &str, (params, meta): (ParamSet, CheckpointMeta)) -> Result<()> {
        checkpoint::save(&self.path(file), &params, &meta)
    }

    fn log(&self, records: &[Record]) -> Result<()> {
        let mut log = MetricsLog::append(&self.path(pl::METRICS_FILE))?;
        records.iter().try_for_each(|r| log.log(r))
    }

    fn wall_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(file), text)?;
        Ok(())
    }
}

/// Report with its timing zeroed, for embedding in checkpoints.
fn stable<T: Serialize>(report: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(report)?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("wall_ms".into(), 0.into());
    }
    Ok(v)
}

fn with_report(
    mut pair: (ParamSet, CheckpointMeta),
    report: serde_json::Value,
) -> (ParamSet, CheckpointMeta) {
    if let Some(obj) = pair.1.extra.as_object_mut() {
        obj.insert("report".into(), report);
    }
    pair
}

fn stored_report<T: DeserializeOwned>(ck: &Checkpoint, file: &str) -> Result<T> {
    let v = ck
        .meta
        .extra
        .get("report")
        .ok_or_else(|| Error::Checkpoint(format!("{file} carries no stage report")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{file}: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let ctx = Ctx::new(&c)?;
            let data = pl::generate_data(&ctx.cfg)?;
            ctx.save(pl::DATA_FILE, pl::data_to_checkpoint(&ctx.cfg, &data)?)?;
            ctx.log(&[Record::new("gen-data", 0, ctx.cfg.seed, ctx.wall_ms())
                .with("pairs", data.pairs.len())
                .with("eval_images", data.benchmark.len())
                .with("vocab", data.world.vocab_size())])?;
            println!(
                "wrote {} ({} pairs, {} eval images)",
                ctx.path(pl::DATA_FILE).display(),
                data.pairs.len(),
                data.benchmark.len()
            );
        }
        Command::MakeTeacher(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let teacher = pl::make_teacher(&ctx.cfg, &data.world)?;
            ctx.save(
                pl::TEACHER_FILE,
                pl::teacher_to_checkpoint(&ctx.cfg, &teacher)?,
            )?;
            ctx.log(
                &[Record::new("make-teacher", 0, ctx.cfg.seed, ctx.wall_ms())
                    .with("teacher_fingerprint", teacher.fingerprint())],
            )?;
            println!("wrote {}", ctx.path(pl::TEACHER_FILE).display());
        }
        Command::DistillImage(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let teacher = pl::teacher_from_checkpoint(&ctx.load(pl::TEACHER_FILE)?)?;
            let (tower, report) =
                pl::distill_image(&ctx.cfg, &teacher, &data, pl::init_image_student(&ctx.cfg)?)?;
            let pair = pl::image_tower_to_checkpoint(&ctx.cfg, "distill-image", &tower)?;
            ctx.save(pl::STUDENT_IMAGE_FILE, with_report(pair, stable(&report)?))?;
            ctx.log(&pl::distill_records(&report, ctx.cfg.seed))?;
            println!(
                "image held-out loss {:.6e} -> {:.6e}",
                report.initial_heldout_loss,
                report.final_heldout_loss()
            );
        }
        Command::DistillText(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let teacher = pl::teacher_from_checkpoint(&ctx.load(pl::TEACHER_FILE)?)?;
            let student = pl::init_text_student(&ctx.cfg, data.world.vocab_size())?;
            let (tower, report) = pl::distill_text(&ctx.cfg, &teacher, &data, student)?;
            let pair = pl::text_tower_to_checkpoint(&ctx.cfg, "distill-text", &tower)?;
            ctx.save(pl::STUDENT_TEXT_FILE, with_report(pair, stable(&report)?))?;
            ctx.log(&pl::distill_records(&report, ctx.cfg.seed))?;
            println!(
                "text held-out loss {:.6e} -> {:.6e}",
                report.initial_heldout_loss,
                report.final_heldout_loss()
            );
        }
        Command::Align(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let image = pl::image_tower_from_checkpoint(&ctx.load(pl::STUDENT_IMAGE_FILE)?)?;
            let text = pl::text_tower_from_checkpoint(&ctx.load(pl::STUDENT_TEXT_FILE)?)?;
            let (tuned, report) = pl::align(&ctx.cfg, &data, &image, &text)?;
            let pair = pl::text_tower_to_checkpoint(&ctx.cfg, "align", &tuned)?;
            ctx.save(pl::ALIGNED_TEXT_FILE, with_report(pair, stable(&report)?))?;
            ctx.log(&pl::align_records(&report, ctx.cfg.seed))?;
            println!(
                "contrastive loss {:.6} -> {:.6}, image tower unchanged: {}",
                report.initial_loss,
                report.final_loss(),
                report.image_tower_unchanged()
            );
        }
        Command::Eval(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let image = pl::image_tower_from_checkpoint(&ctx.load(pl::STUDENT_IMAGE_FILE)?)?;
            let text = pl::text_tower_from_checkpoint(&ctx.load(pl::ALIGNED_TEXT_FILE)?)?;
            let reports = pl::evaluate_both(&ctx.cfg, "full", &image, &text, &data.benchmark)?;
            ctx.write_json(pl::EVAL_FILE, &reports)?;
            ctx.log(&pl::eval_records(&reports, ctx.cfg.seed))?;
            for r in &reports {
                print!("{}", r.table());
            }
        }
        Command::Ablate(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let image = pl::image_tower_from_checkpoint(&ctx.load(pl::STUDENT_IMAGE_FILE)?)?;
            let stage1 = pl::text_tower_from_checkpoint(&ctx.load(pl::STUDENT_TEXT_FILE)?)?;
            let full = pl::text_tower_from_checkpoint(&ctx.load(pl::ALIGNED_TEXT_FILE)?)?;
            let report = ablation_report(&image, &stage1, &full, &data.benchmark)?;
            ctx.write_json(pl::ABLATION_FILE, &report)?;
            let records: Vec<Record> = report
                .rows
                .iter()
                .map(|r| {
                    Record::new("ablate", 0, ctx.cfg.seed, 0)
                        .with("language", r.language.tag())
                        .with("stage1_only", r.stage1_only)
                        .with("full", r.full)
                        .with("delta", r.delta)
                })
                .collect();
            ctx.log(&records)?;
            print!("{}", report.table());
        }
        Command::Gradcheck(c) => {
            let ctx = Ctx::new(&c)?;
            let results = gradsuite::gradient_suite(10, ctx.cfg.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{:<18} max relative error {:.3e} over {} points  {}",
                    r.loss,
                    r.max_error,
                    r.points,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(r.loss);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Backward(format!(
                    "gradient check above {:e} for {}",
                    gradsuite::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
        Command::Report(c) => {
            let ctx = Ctx::new(&c)?;
            let data = ctx.data()?;
            let image_ck = ctx.load(pl::STUDENT_IMAGE_FILE)?;
            let text_ck = ctx.load(pl::STUDENT_TEXT_FILE)?;
            let aligned_ck = ctx.load(pl::ALIGNED_TEXT_FILE)?;
            let image = pl::image_tower_from_checkpoint(&image_ck)?;
            let stage1 = pl::text_tower_from_checkpoint(&text_ck)?;
            let full = pl::text_tower_from_checkpoint(&aligned_ck)?;
            let ablation = ablation_report(&image, &stage1, &full, &data.benchmark)?;
            let text = pl::render_report(
                &ctx.cfg,
                &stored_report(&image_ck, pl::STUDENT_IMAGE_FILE)?,
                &stored_report(&text_ck, pl::STUDENT_TEXT_FILE)?,
                &stored_report(&aligned_ck, pl::ALIGNED_TEXT_FILE)?,
                &ablation,
            );
            std::fs::write(ctx.path(pl::REPORT_FILE), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! End-to-end orchestration and artifact (de)serialization.
//!
//! Every stage is a pure function of the run config and its inputs. The
//! CLI persists each stage's output as a checkpoint; [`run_full`] chains
//! the same functions in memory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{run_stage2, AlignReport};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::distill::{run_stage1, DistillReport, DistillTarget, Student};
use crate::error::{Error, Result};
use crate::eval::{ablation_report, evaluate_sharded, AblationReport, Benchmark, EvalReport};
use crate::metrics::Record;
use crate::nn::{
    init_adapter, init_projection, ImageEncoderSpec, ImageTower, ParamSet, TextEncoderSpec,
    TextTower,
};
use crate::synth::{
    generate_world, make_frozen_teacher, FrozenTeacher, ImageTextPair, Language, WorldSpec,
};
use crate::tensor::Tensor;

pub const DATA_FILE: &str = "data.dckp";
pub const TEACHER_FILE: &str = "teacher.dckp";
pub const STUDENT_IMAGE_FILE: &str = "student_image.dckp";
pub const STUDENT_TEXT_FILE: &str = "student_text.dckp";
pub const ALIGNED_TEXT_FILE: &str = "aligned_text.dckp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const REPORT_FILE: &str = "report.txt";

/// Synthetic world, training pairs and the evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub world: WorldSpec,
    pub pairs: Vec<ImageTextPair>,
    pub benchmark: Benchmark,
}

pub fn generate_data(cfg: &RunConfig) -> Result<DataBundle> {
    let world = generate_world(cfg.concepts, cfg.image_dim, cfg.stream_seed("world"))?;
    let pairs = world.generate_pairs(cfg.train_pairs, cfg.train_sigma, cfg.stream_seed("pairs"))?;
    let benchmark = Benchmark::generate(
        &world,
        cfg.eval_images,
        cfg.eval_sigma,
        cfg.stream_seed("benchmark"),
    )?;
    Ok(DataBundle {
        world,
        pairs,
        benchmark,
    })
}

pub fn make_teacher(cfg: &RunConfig, world: &WorldSpec) -> Result<FrozenTeacher> {
    make_frozen_teacher(world, cfg.teacher_params(), cfg.stream_seed("teacher"))
}

/// Student image encoder plus the channel adapter onto the teacher width.
pub fn init_image_student(cfg: &RunConfig) -> Result<ImageTower> {
    let spec = cfg.image_student_spec();
    let seed = cfg.stream_seed("init.image");
    let mut params = spec.init(seed)?;
    params.merge(init_adapter(
        cfg.student_channels,
        cfg.teacher_width,
        seed ^ 1,
    )?)?;
    Ok(ImageTower { spec, params })
}

/// Student text encoder plus the projection head onto the teacher width.
pub fn init_text_student(cfg: &RunConfig, vocab: usize) -> Result<TextTower> {
    let spec = cfg.text_student_spec(vocab);
    let seed = cfg.stream_seed("init.text");
    let mut params = spec.init(seed)?;
    params.merge(init_projection(
        cfg.student_text_width,
        cfg.teacher_width,
        seed ^ 1,
    )?)?;
    Ok(TextTower { spec, params })
}

pub fn distill_image(
    cfg: &RunConfig,
    teacher: &FrozenTeacher,
    data: &DataBundle,
    student: ImageTower,
) -> Result<(ImageTower, DistillReport)> {
    match run_stage1(
        &cfg.distill_config(DistillTarget::Image),
        teacher,
        &data.pairs,
        Student::Image(student),
    )? {
        (Student::Image(t), r) => Ok((t, r)),
        _ => unreachable!("stage 1 returns the tower it was given"),
    }
}

pub fn distill_text(
    cfg: &RunConfig,
    teacher: &FrozenTeacher,
    data: &DataBundle,
    student: TextTower,
) -> Result<(TextTower, DistillReport)> {
    match run_stage1(
        &cfg.distill_config(DistillTarget::Text),
        teacher,
        &data.pairs,
        Student::Text(student),
    )? {
        (Student::Text(t), r) => Ok((t, r)),
        _ => unreachable!("stage 1 returns the tower it was given"),
    }
}

pub fn align(
    cfg: &RunConfig,
    data: &DataBundle,
    image: &ImageTower,
    text: &TextTower,
) -> Result<(TextTower, AlignReport)> {
    run_stage2(&cfg.align_config(), image, text, &data.pairs)
}

pub fn evaluate_both(
    cfg: &RunConfig,
    variant: &str,
    image: &ImageTower,
    text: &TextTower,
    bench: &Benchmark,
) -> Result<Vec<EvalReport>> {
    Language::ALL
        .iter()
        .map(|&lang| evaluate_sharded(variant, image, text, bench, lang, cfg.eval_shards))
        .collect()
}

/// All in-memory outputs of one complete run.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub config: RunConfig,
    pub data: DataBundle,
    pub teacher: FrozenTeacher,
    pub student_image: ImageTower,
    pub student_text: TextTower,
    pub aligned_text: TextTower,
    pub image_report: DistillReport,
    pub text_report: DistillReport,
    pub align_report: AlignReport,
    pub eval: Vec<EvalReport>,
    pub ablation: AblationReport,
}

impl FullRun {
    pub fn records(&self) -> Vec<Record> {
        let seed = self.config.seed;
        let mut out = distill_records(&self.image_report, seed);
        out.extend(distill_records(&self.text_report, seed));
        out.extend(align_records(&self.align_report, seed));
        out.extend(eval_records(&self.eval, seed));
        out
    }

    pub fn report_text(&self) -> String {
        render_report(
            &self.config,
            &self.image_report,
            &self.text_report,
            &self.align_report,
            &self.ablation,
        )
    }
}

pub fn run_full(cfg: &RunConfig) -> Result<FullRun> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let teacher = make_teacher(cfg, &data.world)?;
    let (student_image, image_report) =
        distill_image(cfg, &teacher, &data, init_image_student(cfg)?)?;
    let (student_text, text_report) = distill_text(
        cfg,
        &teacher,
        &data,
        init_text_student(cfg, data.world.vocab_size())?,
    )?;
    let (aligned_text, align_report) = align(cfg, &data, &student_image, &student_text)?;
    let eval = evaluate_both(cfg, "full", &student_image, &aligned_text, &data.benchmark)?;
    let ablation = ablation_report(
        &student_image,
        &student_text,
        &aligned_text,
        &data.benchmark,
    )?;
    Ok(FullRun {
        config: cfg.clone(),
        data,
        teacher,
        student_image,
        student_text,
        aligned_text,
        image_report,
        text_report,
        align_report,
        eval,
        ablation,
    })
}

pub fn distill_records(report: &DistillReport, seed: u64) -> Vec<Record> {
    let stage = report.target.stage_tag();
    let steps_per_epoch = report.steps / report.epoch_train_loss.len().max(1);
    let mut out =
        vec![Record::new(stage, 0, seed, 0).with("heldout_loss", report.initial_heldout_loss)];
    for (e, (train, held)) in report
        .epoch_train_loss
        .iter()
        .zip(&report.epoch_heldout_loss)
        .enumerate()
    {
        let wall = if e + 1 == report.epoch_train_loss.len() {
            report.wall_ms
        } else {
            0
        };
        out.push(
            Record::new(stage, (e + 1) * steps_per_epoch, seed, wall)
                .with("epoch", e + 1)
                .with("train_loss", *train)
                .with("heldout_loss", *held),
        );
    }
    out
}

pub fn align_records(report: &AlignReport, seed: u64) -> Vec<Record> {
    let mut out =
        vec![Record::new("align", 0, seed, 0).with("reference_loss", report.initial_loss)];
    for (i, l) in report.step_loss.iter().enumerate() {
        out.push(Record::new("align", i + 1, seed, 0).with("loss", *l));
    }
    let per_pass = report.step_loss.len() / report.pass_loss.len().max(1);
    for (p, l) in report.pass_loss.iter().enumerate() {
        out.push(
            Record::new("align", (p + 1) * per_pass, seed, 0)
                .with("pass", p + 1)
                .with("reference_loss", *l),
        );
    }
    out.push(
        Record::new("align", report.step_loss.len(), seed, report.wall_ms).with(
            "image_tower_unchanged",
            report.image_tower_unchanged().to_string(),
        ),
    );
    out
}

pub fn eval_records(reports: &[EvalReport], seed: u64) -> Vec<Record> {
    reports
        .iter()
        .map(|r| {
            Record::new("eval", 0, seed, 0)
                .with("variant", r.variant.clone())
                .with("language", r.language.tag())
                .with("accuracy", r.accuracy)
                .with("correct", r.correct)
                .with("total", r.total)
        })
        .collect()
}

/// Plain-text summary; contains no timings so reruns compare equal.
pub fn render_report(
    cfg: &RunConfig,
    image: &DistillReport,
    text: &DistillReport,
    align: &AlignReport,
    ablation: &AblationReport,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}  seed {}", cfg.hash(), cfg.seed);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<14} {:>14} {:>14} {:>8}",
        "stage", "initial", "final", "ratio"
    );
    for r in [image, text] {
        let _ = writeln!(
            out,
            "{:<14} {:>14.6e} {:>14.6e} {:>8.4}",
            r.target.stage_tag(),
            r.initial_heldout_loss,
            r.final_heldout_loss(),
            r.final_heldout_loss() / r.initial_heldout_loss
        );
    }
    let _ = writeln!(
        out,
        "{:<14} {:>14.6e} {:>14.6e} {:>8.4}",
        "align",
        align.initial_loss,
        align.final_loss(),
        align.final_loss() / align.initial_loss
    );
    let _ = writeln!(
        out,
        "image tower unchanged by alignment: {}",
        align.image_tower_unchanged()
    );
    let _ = writeln!(out);
    out.push_str(&ablation.table());
    out
}

// ---- artifact (de)serialization ----

fn meta(cfg: &RunConfig, stage: &str, extra: serde_json::Value) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: cfg.hash(),
        stage: stage.to_string(),
        seed: cfg.seed,
        extra,
    }
}

fn index_tensor(values: &[usize]) -> Result<Tensor> {
    Tensor::new(&[values.len().max(1)], {
        let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        if v.is_empty() {
            v.push(0.0);
        }
        v
    })
}

fn ragged(seqs: impl Iterator<Item = Vec<usize>>) -> Result<(Tensor, Tensor)> {
    let mut flat = Vec::new();
    let mut offsets = vec![0usize];
    for s in seqs {
        flat.extend(s);
        offsets.push(flat.len());
    }
    Ok((index_tensor(&flat)?, index_tensor(&offsets)?))
}

fn indices(t: &Tensor, name: &str) -> Result<Vec<usize>> {
    t.values()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
                Ok(x as usize)
            } else {
                Err(Error::Checkpoint(format!("{name}: {x} is not an index")))
            }
        })
        .collect()
}

fn unragged(ck: &Checkpoint, prefix: &str) -> Result<Vec<Vec<usize>>> {
    let flat = indices(ck.tensors.get(&format!("{prefix}.tokens"))?, prefix)?;
    let offsets = indices(ck.tensors.get(&format!("{prefix}.offsets"))?, prefix)?;
    offsets
        .windows(2)
        .map(|w| {
            flat.get(w[0]..w[1])
                .map(<[usize]>::to_vec)
                .ok_or_else(|| Error::Checkpoint(format!("{prefix}: offsets out of range")))
        })
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

#[derive(Serialize, Deserialize)]
struct DataExtra {
    concepts: usize,
    image_dim: usize,
    world_seed: u64,
    pairs: usize,
    benchmark_name: String,
    benchmark_sigma: f64,
}

/// The world is stored by its generation inputs plus its prototypes; on
/// load it is regenerated and checked against the stored prototypes.
pub fn data_to_checkpoint(
    cfg: &RunConfig,
    data: &DataBundle,
) -> Result<(ParamSet, CheckpointMeta)> {
    let mut p = ParamSet::new();
    p.insert("world.prototypes", data.world.prototypes.clone())?;
    p.insert(
        "pairs.images",
        rows_tensor(
            &data
                .pairs
                .iter()
                .map(|x| x.image.clone())
                .collect::<Vec<_>>(),
        )?,
    )?;
    p.insert(
        "pairs.concepts",
        index_tensor(&data.pairs.iter().map(|x| x.concept).collect::<Vec<_>>())?,
    )?;
    for lang in Language::ALL {
        let (tokens, offsets) = ragged(data.pairs.iter().map(|x| x.tokens(lang).to_vec()))?;
        p.insert(format!("pairs.{}.tokens", lang.tag()), tokens)?;
        p.insert(format!("pairs.{}.offsets", lang.tag()), offsets)?;
    }
    p.insert("benchmark.images", rows_tensor(&data.benchmark.images)?)?;
    p.insert(
        "benchmark.concepts",
        index_tensor(&data.benchmark.concepts)?,
    )?;
    let extra = DataExtra {
        concepts: data.world.concepts,
        image_dim: data.world.image_dim,
        world_seed: data.world.seed,
        pairs: data.pairs.len(),
        benchmark_name: data.benchmark.name.clone(),
        benchmark_sigma: data.benchmark.noise_sigma,
    };
    Ok((p, meta(cfg, "gen-data", serde_json::to_value(extra)?)))
}

pub fn data_from_checkpoint(ck: &Checkpoint) -> Result<DataBundle> {
    let extra: DataExtra = serde_json::from_value(ck.meta.extra.clone())
        .map_err(|e| Error::Checkpoint(format!("data metadata: {e}")))?;
    let world = generate_world(extra.concepts, extra.image_dim, extra.world_seed)?;
    if &world.prototypes != ck.tensors.get("world.prototypes")? {
        return Err(Error::Checkpoint(
            "stored prototypes do not match the regenerated world".into(),
        ));
    }
    let images = ck.tensors.get("pairs.images")?;
    let concepts = indices(ck.tensors.get("pairs.concepts")?, "pairs.concepts")?;
    let l1 = unragged(ck, &format!("pairs.{}", Language::L1.tag()))?;
    let l2 = unragged(ck, &format!("pairs.{}", Language::L2.tag()))?;
    if images.rows() != extra.pairs
        || concepts.len() != extra.pairs
        || l1.len() != extra.pairs
        || l2.len() != extra.pairs
    {
        return Err(Error::Checkpoint(
            "pair tensors disagree on the pair count".into(),
        ));
    }
    let pairs = (0..extra.pairs)
        .map(|i| ImageTextPair {
            image: images.row(i).to_vec(),
            tokens_l1: l1[i].clone(),
            tokens_l2: l2[i].clone(),
            concept: concepts[i],
        })
        .collect();

    let bimages = ck.tensors.get("benchmark.images")?;
    let bconcepts = indices(ck.tensors.get("benchmark.concepts")?, "benchmark.concepts")?;
    let template = Benchmark::generate(&world, world.concepts, extra.benchmark_sigma, 0)?;
    let benchmark = Benchmark {
        name: extra.benchmark_name,
        noise_sigma: extra.benchmark_sigma,
        images: (0..bimages.rows())
            .map(|i| bimages.row(i).to_vec())
            .collect(),
        concepts: bconcepts,
        prompts: template.prompts,
    };
    Ok(DataBundle {
        world,
        pairs,
        benchmark,
    })
}

pub fn image_tower_to_checkpoint(
    cfg: &RunConfig,
    stage: &str,
    tower: &ImageTower,
) -> Result<(ParamSet, CheckpointMeta)> {
    let extra = serde_json::json!({ "image_spec": tower.spec });
    Ok((tower.params.clone(), meta(cfg, stage, extra)))
}

pub fn text_tower_to_checkpoint(
    cfg: &RunConfig,
    stage: &str,
    tower: &TextTower,
) -> Result<(ParamSet, CheckpointMeta)> {
    let extra = serde_json::json!({ "text_spec": tower.spec });
    Ok((tower.params.clone(), meta(cfg, stage, extra)))
}

pub fn teacher_to_checkpoint(
    cfg: &RunConfig,
    teacher: &FrozenTeacher,
) -> Result<(ParamSet, CheckpointMeta)> {
    let mut p = ParamSet::new();
    for (name, t) in teacher
        .image()
        .params
        .iter()
        .chain(teacher.text().params.iter())
    {
        p.insert(format!("teacher.{name}"), t.clone())?;
    }
    let extra = serde_json::json!({
        "image_spec": teacher.image().spec,
        "text_spec": teacher.text().spec,
    });
    Ok((p, meta(cfg, "make-teacher", extra)))
}

fn spec_from<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .extra
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
}

fn strip(params: &ParamSet, prefix: &str) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, t.clone())?;
        }
    }
    Ok(out)
}

pub fn image_tower_from_checkpoint(ck: &Checkpoint) -> Result<ImageTower> {
    let spec: ImageEncoderSpec = spec_from(ck, "image_spec")?;
    let mut params = ck.tensors.clone();
    params.set_trainable("*", true)?;
    Ok(ImageTower { spec, params })
}

pub fn text_tower_from_checkpoint(ck: &Checkpoint) -> Result<TextTower> {
    let spec: TextEncoderSpec = spec_from(ck, "text_spec")?;
    let mut params = ck.tensors.clone();
    params.set_trainable("*", true)?;
    Ok(TextTower { spec, params })
}

pub fn teacher_from_checkpoint(ck: &Checkpoint) -> Result<FrozenTeacher> {
    let image = ImageTower {
        spec: spec_from(ck, "image_spec")?,
        params: strip(&ck.tensors, "teacher.")?.subset("image."),
    };
    let text = TextTower {
        spec: spec_from(ck, "text_spec")?,
        params: strip(&ck.tensors, "teacher.")?.subset("text."),
    };
    Ok(FrozenTeacher::from_towers(image, text))
}

pub fn save_pair(path: &Path, (params, meta): (ParamSet, CheckpointMeta)) -> Result<()> {
    checkpoint::save(path, &params, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            concepts: 4,
            image_dim: 8,
            positions: 2,
            train_pairs: 40,
            eval_images: 8,
            teacher_width: 8,
            student_channels: 4,
            student_image_hidden: 6,
            student_text_embed: 4,
            student_text_hidden: 4,
            student_text_width: 4,
            image_epochs: 1,
            text_epochs: 1,
            align_passes: 1,
            align_batch_size: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn data_round_trips_through_a_checkpoint() {
        let cfg = tiny();
        let data = generate_data(&cfg).unwrap();
        let (p, m) = data_to_checkpoint(&cfg, &data).unwrap();
        let ck = checkpoint::decode(&checkpoint::encode(&p, &m).unwrap()).unwrap();
        assert_eq!(data_from_checkpoint(&ck).unwrap(), data);
    }

    #[test]
    fn towers_round_trip_through_checkpoints() {
        let cfg = tiny();
        let data = generate_data(&cfg).unwrap();
        let teacher = make_teacher(&cfg, &data.world).unwrap();
        let (p, m) = teacher_to_checkpoint(&cfg, &teacher).unwrap();
        let ck = checkpoint::decode(&checkpoint::encode(&p, &m).unwrap()).unwrap();
        assert_eq!(teacher_from_checkpoint(&ck).unwrap(), teacher);

        let img = init_image_student(&cfg).unwrap();
        let (p, m) = image_tower_to_checkpoint(&cfg, "init", &img).unwrap();
        let ck = checkpoint::decode(&checkpoint::encode(&p, &m).unwrap()).unwrap();
        assert_eq!(image_tower_from_checkpoint(&ck).unwrap(), img);
    }

    #[test]
    fn tiny_run_completes_and_repeats() {
        let a = run_full(&tiny()).unwrap();
        let b = run_full(&tiny()).unwrap();
        assert_eq!(a.report_text(), b.report_text());
        assert_eq!(a.aligned_text, b.aligned_text);
        assert!(a.align_report.image_tower_unchanged());
        for r in a.records() {
            r.to_line().unwrap();
        }
    }
}

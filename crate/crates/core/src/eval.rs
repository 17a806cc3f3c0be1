//! Zero-shot classification on the synthetic benchmark: prompt-ensembled
//! class embeddings, cosine argmax and the before/after-alignment
//! ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{hex, ImageTower, TextTower};
use crate::seed;
use crate::synth::{class_caption, render_image, Language, WorldSpec};
use crate::tensor::Tensor;

/// Labeled evaluation images plus per-language class prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub noise_sigma: f64,
    pub images: Vec<Vec<f64>>,
    pub concepts: Vec<usize>,
    /// `prompts[lang][class]` lists one token sequence per template.
    pub prompts: [Vec<Vec<Vec<usize>>>; 2],
}

impl Benchmark {
    /// `count` images cycling through the concepts so every class is
    /// represented, rendered on a seed stream disjoint from training.
    pub fn generate(world: &WorldSpec, count: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if count < world.concepts {
            return Err(Error::InvalidArgument(format!(
                "benchmark of {count} images cannot cover {} concepts",
                world.concepts
            )));
        }
        let concepts: Vec<usize> = (0..count).map(|i| i % world.concepts).collect();
        let images = concepts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                render_image(
                    world,
                    c,
                    noise_sigma,
                    seed::derive_seed(seed, "benchmark", i as u64),
                )
            })
            .collect::<Result<_>>()?;
        let prompts = Language::ALL.map(|lang| {
            (0..world.concepts)
                .map(|c| {
                    world
                        .templates(lang)
                        .iter()
                        .map(|t| class_caption(world, c, lang, t).expect("valid concept"))
                        .collect()
                })
                .collect()
        });
        Ok(Self {
            name: format!("synthetic-sigma{noise_sigma}"),
            noise_sigma,
            images,
            concepts,
            prompts,
        })
    }

    pub fn classes(&self) -> usize {
        self.prompts[0].len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Content hash; two reports are comparable only if these agree.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.noise_sigma.to_le_bytes());
        for (img, c) in self.images.iter().zip(&self.concepts) {
            h.update((*c as u64).to_le_bytes());
            img.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        for lang in &self.prompts {
            for class in lang {
                for seq in class {
                    h.update((seq.len() as u64).to_le_bytes());
                    seq.iter().for_each(|t| h.update((*t as u64).to_le_bytes()));
                }
            }
        }
        hex(&h.finalize())
    }

    /// Same benchmark with its images reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            concepts: order.iter().map(|&i| self.concepts[i]).collect(),
            ..self.clone()
        }
    }
}

/// Per class: normalize each templated caption embedding, average over
/// templates, renormalize.
pub fn class_embeddings(text: &TextTower, prompts: &[Vec<Vec<usize>>]) -> Result<Tensor> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for (c, templates) in prompts.iter().enumerate() {
        if templates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no templates"
            )));
        }
        let emb = text.embed(templates, true)?;
        let mut mean = vec![0.0; emb.cols()];
        for i in 0..emb.rows() {
            mean.iter_mut().zip(emb.row(i)).for_each(|(m, x)| *m += x);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::Degenerate {
                op: "class_embeddings",
                detail: format!("template embeddings of class {c} cancel out"),
            });
        }
        rows.push(mean.iter().map(|x| x / norm).collect());
    }
    Tensor::from_rows(&rows)
}

/// Index of the class row with the largest dot product; ties go to the
/// lowest index.
pub fn classify(embedding: &[f64], classes: &Tensor) -> Result<usize> {
    if classes.numel() == 0 || classes.rows() == 0 {
        return Err(Error::InvalidArgument("no classes to choose from".into()));
    }
    if classes.cols() != embedding.len() {
        return Err(Error::shape(
            "classify",
            format!(
                "embedding width {} vs class width {}",
                embedding.len(),
                classes.cols()
            ),
        ));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..classes.rows() {
        let score: f64 = classes
            .row(k)
            .iter()
            .zip(embedding)
            .map(|(a, b)| a * b)
            .sum();
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub benchmark: String,
    pub benchmark_fingerprint: String,
    pub language: Language,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Binomial standard error of an accuracy around `p` on this split.
    pub fn standard_error(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.total as f64).sqrt()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<4} {:>8} {:>6}/{:<6}",
            self.variant,
            self.language,
            format!("{:.4}", self.accuracy),
            self.correct,
            self.total
        );
        out
    }
}

const EVAL_CHUNK: usize = 256;

fn confusion_counts(
    image: &ImageTower,
    classes: &Tensor,
    images: &[Vec<f64>],
    concepts: &[usize],
) -> Result<Vec<Vec<u64>>> {
    let k = classes.rows();
    let mut confusion = vec![vec![0u64; k]; k];
    for (chunk, labels) in images.chunks(EVAL_CHUNK).zip(concepts.chunks(EVAL_CHUNK)) {
        let emb = image.embed(chunk, true)?;
        for (i, &label) in labels.iter().enumerate() {
            let pred = classify(emb.row(i), classes)?;
            confusion[label][pred] += 1;
        }
    }
    Ok(confusion)
}

fn report_from_confusion(
    variant: &str,
    bench: &Benchmark,
    language: Language,
    confusion: Vec<Vec<u64>>,
) -> EvalReport {
    let correct: u64 = (0..confusion.len()).map(|k| confusion[k][k]).sum();
    let total: u64 = confusion.iter().flatten().sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    EvalReport {
        variant: variant.to_string(),
        benchmark: bench.name.clone(),
        benchmark_fingerprint: bench.fingerprint(),
        language,
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_class_accuracy,
        confusion,
    }
}

fn prepare(
    image: &ImageTower,
    text: &TextTower,
    bench: &Benchmark,
    language: Language,
) -> Result<Tensor> {
    if image.out_width() != text.out_width() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "image tower width {} vs text tower width {}",
                image.out_width(),
                text.out_width()
            ),
        ));
    }
    if bench.is_empty() {
        return Err(Error::InvalidArgument("benchmark split is empty".into()));
    }
    class_embeddings(text, &bench.prompts[language.index()])
}

/// Top-1 zero-shot accuracy of the towers on `bench` in `language`.
pub fn evaluate(
    variant: &str,
    image: &ImageTower,
    text: &TextTower,
    bench: &Benchmark,
    language: Language,
) -> Result<EvalReport> {
    let classes = prepare(image, text, bench, language)?;
    let confusion = confusion_counts(image, &classes, &bench.images, &bench.concepts)?;
    Ok(report_from_confusion(variant, bench, language, confusion))
}

/// [`evaluate`] with the split divided across `shards` threads; per-shard
/// integer counts are summed, so the result equals the single-threaded one.
pub fn evaluate_sharded(
    variant: &str,
    image: &ImageTower,
    text: &TextTower,
    bench: &Benchmark,
    language: Language,
    shards: usize,
) -> Result<EvalReport> {
    let classes = prepare(image, text, bench, language)?;
    let shards = shards.clamp(1, bench.len());
    let per = bench.len().div_ceil(shards);
    let partials: Vec<Result<Vec<Vec<u64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = bench
            .images
            .chunks(per)
            .zip(bench.concepts.chunks(per))
            .map(|(imgs, labels)| {
                let classes = &classes;
                s.spawn(move || confusion_counts(image, classes, imgs, labels))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation shard panicked"))
            .collect()
    });
    let k = classes.rows();
    let mut confusion = vec![vec![0u64; k]; k];
    for part in partials {
        for (row, prow) in confusion.iter_mut().zip(part?) {
            row.iter_mut().zip(prow).for_each(|(a, b)| *a += b);
        }
    }
    Ok(report_from_confusion(variant, bench, language, confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub benchmark: String,
    pub language: Language,
    pub stage1_only: f64,
    pub full: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub stage1_only: Vec<EvalReport>,
    pub full: Vec<EvalReport>,
}

impl AblationReport {
    /// Pairs reports by language; both sides must come from the same
    /// benchmark.
    pub fn from_reports(stage1_only: Vec<EvalReport>, full: Vec<EvalReport>) -> Result<Self> {
        if stage1_only.len() != full.len() {
            return Err(Error::InvalidArgument(
                "ablation sides have different report counts".into(),
            ));
        }
        let mut rows = Vec::with_capacity(full.len());
        for (a, b) in stage1_only.iter().zip(&full) {
            if a.benchmark_fingerprint != b.benchmark_fingerprint || a.language != b.language {
                return Err(Error::InvalidArgument(format!(
                    "mismatched benchmarks: {} ({}) vs {} ({})",
                    a.benchmark, a.language, b.benchmark, b.language
                )));
            }
            rows.push(AblationRow {
                benchmark: a.benchmark.clone(),
                language: a.language,
                stage1_only: a.accuracy,
                full: b.accuracy,
                delta: b.accuracy - a.accuracy,
            });
        }
        Ok(Self {
            rows,
            stage1_only,
            full,
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:<4} {:>11} {:>8} {:>8}",
            "benchmark", "lang", "stage1-only", "full", "delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:<4} {:>11.4} {:>8.4} {:>+8.4}",
                r.benchmark, r.language, r.stage1_only, r.full, r.delta
            );
        }
        out
    }
}

/// Evaluates the stage-1 and aligned text towers against one shared
/// image tower in both languages.
pub fn ablation_report(
    image: &ImageTower,
    stage1_text: &TextTower,
    full_text: &TextTower,
    bench: &Benchmark,
) -> Result<AblationReport> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for lang in Language::ALL {
        before.push(evaluate("stage1-only", image, stage1_text, bench, lang)?);
        after.push(evaluate("full", image, full_text, bench, lang)?);
    }
    AblationReport::from_reports(before, after)
}

//! Stage 2: locked-image contrastive alignment.
//!
//! The distilled image tower (encoder and adapter) is frozen; the text
//! tower (encoder and projection) is tuned with the symmetric InfoNCE
//! objective over in-batch negatives.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ImageTower, ParamSet, TextTower};
use crate::seed;
use crate::synth::{self, ImageTextPair, Language};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

/// Maximum deviation of a row norm from 1 accepted by the losses.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub passes: usize,
    pub seed: u64,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.passes == 0 {
            return Err(Error::InvalidArgument(
                "batch size and passes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// N paired, unit-norm image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub images: Tensor,
    pub texts: Tensor,
    pub languages: Vec<Language>,
    pub concepts: Vec<usize>,
}

impl AlignmentBatch {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape() != self.texts.shape() {
            return Err(Error::shape(
                "alignment_batch",
                format!("{:?} vs {:?}", self.images.shape(), self.texts.shape()),
            ));
        }
        let n = self.len();
        if self.languages.len() != n || self.concepts.len() != n {
            return Err(Error::InvalidArgument(
                "alignment batch tags do not match rows".into(),
            ));
        }
        let mut seen = self.concepts.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::InvalidArgument(
                "alignment batch repeats a concept".into(),
            ));
        }
        check_unit_rows("images", &self.images)?;
        check_unit_rows("texts", &self.texts)
    }

    fn evaluate(&self, tau: f64, f: fn(&mut Graph, Var, Var, f64) -> Result<Var>) -> Result<f64> {
        self.validate()?;
        let mut g = Graph::new();
        let i = g.constant(self.images.clone());
        let t = g.constant(self.texts.clone());
        let loss = f(&mut g, i, t, tau)?;
        Ok(g.value(loss).item())
    }

    pub fn i2t(&self, tau: f64) -> Result<f64> {
        self.evaluate(tau, infonce_i2t)
    }

    pub fn t2i(&self, tau: f64) -> Result<f64> {
        self.evaluate(tau, infonce_t2i)
    }

    pub fn total(&self, tau: f64) -> Result<f64> {
        self.evaluate(tau, contrastive_total)
    }
}

fn check_unit_rows(what: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Degenerate {
                op: "infonce",
                detail: format!("{what} row {i} has norm {norm}, expected 1"),
            });
        }
    }
    Ok(())
}

/// `-mean_i log softmax_j(sim[i, j])[i]` of a square similarity matrix.
fn diagonal_cross_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let log_probs = g.log_softmax_rows(logits)?;
    let diag = g.diagonal(log_probs)?;
    let mean = g.mean(diag)?;
    g.scale(mean, -1.0)
}

fn similarities(g: &mut Graph, rows: Var, cols: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let (a, b) = (g.value(rows), g.value(cols));
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(
            "infonce",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    check_unit_rows("images", a)?;
    check_unit_rows("texts", b)?;
    let bt = g.transpose(cols)?;
    let sim = g.matmul(rows, bt)?;
    g.scale(sim, 1.0 / tau)
}

/// Image-to-text InfoNCE over unit-norm rows: each image against all
/// texts of the batch.
pub fn infonce_i2t(g: &mut Graph, images: Var, texts: Var, tau: f64) -> Result<Var> {
    let logits = similarities(g, images, texts, tau)?;
    diagonal_cross_entropy(g, logits)
}

/// Text-to-image InfoNCE: each text against all images of the batch.
pub fn infonce_t2i(g: &mut Graph, images: Var, texts: Var, tau: f64) -> Result<Var> {
    let logits = similarities(g, texts, images, tau)?;
    diagonal_cross_entropy(g, logits)
}

/// `(i2t + t2i) / 2`.
pub fn contrastive_total(g: &mut Graph, images: Var, texts: Var, tau: f64) -> Result<Var> {
    let logits = similarities(g, images, texts, tau)?;
    let i2t = diagonal_cross_entropy(g, logits)?;
    let logits_t = g.transpose(logits)?;
    let t2i = diagonal_cross_entropy(g, logits_t)?;
    let sum = g.add(i2t, t2i)?;
    g.scale(sum, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Mean loss over the reference batching before any update.
    pub initial_loss: f64,
    /// Same reference batching, evaluated after each pass.
    pub pass_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub image_fingerprint_before: String,
    pub image_fingerprint_after: String,
    pub wall_ms: u64,
}

impl AlignReport {
    pub fn final_loss(&self) -> f64 {
        *self.pass_loss.last().unwrap_or(&self.initial_loss)
    }

    pub fn image_tower_unchanged(&self) -> bool {
        self.image_fingerprint_before == self.image_fingerprint_after
    }
}

const IMAGE_PREFIXES: [&str; 2] = ["image.*", "adapter.*"];

/// Row `r` of batch `b` uses L1 when `r + b` is even.
pub fn row_language(batch_index: usize, row: usize) -> Language {
    if (batch_index + row).is_multiple_of(2) {
        Language::L1
    } else {
        Language::L2
    }
}

struct Stage2Model<'a> {
    image: &'a ImageTower,
    text: &'a TextTower,
}

impl Stage2Model<'_> {
    /// Contrastive loss of one batch, traced through the shared
    /// parameter set (only tensors flagged trainable become leaves).
    #[allow(clippy::too_many_arguments)]
    fn loss(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        pairs: &[ImageTextPair],
        batch: &[usize],
        batch_index: usize,
        tau: f64,
        trace: bool,
    ) -> Result<(Var, crate::nn::Binding)> {
        let b = if trace {
            params.bind(g)
        } else {
            params.bind_frozen(g)
        };
        let images: Vec<Vec<f64>> = batch.iter().map(|&i| pairs[i].image.clone()).collect();
        let x = g.constant(self.image.batch_tensor(&images)?);
        let f = self.image.pooled(g, &b, x)?;
        let f = g.l2_normalize_rows(f)?;
        let seqs: Vec<Vec<usize>> = batch
            .iter()
            .enumerate()
            .map(|(r, &i)| pairs[i].tokens(row_language(batch_index, r)).to_vec())
            .collect();
        let w = self.text.forward(g, &b, &seqs)?;
        let w = g.l2_normalize_rows(w)?;
        Ok((contrastive_total(g, f, w, tau)?, b))
    }
}

fn reference_loss(
    model: &Stage2Model<'_>,
    params: &ParamSet,
    pairs: &[ImageTextPair],
    batches: &[Vec<usize>],
    tau: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (bi, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let (loss, _) = model.loss(&mut g, params, pairs, batch, bi, tau, false)?;
        total += g.value(loss).item() * batch.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Tunes the text tower against the frozen image tower. Returns the
/// updated text tower; the image tower is taken by reference and its
/// tensors are also frozen inside the shared optimizer parameter set.
pub fn run_stage2(
    config: &AlignConfig,
    image: &ImageTower,
    text: &TextTower,
    pairs: &[ImageTextPair],
) -> Result<(TextTower, AlignReport)> {
    config.validate()?;
    if image.out_width() != text.out_width() {
        return Err(Error::shape(
            "run_stage2",
            format!(
                "image tower width {} vs text tower width {}",
                image.out_width(),
                text.out_width()
            ),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment dataset is empty".into()));
    }
    let start = Instant::now();

    let mut params = image.params.clone();
    params.merge(text.params.clone())?;
    for pattern in IMAGE_PREFIXES {
        params.set_trainable(pattern, false)?;
    }
    params.set_trainable("text.*", true)?;
    if text.has_projection() {
        params.set_trainable("proj.*", true)?;
    }
    let fingerprint = |p: &ParamSet| {
        IMAGE_PREFIXES
            .iter()
            .map(|pat| p.fingerprint(pat))
            .collect::<String>()
    };
    let image_fingerprint_before = fingerprint(&params);

    let model = Stage2Model { image, text };

    let concepts: Vec<usize> = pairs.iter().map(|p| p.concept).collect();
    let reference = synth::unique_concept_batches(
        &concepts,
        config.batch_size,
        seed::derive_seed(config.seed, "align.reference", 0),
        true,
    )?;
    let initial_loss = reference_loss(&model, &params, pairs, &reference, config.tau)?;

    let mut adam = AdamState::new(AdamConfig::new(config.lr));
    let mut step_loss = Vec::new();
    let mut pass_loss = Vec::with_capacity(config.passes);
    for pass in 0..config.passes {
        let epoch_seed = seed::derive_seed(config.seed, "align.pass", pass as u64);
        let batches =
            synth::unique_concept_batches(&concepts, config.batch_size, epoch_seed, true)?;
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let (loss, b) = model.loss(&mut g, &params, pairs, batch, bi, config.tau, true)?;
            let grads = g.backward(loss)?;
            params.accumulate_grads(&b, &grads);
            adam.step(&mut params).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    stage: "align",
                    step: step_loss.len(),
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            step_loss.push(g.value(loss).item());
        }
        pass_loss.push(reference_loss(
            &model, &params, pairs, &reference, config.tau,
        )?);
    }

    let image_fingerprint_after = fingerprint(&params);
    let mut tuned = text.clone();
    tuned.params = params.subset("text.");
    if text.has_projection() {
        tuned.params.merge(params.subset("proj."))?;
    }
    Ok((
        tuned,
        AlignReport {
            initial_loss,
            pass_loss,
            step_loss,
            image_fingerprint_before,
            image_fingerprint_after,
            wall_ms: start.elapsed().as_millis() as u64,
        },
    ))
}

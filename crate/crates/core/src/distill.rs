//! Stage 1: feature distillation of each student tower onto the frozen
//! teacher with a mean Smooth-L1 objective.
//!
//! The image student passes through the channel adapter before being
//! compared with the teacher feature map; both see the same augmented
//! view. The text student passes through the projection head and is
//! trained on captions from both languages.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::nn::{ImageTower, TextTower};
use crate::seed;
use crate::synth::{self, AugmentParams, FrozenTeacher, ImageTextPair, IDENTITY_AUG_SEED};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillTarget {
    Image,
    Text,
}

impl DistillTarget {
    pub fn stage_tag(self) -> &'static str {
        match self {
            DistillTarget::Image => "distill-image",
            DistillTarget::Text => "distill-text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub target: DistillTarget,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub heldout_fraction: f64,
    pub augment: AugmentParams,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub target: DistillTarget,
    pub initial_heldout_loss: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_heldout_loss: Vec<f64>,
    pub steps: usize,
    /// Excluded from any reproducibility comparison.
    pub wall_ms: u64,
}

impl DistillReport {
    pub fn final_heldout_loss(&self) -> f64 {
        *self
            .epoch_heldout_loss
            .last()
            .unwrap_or(&self.initial_heldout_loss)
    }
}

pub enum Student {
    Image(ImageTower),
    Text(TextTower),
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), width], rows.concat())
}

/// Image distillation loss with a caller-supplied view function. Each
/// image is augmented exactly once and the resulting view is fed to both
/// the student and the teacher.
#[allow(clippy::too_many_arguments)]
pub fn image_distill_loss_with<F>(
    g: &mut Graph,
    teacher: &FrozenTeacher,
    student: &ImageTower,
    binding: &Binding,
    images: &[&[f64]],
    aug_seeds: &[u64],
    beta: f64,
    mut view: F,
) -> Result<Var>
where
    F: FnMut(&[f64], u64) -> Vec<f64>,
{
    if images.len() != aug_seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} augmentation seeds",
            images.len(),
            aug_seeds.len()
        )));
    }
    if !student.has_adapter() || student.out_width() != teacher.width() {
        return Err(Error::shape(
            "image_distill_loss",
            format!(
                "student emits {} channels, teacher {}",
                student.out_width(),
                teacher.width()
            ),
        ));
    }
    if student.spec.positions != teacher.image().spec.positions {
        return Err(Error::shape(
            "image_distill_loss",
            "student and teacher position counts differ",
        ));
    }
    let views: Vec<Vec<f64>> = images
        .iter()
        .zip(aug_seeds)
        .map(|(img, &s)| view(img, s))
        .collect();
    let batch = stack(&views)?;

    let teacher_binding = teacher.image().params.bind_frozen(g);
    let x_t = g.constant(batch.clone());
    let target = teacher.image().feature_maps(g, &teacher_binding, x_t)?;

    let x_s = g.constant(batch);
    let pred = student.feature_maps(g, binding, x_s)?;
    g.smooth_l1(pred, target, beta)
}

/// `mean smooth_l1(g(student(view)), teacher(view))` with the standard
/// augmentation.
#[allow(clippy::too_many_arguments)]
pub fn image_distill_loss(
    g: &mut Graph,
    teacher: &FrozenTeacher,
    student: &ImageTower,
    binding: &Binding,
    images: &[&[f64]],
    aug_seeds: &[u64],
    beta: f64,
    augment: AugmentParams,
) -> Result<Var> {
    image_distill_loss_with(
        g,
        teacher,
        student,
        binding,
        images,
        aug_seeds,
        beta,
        |x, s| synth::augment(x, s, augment),
    )
}

/// `mean smooth_l1(L(student(T)), teacher(T))`.
pub fn text_distill_loss(
    g: &mut Graph,
    teacher: &FrozenTeacher,
    student: &TextTower,
    binding: &Binding,
    sequences: &[Vec<usize>],
    beta: f64,
) -> Result<Var> {
    if student.out_width() != teacher.text().out_width() {
        return Err(Error::shape(
            "text_distill_loss",
            format!(
                "student emits width {}, teacher {}",
                student.out_width(),
                teacher.text().out_width()
            ),
        ));
    }
    let teacher_binding = teacher.text().params.bind_frozen(g);
    let target = teacher.text().forward(g, &teacher_binding, sequences)?;
    let pred = student.forward(g, binding, sequences)?;
    g.smooth_l1(pred, target, beta)
}

/// Both captions of every pair, interleaved L1, L2, L1, L2, ...
pub fn interleaved_captions(pairs: &[&ImageTextPair]) -> Vec<Vec<usize>> {
    pairs
        .iter()
        .flat_map(|p| [p.tokens_l1.clone(), p.tokens_l2.clone()])
        .collect()
}

const EVAL_CHUNK: usize = 256;

fn loss_value(
    teacher: &FrozenTeacher,
    student: &Student,
    pairs: &[&ImageTextPair],
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = match student {
        Student::Image(tower) => {
            let b = tower.params.bind_frozen(&mut g);
            let images: Vec<&[f64]> = pairs.iter().map(|p| p.image.as_slice()).collect();
            let seeds = vec![IDENTITY_AUG_SEED; images.len()];
            image_distill_loss(
                &mut g,
                teacher,
                tower,
                &b,
                &images,
                &seeds,
                beta,
                AugmentParams::default(),
            )?
        }
        Student::Text(tower) => {
            let b = tower.params.bind_frozen(&mut g);
            text_distill_loss(
                &mut g,
                teacher,
                tower,
                &b,
                &interleaved_captions(pairs),
                beta,
            )?
        }
    };
    Ok(g.value(loss).item())
}

/// Mean loss over `pairs` without augmentation; chunks are weighted by
/// size so the result equals a single full-batch evaluation.
pub fn heldout_loss(
    teacher: &FrozenTeacher,
    student: &Student,
    pairs: &[&ImageTextPair],
    beta: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        total += loss_value(teacher, student, chunk, beta)? * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn diverged(target: DistillTarget, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Divergence {
            stage: target.stage_tag(),
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `student` on `pairs` against `teacher`. A seeded fraction of
/// the pairs is held out for the per-epoch loss.
pub fn run_stage1(
    config: &DistillConfig,
    teacher: &FrozenTeacher,
    pairs: &[ImageTextPair],
    student: Student,
) -> Result<(Student, DistillReport)> {
    config.validate()?;
    match (&student, config.target) {
        (Student::Image(_), DistillTarget::Image) | (Student::Text(_), DistillTarget::Text) => {}
        _ => {
            return Err(Error::InvalidArgument(
                "student tower does not match the distillation target".into(),
            ))
        }
    }
    let start = Instant::now();
    let (train_idx, held_idx) =
        synth::heldout_split(pairs.len(), config.heldout_fraction, config.seed)?;
    let held: Vec<&ImageTextPair> = held_idx.iter().map(|&i| &pairs[i]).collect();
    let train: Vec<&ImageTextPair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let eval_set = if held.is_empty() { &train } else { &held };

    let mut student = student;
    let initial_heldout_loss = heldout_loss(teacher, &student, eval_set, config.beta)?;
    let mut adam =
        AdamState::new(AdamConfig::new(config.lr).with_weight_decay(config.weight_decay));
    let mut report = DistillReport {
        target: config.target,
        initial_heldout_loss,
        epoch_train_loss: Vec::with_capacity(config.epochs),
        epoch_heldout_loss: Vec::with_capacity(config.epochs),
        steps: 0,
        wall_ms: 0,
    };
    let tag = config.target.stage_tag();

    for epoch in 0..config.epochs {
        let epoch_seed = seed::derive_seed(config.seed, tag, epoch as u64);
        let mut weighted = 0.0;
        for batch in synth::batches(train.len(), config.batch_size, epoch_seed, true)? {
            let step = report.steps;
            let mut g = Graph::new();
            let loss = match &mut student {
                Student::Image(tower) => {
                    let b = tower.params.bind(&mut g);
                    let images: Vec<&[f64]> =
                        batch.iter().map(|&i| train[i].image.as_slice()).collect();
                    let seeds: Vec<u64> = batch
                        .iter()
                        .map(|&i| synth::aug_seed_for(config.seed, epoch, train_idx[i]))
                        .collect();
                    let loss = image_distill_loss(
                        &mut g,
                        teacher,
                        tower,
                        &b,
                        &images,
                        &seeds,
                        config.beta,
                        config.augment,
                    )
                    .map_err(|e| diverged(config.target, step, e))?;
                    let grads = g.backward(loss)?;
                    tower.params.accumulate_grads(&b, &grads);
                    adam.step(&mut tower.params)
                        .map_err(|e| diverged(config.target, step, e))?;
                    g.value(loss).item()
                }
                Student::Text(tower) => {
                    let b = tower.params.bind(&mut g);
                    let chosen: Vec<&ImageTextPair> = batch.iter().map(|&i| train[i]).collect();
                    let seqs = interleaved_captions(&chosen);
                    let loss = text_distill_loss(&mut g, teacher, tower, &b, &seqs, config.beta)
                        .map_err(|e| diverged(config.target, step, e))?;
                    let grads = g.backward(loss)?;
                    tower.params.accumulate_grads(&b, &grads);
                    adam.step(&mut tower.params)
                        .map_err(|e| diverged(config.target, step, e))?;
                    g.value(loss).item()
                }
            };
            weighted += loss * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_train_loss.push(weighted / train.len() as f64);
        let held = heldout_loss(teacher, &student, eval_set, config.beta)?;
        report.epoch_heldout_loss.push(held);
    }
    report.wall_ms = start.elapsed().as_millis() as u64;
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_adapter, init_projection, Activation, ImageEncoderSpec, TextEncoderSpec};
    use crate::synth::{generate_world, make_frozen_teacher, Language, TeacherParams};
    use crate::tensor::{grad_check_params, smooth_l1_elem};
    use rand::Rng;

    fn small_setup() -> (crate::synth::WorldSpec, FrozenTeacher) {
        let world = generate_world(4, 8, 1).unwrap();
        let params = TeacherParams {
            width: 6,
            positions: 2,
            ..TeacherParams::default()
        };
        let teacher = make_frozen_teacher(&world, params, 2).unwrap();
        (world, teacher)
    }

    fn image_student(input: usize, positions: usize, channels: usize, out: usize) -> ImageTower {
        let spec = ImageEncoderSpec {
            input_dim: input,
            positions,
            channels,
            hidden: vec![5],
            activation: Activation::Tanh,
        };
        let mut params = spec.init(3).unwrap();
        params
            .merge(init_adapter(channels, out, 4).unwrap())
            .unwrap();
        ImageTower { spec, params }
    }

    fn text_student(vocab: usize, out: usize) -> TextTower {
        let spec = TextEncoderSpec {
            vocab,
            embed_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
        };
        let mut params = spec.init(5).unwrap();
        params.merge(init_projection(3, out, 6).unwrap()).unwrap();
        TextTower { spec, params }
    }

    #[test]
    fn copied_teacher_gives_zero_loss() {
        let (world, teacher) = small_setup();
        let mut params = teacher.image().params.clone();
        let c = teacher.width();
        let mut adapter = init_adapter(c, c, 0).unwrap();
        *adapter.get_mut(crate::nn::ADAPTER_WEIGHT).unwrap() = Tensor::identity(c);
        params.merge(adapter).unwrap();
        let student = ImageTower {
            spec: teacher.image().spec.clone(),
            params,
        };
        let imgs: Vec<Vec<f64>> = (0..4)
            .map(|k| world.prototype(k).unwrap().to_vec())
            .collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let b = student.params.bind(&mut g);
        let loss = image_distill_loss(
            &mut g,
            &teacher,
            &student,
            &b,
            &refs,
            &[5, 6, 7, 8],
            1.0,
            AugmentParams::default(),
        )
        .unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let mut tparams = teacher.text().params.clone();
        let w = teacher.text().out_width();
        let mut proj = init_projection(w, w, 0).unwrap();
        *proj.get_mut(crate::nn::PROJ_WEIGHT).unwrap() = Tensor::identity(w);
        tparams.merge(proj).unwrap();
        let tstudent = TextTower {
            spec: teacher.text().spec.clone(),
            params: tparams,
        };
        let seqs = world.all_captions(1, Language::L2).unwrap();
        let mut g = Graph::new();
        let b = tstudent.params.bind(&mut g);
        let loss = text_distill_loss(&mut g, &teacher, &tstudent, &b, &seqs, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn larger_beta_never_increases_residual_loss() {
        let mut rng = crate::seed::rng(12);
        for _ in 0..1000 {
            let d: f64 = rng.random_range(-5.0..5.0);
            let beta: f64 = rng.random_range(0.01..3.0);
            assert!(smooth_l1_elem(d, 2.0 * beta) <= smooth_l1_elem(d, beta) + 1e-15);
        }
    }

    #[test]
    fn shared_view_feeds_both_paths() {
        let (world, teacher) = small_setup();
        let student = image_student(8, 2, 3, 6);
        let imgs: Vec<Vec<f64>> = (0..3)
            .map(|k| world.prototype(k).unwrap().to_vec())
            .collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let seeds = [11, 12, 13];
        let mut views = Vec::new();
        let mut g = Graph::new();
        let b = student.params.bind(&mut g);
        let loss = image_distill_loss_with(
            &mut g,
            &teacher,
            &student,
            &b,
            &refs,
            &seeds,
            1.0,
            |x, s| {
                let v = synth::augment(x, s, AugmentParams::default());
                views.push(v.clone());
                v
            },
        )
        .unwrap();
        assert_eq!(views.len(), 3, "one view per image");

        // Recompute both paths by hand on the recorded views.
        let mut h = Graph::new();
        let hb = student.params.bind_frozen(&mut h);
        let tb = teacher.image().params.bind_frozen(&mut h);
        let x = h.constant(stack(&views).unwrap());
        let pred = student.feature_maps(&mut h, &hb, x).unwrap();
        let target = teacher.image().feature_maps(&mut h, &tb, x).unwrap();
        let manual = h.smooth_l1(pred, target, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), h.value(manual).item());
    }

    #[test]
    fn gradients_reach_student_only() {
        let (world, teacher) = small_setup();
        let student = image_student(8, 2, 3, 6);
        let img = world.prototype(0).unwrap().to_vec();
        let mut g = Graph::new();
        let b = student.params.bind(&mut g);
        let tb = teacher.image().params.bind(&mut g);
        let loss = image_distill_loss(
            &mut g,
            &teacher,
            &student,
            &b,
            &[&img],
            &[3],
            1.0,
            AugmentParams::default(),
        )
        .unwrap();
        let grads = g.backward(loss).unwrap();
        for name in student.params.names() {
            assert!(grads.get(b.get(&name).unwrap()).is_some(), "{name}");
        }
        for name in teacher.image().params.names() {
            assert!(grads.get(tb.get(&name).unwrap()).is_none(), "{name}");
        }
    }

    #[test]
    fn distill_losses_pass_grad_check() {
        let (world, teacher) = small_setup();
        let student = image_student(8, 2, 3, 6);
        let imgs: Vec<Vec<f64>> = (0..3)
            .map(|k| world.prototype(k).unwrap().to_vec())
            .collect();
        let err = grad_check_params(
            &student.params,
            |g, b| {
                let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
                image_distill_loss(
                    g,
                    &teacher,
                    &student,
                    b,
                    &refs,
                    &[4, 5, 6],
                    1.0,
                    AugmentParams::default(),
                )
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "image distill grad check {err}");

        let tstudent = text_student(world.vocab_size(), 6);
        let seqs: Vec<Vec<usize>> = [0, 1, 2]
            .iter()
            .flat_map(|&c| Language::ALL.map(|l| (c, l)))
            .map(|(c, l)| world.all_captions(c, l).unwrap()[0].clone())
            .collect();
        let err = grad_check_params(
            &tstudent.params,
            |g, b| text_distill_loss(g, &teacher, &tstudent, b, &seqs, 1.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "text distill grad check {err}");
    }

    #[test]
    fn loss_ignores_batch_order() {
        let (world, teacher) = small_setup();
        let student = image_student(8, 2, 3, 6);
        let imgs: Vec<Vec<f64>> = (0..4)
            .map(|k| world.prototype(k).unwrap().to_vec())
            .collect();
        let eval = |order: &[usize]| {
            let refs: Vec<&[f64]> = order.iter().map(|&i| imgs[i].as_slice()).collect();
            let seeds: Vec<u64> = order.iter().map(|&i| 100 + i as u64).collect();
            let mut g = Graph::new();
            let b = student.params.bind(&mut g);
            let l = image_distill_loss(
                &mut g,
                &teacher,
                &student,
                &b,
                &refs,
                &seeds,
                1.0,
                AugmentParams::default(),
            )
            .unwrap();
            g.value(l).item()
        };
        assert!((eval(&[0, 1, 2, 3]) - eval(&[2, 0, 3, 1])).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (world, teacher) = small_setup();
        let student = image_student(8, 2, 3, 5);
        let img = world.prototype(0).unwrap().to_vec();
        let mut g = Graph::new();
        let b = student.params.bind(&mut g);
        assert!(image_distill_loss(
            &mut g,
            &teacher,
            &student,
            &b,
            &[&img],
            &[1],
            1.0,
            AugmentParams::default()
        )
        .is_err());
        let tstudent = text_student(world.vocab_size(), 4);
        let mut g = Graph::new();
        let b = tstudent.params.bind(&mut g);
        assert!(text_distill_loss(&mut g, &teacher, &tstudent, &b, &[vec![0]], 1.0).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let (world, teacher) = small_setup();
        let pairs = world.generate_pairs(10, 0.1, 0).unwrap();
        let config = DistillConfig {
            target: DistillTarget::Image,
            beta: 1.0,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 0,
            batch_size: 4,
            seed: 0,
            heldout_fraction: 0.1,
            augment: AugmentParams::default(),
        };
        let s = Student::Image(image_student(8, 2, 3, 6));
        assert!(run_stage1(&config, &teacher, &pairs, s).is_err());
    }
}

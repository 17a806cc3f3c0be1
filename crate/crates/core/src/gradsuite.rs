//! Finite-difference gradient checks for every training loss, at seeded
//! random points on tiny shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::align::{contrastive_total, infonce_i2t, infonce_t2i};
use crate::distill::{image_distill_loss, text_distill_loss};
use crate::error::Result;
use crate::nn::{
    init_adapter, init_projection, Activation, ImageEncoderSpec, ImageTower, TextEncoderSpec,
    TextTower,
};
use crate::seed;
use crate::synth::{
    self, generate_world, make_frozen_teacher, AugmentParams, Language, TeacherParams,
};
use crate::tensor::{grad_check, grad_check_params, Tensor};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

pub const LOSSES: [&str; 6] = [
    "smooth_l1",
    "infonce_i2t",
    "infonce_t2i",
    "contrastive_total",
    "image_distill",
    "text_distill",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub loss: &'static str,
    pub points: usize,
    pub max_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Tensor> {
    let raw = uniform(rng, &[n, d], 1.0)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = raw.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Residuals kept at least 0.1 away from the junction at `beta`, so the
/// central difference never straddles the kink.
fn smooth_l1_point(rng: &mut ChaCha8Rng, beta: f64) -> Result<f64> {
    let target = uniform(rng, &[3, 4], 1.0)?;
    let pred: Vec<f64> = target
        .values()
        .iter()
        .map(|&t| {
            let mag = if rng.random::<bool>() {
                rng.random_range(0.1 * beta..0.9 * beta)
            } else {
                rng.random_range(1.1 * beta..3.0 * beta)
            };
            t + if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let pred = Tensor::new(&[3, 4], pred)?;
    grad_check(
        |g, x| {
            let t = g.constant(target.clone());
            g.smooth_l1(x, t, beta)
        },
        &pred,
        EPS,
    )
}

fn infonce_point(rng: &mut ChaCha8Rng, which: usize) -> Result<f64> {
    let n = rng.random_range(2..6);
    let images = unit_rows(rng, n, 6)?;
    let scale = rng.random_range(0.5..2.0);
    let texts = uniform(rng, &[n, 6], scale)?;
    let tau = rng.random_range(0.5..2.0);
    grad_check(
        |g, x| {
            let i = g.constant(images.clone());
            let t = g.l2_normalize_rows(x)?;
            match which {
                0 => infonce_i2t(g, i, t, tau),
                1 => infonce_t2i(g, i, t, tau),
                _ => contrastive_total(g, i, t, tau),
            }
        },
        &texts,
        EPS,
    )
}

fn distill_point(rng: &mut ChaCha8Rng, text: bool) -> Result<f64> {
    let world = generate_world(4, 8, rng.random())?;
    let teacher = make_frozen_teacher(
        &world,
        TeacherParams {
            width: 6,
            positions: 2,
            // Unit output scale keeps the loss near 0.1, so rounding in the
            // central difference stays well under the tolerance.
            output_scale: 1.0,
            ..TeacherParams::default()
        },
        rng.random(),
    )?;
    let init_seed: u64 = rng.random();
    if text {
        let spec = TextEncoderSpec {
            vocab: world.vocab_size(),
            embed_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
        };
        let mut params = spec.init(init_seed)?;
        params.merge(init_projection(3, 6, init_seed ^ 1)?)?;
        let student = TextTower { spec, params };
        let seqs: Vec<Vec<usize>> = (0..4)
            .map(|i| {
                let lang = Language::ALL[i % 2];
                let c = rng.random_range(0..world.concepts);
                let t = rng.random_range(0..world.templates(lang).len());
                synth::caption(&world, c, lang, t, rng.random())
            })
            .collect::<Result<_>>()?;
        grad_check_params(
            &student.params,
            |g, b| text_distill_loss(g, &teacher, &student, b, &seqs, 1.0),
            EPS,
        )
    } else {
        let spec = ImageEncoderSpec {
            input_dim: 8,
            positions: 2,
            channels: 3,
            hidden: vec![5],
            activation: Activation::Tanh,
        };
        let mut params = spec.init(init_seed)?;
        params.merge(init_adapter(3, 6, init_seed ^ 1)?)?;
        let student = ImageTower { spec, params };
        let images: Vec<Vec<f64>> = (0..3)
            .map(|_| synth::render_image(&world, rng.random_range(0..4), 0.1, rng.random()))
            .collect::<Result<_>>()?;
        let aug: Vec<u64> = (0..3).map(|_| rng.random_range(1..u64::MAX)).collect();
        grad_check_params(
            &student.params,
            |g, b| {
                let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
                image_distill_loss(
                    g,
                    &teacher,
                    &student,
                    b,
                    &refs,
                    &aug,
                    1.0,
                    AugmentParams::default(),
                )
            },
            EPS,
        )
    }
}

/// Maximum relative error per loss over `points` seeded random points.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    LOSSES
        .iter()
        .enumerate()
        .map(|(li, &loss)| {
            let mut worst = 0.0f64;
            for p in 0..points {
                let mut rng = seed::stream(seed, loss, p as u64);
                let err = match li {
                    0 => {
                        let beta = [0.5, 1.0, 2.0][p % 3];
                        smooth_l1_point(&mut rng, beta)?
                    }
                    1..=3 => infonce_point(&mut rng, li - 1)?,
                    4 => distill_point(&mut rng, false)?,
                    _ => distill_point(&mut rng, true)?,
                };
                worst = worst.max(err);
            }
            Ok(GradCheckResult {
                loss,
                points,
                max_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_loss() {
        let results = gradient_suite(2, 0).unwrap();
        assert_eq!(
            results.iter().map(|r| r.loss).collect::<Vec<_>>(),
            LOSSES.to_vec()
        );
        for r in &results {
            assert!(r.passed(), "{} {}", r.loss, r.max_error);
        }
    }
}

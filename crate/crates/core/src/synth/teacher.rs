use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use super::{Language, WorldSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, ImageEncoderSpec, ImageTower, ParamSet, TextEncoderSpec, TextTower};
use crate::seed;
use crate::tensor::Tensor;

/// Shape and gain constants of the constructed teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherParams {
    /// Shared embedding width (teacher channels and text width).
    pub width: usize,
    pub positions: usize,
    /// tanh gain on the image trunk.
    pub image_gain: f64,
    /// tanh gain on the text hidden layer.
    pub text_gain: f64,
    /// Output scale of both towers.
    pub output_scale: f64,
    /// Std of the zero-mean per-position mixing added to each head.
    pub position_spread: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        Self {
            width: 32,
            positions: 4,
            image_gain: 2.0,
            text_gain: 3.0,
            output_scale: 2.0,
            position_spread: 0.3,
        }
    }
}

pub const MIN_MATCHED_COSINE: f64 = 0.99;
pub const MAX_UNMATCHED_COSINE: f64 = 0.3;

/// Frozen teacher towers whose image and bilingual text embeddings of the
/// same concept coincide by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTeacher {
    image: ImageTower,
    text: TextTower,
}

impl FrozenTeacher {
    /// Wraps loaded towers, freezing every tensor.
    pub fn from_towers(mut image: ImageTower, mut text: TextTower) -> Self {
        image.params.freeze_all();
        text.params.freeze_all();
        Self { image, text }
    }

    pub fn image(&self) -> &ImageTower {
        &self.image
    }

    pub fn text(&self) -> &TextTower {
        &self.text
    }

    pub fn width(&self) -> usize {
        self.image.out_width()
    }

    /// SHA-256 over all teacher tensors.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}{}",
            self.image.params.fingerprint("*"),
            self.text.params.fingerprint("*")
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// K × width matrix with orthonormal rows.
fn orthonormal_rows(k: usize, width: usize, seed: u64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::stream(seed, "teacher.basis", 0);
    let g = DMatrix::from_fn(width, k, |_, _| normal.sample(&mut rng));
    g.qr().q().transpose()
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let values = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
        .collect();
    Tensor::new(&[m.nrows(), m.ncols()], values)
}

/// Builds the aligned teacher and checks its alignment bounds: every
/// concept's clean pooled image embedding has cosine ≥ 0.99 with each of
/// its captions in both languages and ≤ 0.3 with other concepts'
/// captions.
pub fn make_frozen_teacher(
    world: &WorldSpec,
    params: TeacherParams,
    seed: u64,
) -> Result<FrozenTeacher> {
    let k = world.concepts;
    let d = world.image_dim;
    if params.width < k {
        return Err(Error::TeacherConstruction(format!(
            "teacher width {} cannot hold {k} orthonormal concept directions",
            params.width
        )));
    }
    if params.positions == 0 {
        return Err(Error::TeacherConstruction(
            "positions must be positive".into(),
        ));
    }
    let basis = orthonormal_rows(k, params.width, seed);

    // Trunk reads concept coordinates: W = Pᵀ (P Pᵀ)⁻¹ so that p_k · W = e_k.
    let protos = DMatrix::from_row_slice(k, d, world.prototypes.values());
    let gram_inv = (&protos * protos.transpose())
        .try_inverse()
        .ok_or_else(|| Error::TeacherConstruction("prototype Gram matrix is singular".into()))?;
    let reader = protos.transpose() * gram_inv * params.image_gain;

    let normal = Normal::new(0.0, params.position_spread.max(0.0)).expect("valid spread");
    let mut rng = seed::stream(seed, "teacher.positions", 0);
    let mut mixes: Vec<DMatrix<f64>> = (0..params.positions)
        .map(|_| DMatrix::from_fn(k, k, |_, _| normal.sample(&mut rng)))
        .collect();
    let mean = mixes.iter().fold(DMatrix::zeros(k, k), |acc, m| acc + m) / params.positions as f64;
    for m in &mut mixes {
        *m -= &mean;
        *m += DMatrix::identity(k, k);
    }
    let mut heads = DMatrix::zeros(k, params.positions * params.width);
    for (p, mix) in mixes.iter().enumerate() {
        let block = mix * &basis * params.output_scale;
        heads
            .view_mut((0, p * params.width), (k, params.width))
            .copy_from(&block);
    }

    let image_spec = ImageEncoderSpec {
        input_dim: d,
        positions: params.positions,
        channels: params.width,
        hidden: vec![k],
        activation: Activation::Tanh,
    };
    let mut image_params = ParamSet::new();
    image_params.insert("image.trunk.0.weight", to_tensor(&reader)?)?;
    image_params.insert("image.trunk.0.bias", Tensor::zeros(&[k]))?;
    image_params.insert("image.heads.weight", to_tensor(&heads)?)?;
    image_params.insert(
        "image.heads.bias",
        Tensor::zeros(&[params.positions * params.width]),
    )?;

    // Text path: label tokens embed onto their concept axis, filler is silent.
    let vocab = world.vocab_size();
    let mut embed = Tensor::zeros(&[vocab, k]);
    for lang in Language::ALL {
        for (concept, labels) in world.language(lang).labels.iter().enumerate() {
            for &tok in labels {
                embed.values_mut()[tok * k + concept] = 1.0;
            }
        }
    }
    let mut hidden = Tensor::identity(k);
    hidden
        .values_mut()
        .iter_mut()
        .for_each(|x| *x *= params.text_gain);
    let text_spec = TextEncoderSpec {
        vocab,
        embed_dim: k,
        hidden: vec![k],
        output_dim: params.width,
        activation: Activation::Tanh,
    };
    let mut text_params = ParamSet::new();
    text_params.insert("text.embed", embed)?;
    text_params.insert("text.mlp.0.weight", hidden)?;
    text_params.insert("text.mlp.0.bias", Tensor::zeros(&[k]))?;
    text_params.insert(
        "text.out.weight",
        to_tensor(&(&basis * params.output_scale))?,
    )?;
    text_params.insert("text.out.bias", Tensor::zeros(&[params.width]))?;

    let teacher = FrozenTeacher::from_towers(
        ImageTower {
            spec: image_spec,
            params: image_params,
        },
        TextTower {
            spec: text_spec,
            params: text_params,
        },
    );
    verify_alignment(world, &teacher)?;
    Ok(teacher)
}

fn verify_alignment(world: &WorldSpec, teacher: &FrozenTeacher) -> Result<()> {
    let k = world.concepts;
    let protos: Vec<Vec<f64>> = (0..k).map(|c| world.prototypes.row(c).to_vec()).collect();
    let images = teacher.image.embed(&protos, true)?;

    let mut captions = Vec::new();
    for lang in Language::ALL {
        for c in 0..k {
            for cap in world.all_captions(c, lang)? {
                captions.push((c, lang, cap));
            }
        }
    }
    let seqs: Vec<Vec<usize>> = captions.iter().map(|(_, _, s)| s.clone()).collect();
    let texts = teacher.text.embed(&seqs, true)?;

    for c in 0..k {
        for (i, (owner, lang, _)) in captions.iter().enumerate() {
            let cos = dot(images.row(c), texts.row(i));
            if *owner == c && cos < MIN_MATCHED_COSINE {
                return Err(Error::TeacherConstruction(format!(
                    "concept {c}: cosine {cos:.4} with its own {lang} caption"
                )));
            }
            if *owner != c && cos > MAX_UNMATCHED_COSINE {
                return Err(Error::TeacherConstruction(format!(
                    "concept {c}: cosine {cos:.4} with a {lang} caption of concept {owner}"
                )));
            }
        }
    }
    for (i, (ci, li, _)) in captions.iter().enumerate() {
        for (j, (cj, lj, _)) in captions.iter().enumerate().skip(i + 1) {
            if ci == cj && li != lj {
                let cos = dot(texts.row(i), texts.row(j));
                if cos < MIN_MATCHED_COSINE {
                    return Err(Error::TeacherConstruction(format!(
                        "concept {ci}: cross-language caption cosine {cos:.4}"
                    )));
                }
            }
        }
    }
    Ok(())
}

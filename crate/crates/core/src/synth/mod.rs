//! Seeded synthetic bilingual world: concept prototypes, two caption
//! languages with disjoint vocabularies, image rendering, augmentation
//! and batching.

mod data;
mod teacher;

pub use data::{batches, heldout_split, unique_concept_batches, ImageTextPair};
pub use teacher::{make_frozen_teacher, FrozenTeacher, TeacherParams};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    L1,
    L2,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::L1, Language::L2];

    pub fn index(self) -> usize {
        match self {
            Language::L1 => 0,
            Language::L2 => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Language::L1 => "L1",
            Language::L2 => "L2",
        }
    }
}

impl std::fmt::Display for Language {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Caption pattern: filler tokens with the label spliced in at `slot`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub tokens: Vec<usize>,
    pub slot: usize,
}

/// Vocabulary and templates for one language. Token ids occupy
/// `token_start .. token_start + token_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageTable {
    pub token_start: usize,
    pub token_count: usize,
    /// Label tokens per concept; the first is the canonical class label.
    pub labels: Vec<Vec<usize>>,
    pub filler: Vec<usize>,
    pub templates: Vec<Template>,
}

impl LanguageTable {
    pub fn contains(&self, token: usize) -> bool {
        (self.token_start..self.token_start + self.token_count).contains(&token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub templates_per_language: usize,
    pub filler_words: usize,
    pub max_synonyms: usize,
    /// Prototypes are redrawn while their |cosine| with an earlier one
    /// reaches this bound.
    pub max_abs_cosine: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            templates_per_language: 4,
            filler_words: 12,
            max_synonyms: 2,
            max_abs_cosine: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub concepts: usize,
    pub image_dim: usize,
    /// concepts × image_dim
    pub prototypes: Tensor,
    pub languages: [LanguageTable; 2],
    pub seed: u64,
}

const MAX_RETRIES: usize = 1000;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn generate_world(concepts: usize, image_dim: usize, seed: u64) -> Result<WorldSpec> {
    generate_world_with(concepts, image_dim, WorldParams::default(), seed)
}

pub fn generate_world_with(
    concepts: usize,
    image_dim: usize,
    params: WorldParams,
    seed: u64,
) -> Result<WorldSpec> {
    if concepts < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 concepts, got {concepts}"
        )));
    }
    if image_dim < concepts {
        return Err(Error::InvalidArgument(format!(
            "image_dim {image_dim} must be at least the concept count {concepts}"
        )));
    }
    if params.templates_per_language == 0 || params.filler_words == 0 || params.max_synonyms == 0 {
        return Err(Error::InvalidArgument(
            "templates, filler words and synonyms must be positive".into(),
        ));
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::stream(seed, "world.prototypes", 0);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(concepts);
    let mut retries = 0;
    while protos.len() < concepts {
        let cand: Vec<f64> = (0..image_dim).map(|_| normal.sample(&mut rng)).collect();
        if protos
            .iter()
            .all(|p| cosine(p, &cand).abs() < params.max_abs_cosine)
        {
            protos.push(cand);
        } else {
            retries += 1;
            if retries > MAX_RETRIES {
                return Err(Error::Generation(format!(
                    "prototype rejection exceeded {MAX_RETRIES} retries \
                     ({concepts} concepts in {image_dim} dims)"
                )));
            }
        }
    }

    let mut next_token = 0;
    let languages = [Language::L1, Language::L2].map(|lang| {
        let mut rng = seed::stream(seed, "world.language", lang.index() as u64);
        let start = next_token;
        let mut alloc = |n: usize| {
            let ids: Vec<usize> = (next_token..next_token + n).collect();
            next_token += n;
            ids
        };
        let labels: Vec<Vec<usize>> = (0..concepts)
            .map(|_| alloc(rng.random_range(1..=params.max_synonyms)))
            .collect();
        let filler = alloc(params.filler_words);
        let templates = (0..params.templates_per_language)
            .map(|_| {
                let len = rng.random_range(2..=5);
                let tokens = (0..len)
                    .map(|_| filler[rng.random_range(0..filler.len())])
                    .collect();
                Template {
                    tokens,
                    slot: rng.random_range(0..=len),
                }
            })
            .collect();
        LanguageTable {
            token_start: start,
            token_count: next_token - start,
            labels,
            filler,
            templates,
        }
    });

    Ok(WorldSpec {
        concepts,
        image_dim,
        prototypes: Tensor::from_rows(&protos)?,
        languages,
        seed,
    })
}

impl WorldSpec {
    pub fn vocab_size(&self) -> usize {
        self.languages.iter().map(|l| l.token_count).sum()
    }

    pub fn language(&self, lang: Language) -> &LanguageTable {
        &self.languages[lang.index()]
    }

    pub fn prototype(&self, concept: usize) -> Result<&[f64]> {
        self.check_concept(concept)?;
        Ok(self.prototypes.row(concept))
    }

    pub fn templates(&self, lang: Language) -> &[Template] {
        &self.language(lang).templates
    }

    fn check_concept(&self, concept: usize) -> Result<()> {
        if concept < self.concepts {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "concept {concept} out of range 0..{}",
                self.concepts
            )))
        }
    }

    /// Every caption the world can produce for `concept` in `lang`.
    pub fn all_captions(&self, concept: usize, lang: Language) -> Result<Vec<Vec<usize>>> {
        self.check_concept(concept)?;
        let table = self.language(lang);
        Ok(table
            .templates
            .iter()
            .flat_map(|t| {
                table.labels[concept]
                    .iter()
                    .map(move |&label| splice(t, label))
            })
            .collect())
    }
}

fn splice(template: &Template, label: usize) -> Vec<usize> {
    let mut out = template.tokens.clone();
    out.insert(template.slot, label);
    out
}

/// Prototype plus seeded isotropic gaussian noise.
pub fn render_image(
    world: &WorldSpec,
    concept: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let proto = world.prototype(concept)?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    if noise_sigma == 0.0 {
        return Ok(proto.to_vec());
    }
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut rng = seed::rng(seed);
    Ok(proto.iter().map(|x| x + normal.sample(&mut rng)).collect())
}

/// Template `template_index` of `lang` with one of the concept's label
/// tokens (chosen by `seed`) spliced in.
pub fn caption(
    world: &WorldSpec,
    concept: usize,
    lang: Language,
    template_index: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    world.check_concept(concept)?;
    let table = world.language(lang);
    let template = table.templates.get(template_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "template {template_index} out of range 0..{}",
            table.templates.len()
        ))
    })?;
    let labels = &table.labels[concept];
    let label = labels[seed::rng(seed).random_range(0..labels.len())];
    Ok(splice(template, label))
}

/// Canonical class caption used by zero-shot evaluation.
pub fn class_caption(
    world: &WorldSpec,
    concept: usize,
    lang: Language,
    template: &Template,
) -> Result<Vec<usize>> {
    world.check_concept(concept)?;
    Ok(splice(template, world.language(lang).labels[concept][0]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub dropout: f64,
    pub jitter: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            jitter: 0.05,
        }
    }
}

/// Reserved augmentation seed meaning "no augmentation".
pub const IDENTITY_AUG_SEED: u64 = 0;

/// Seeded view of `image`: each coordinate is zeroed with probability
/// `dropout`, otherwise jittered by N(0, jitter²).
pub fn augment(image: &[f64], aug_seed: u64, params: AugmentParams) -> Vec<f64> {
    if aug_seed == IDENTITY_AUG_SEED {
        return image.to_vec();
    }
    let mut rng = seed::rng(aug_seed);
    let jitter = Normal::new(0.0, params.jitter.max(0.0)).expect("valid jitter");
    image
        .iter()
        .map(|&x| {
            let drop = rng.random::<f64>() < params.dropout;
            let noise = jitter.sample(&mut rng);
            if drop {
                0.0
            } else {
                x + noise
            }
        })
        .collect()
}

/// Non-reserved augmentation seed for image `index` at `epoch`.
pub fn aug_seed_for(master: u64, epoch: usize, index: usize) -> u64 {
    match seed::derive_seed(master, &format!("augment.{epoch}"), index as u64) {
        IDENTITY_AUG_SEED => 1,
        s => s,
    }
}

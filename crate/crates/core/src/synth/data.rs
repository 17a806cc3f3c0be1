use rand::seq::SliceRandom;
use rand::Rng;

use super::{caption, render_image, Language, WorldSpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub image: Vec<f64>,
    pub tokens_l1: Vec<usize>,
    pub tokens_l2: Vec<usize>,
    pub concept: usize,
}

impl ImageTextPair {
    pub fn tokens(&self, lang: Language) -> &[usize] {
        match lang {
            Language::L1 => &self.tokens_l1,
            Language::L2 => &self.tokens_l2,
        }
    }
}

impl WorldSpec {
    /// `count` pairs with uniformly drawn concepts, images rendered at
    /// `noise_sigma` and one caption per language on independent
    /// template draws.
    pub fn generate_pairs(
        &self,
        count: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Vec<ImageTextPair>> {
        (0..count as u64)
            .map(|i| {
                let mut rng = seed::stream(seed, "pairs", i);
                let concept = rng.random_range(0..self.concepts);
                let image = render_image(self, concept, noise_sigma, rng.random())?;
                let mut text = |lang: Language| {
                    let t = rng.random_range(0..self.templates(lang).len());
                    caption(self, concept, lang, t, rng.random())
                };
                let tokens_l1 = text(Language::L1)?;
                let tokens_l2 = text(Language::L2)?;
                Ok(ImageTextPair {
                    image,
                    tokens_l1,
                    tokens_l2,
                    concept,
                })
            })
            .collect()
    }
}

fn check_batching(len: usize, batch_size: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "cannot batch an empty dataset".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(())
}

fn epoch_order(len: usize, epoch_seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut seed::stream(epoch_seed, "batches", 0));
    }
    order
}

/// Index batches over `len` items; the last batch may be short.
pub fn batches(
    len: usize,
    batch_size: usize,
    epoch_seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    check_batching(len, batch_size)?;
    Ok(epoch_order(len, epoch_seed, shuffle)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Like [`batches`], but no batch holds two items of the same concept.
/// Each item goes to the earliest open batch lacking its concept.
pub fn unique_concept_batches(
    concepts: &[usize],
    batch_size: usize,
    epoch_seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    check_batching(concepts.len(), batch_size)?;
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut first_open = 0;
    for idx in epoch_order(concepts.len(), epoch_seed, shuffle) {
        let c = concepts[idx];
        let slot = (first_open..out.len())
            .find(|&b| out[b].len() < batch_size && out[b].iter().all(|&i| concepts[i] != c));
        match slot {
            Some(b) => out[b].push(idx),
            None => out.push(vec![idx]),
        }
        while first_open < out.len() && out[first_open].len() == batch_size {
            first_open += 1;
        }
    }
    Ok(out)
}

/// Seeded split into (train, held-out) index lists, each ascending.
pub fn heldout_split(len: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "held-out fraction {fraction} outside [0, 1)"
        )));
    }
    let order = epoch_order(len, seed::derive_seed(seed, "heldout", 0), true);
    let n_held = ((len as f64) * fraction).round() as usize;
    let mut held = order[..n_held].to_vec();
    let mut train = order[n_held..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    Ok((train, held))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_world;

    #[test]
    fn batch_examples() {
        assert_eq!(
            batches(10, 4, 1, false).unwrap(),
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]
        );
        let a = batches(10, 4, 5, true).unwrap();
        assert_eq!(a, batches(10, 4, 5, true).unwrap());
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batches(0, 4, 0, false).is_err());
        assert!(batches(3, 0, 0, false).is_err());
    }

    #[test]
    fn unique_batches_have_no_duplicate_concepts() {
        let concepts: Vec<usize> = (0..200).map(|i| (i * 7 + i / 3) % 10).collect();
        let b = unique_concept_batches(&concepts, 8, 3, true).unwrap();
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.len() <= 8);
            let mut cs: Vec<usize> = batch.iter().map(|&i| concepts[i]).collect();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(cs.len(), batch.len());
        }
    }

    #[test]
    fn pairs_are_seeded() {
        let w = generate_world(5, 8, 0).unwrap();
        let a = w.generate_pairs(20, 0.1, 4).unwrap();
        assert_eq!(a, w.generate_pairs(20, 0.1, 4).unwrap());
        for p in &a {
            assert!(p.concept < 5);
            assert!(!p.tokens_l1.is_empty() && !p.tokens_l2.is_empty());
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (train, held) = heldout_split(2000, 0.1, 9).unwrap();
        assert_eq!(held.len(), 200);
        assert_eq!(train.len(), 1800);
        let mut all = [train.clone(), held.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!((train, held), heldout_split(2000, 0.1, 9).unwrap());
    }
}

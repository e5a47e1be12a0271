use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Domain};

/// Step-1 batches for one epoch. With `per_id > 0`, identities are shuffled
/// and taken `ids_per_batch` at a time (the last group wraps around to the
/// start), with `per_id` images each, drawn without replacement where the
/// identity has enough images. With `per_id == 0`, rows are shuffled and
/// chunked into `ids_per_batch`-sized batches without regard to identity.
pub fn source_batches<R: Rng + ?Sized>(classes: &[usize], ids_per_batch: usize, per_id: usize, rng: &mut R) -> Vec<Vec<usize>> {
    if per_id == 0 {
        let mut rows: Vec<usize> = (0..classes.len()).collect();
        rows.shuffle(rng);
        return rows.chunks(ids_per_batch.max(1)).map(<[usize]>::to_vec).collect();
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(row);
    }
    let mut ids: Vec<usize> = by_class.keys().copied().collect();
    if ids.is_empty() {
        return Vec::new();
    }
    ids.shuffle(rng);
    let p = ids_per_batch.min(ids.len());
    let n_batches = ids.len().div_ceil(p);
    (0..n_batches)
        .map(|b| {
            (0..p)
                .flat_map(|i| {
                    let rows = &by_class[&ids[(b * p + i) % ids.len()]];
                    if rows.len() >= per_id {
                        rows.choose_multiple(rng, per_id).copied().collect::<Vec<_>>()
                    } else {
                        (0..per_id).map(|_| rows[rng.gen_range(0..rows.len())]).collect()
                    }
                })
                .collect()
        })
        .collect()
}

/// Every (photo, sketch) row pair of the same identity in a target split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetPairs {
    pub pairs: Vec<(usize, usize)>,
    pub identities: Vec<u32>,
}

impl TargetPairs {
    pub fn from_dataset(target: &Dataset) -> Result<Self> {
        let mut photos: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for r in target.rows_of(Domain::TargetPhoto) {
            photos.entry(target.identities[r]).or_default().push(r);
        }
        let mut pairs = Vec::new();
        for s in target.rows_of(Domain::TargetSketch) {
            for &p in photos.get(&target.identities[s]).into_iter().flatten() {
                pairs.push((p, s));
            }
        }
        pairs.sort_unstable();
        let mut identities: Vec<u32> = pairs.iter().map(|&(p, _)| target.identities[p]).collect();
        identities.dedup();
        identities.sort_unstable();
        identities.dedup();
        if pairs.is_empty() {
            return Err(Error::Config(format!("{} split has no photo/sketch pairs", target.split)));
        }
        if identities.len() < 2 {
            return Err(Error::Config(format!(
                "degenerate batch: {} split pairs span {} identity (need at least 2)",
                target.split,
                identities.len()
            )));
        }
        Ok(TargetPairs { pairs, identities })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A co-training batch: source rows plus row-aligned target photo and
/// sketch rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step2Batch {
    pub source_rows: Vec<usize>,
    pub photo_rows: Vec<usize>,
    pub sketch_rows: Vec<usize>,
    /// `paired[i]` is set when `photo_rows[i]` and `sketch_rows[i]` show
    /// the same identity.
    pub paired: Vec<bool>,
}

impl Step2Batch {
    pub fn len(&self) -> usize {
        self.source_rows.len() + self.photo_rows.len() + self.sketch_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Domain tag per sample in source, photo, sketch order.
    pub fn domains(&self) -> Vec<Domain> {
        std::iter::repeat(Domain::SourcePhoto)
            .take(self.source_rows.len())
            .chain(std::iter::repeat(Domain::TargetPhoto).take(self.photo_rows.len()))
            .chain(std::iter::repeat(Domain::TargetSketch).take(self.sketch_rows.len()))
            .collect()
    }
}

/// Draws co-training batches. An epoch is `ceil(#pairs / batch_pairs)`
/// batches over a fresh shuffle of the pairs; source samples cycle through
/// their own shuffle independently of epochs.
#[derive(Clone, Debug)]
pub struct Step2Sampler {
    pairs: TargetPairs,
    pair_identity: Vec<u32>,
    n_source: usize,
    source_order: Vec<usize>,
    cursor: usize,
    batch_pairs: usize,
    batch_source: usize,
}

impl Step2Sampler {
    pub fn new(target: &Dataset, n_source: usize, batch_pairs: usize, batch_source: usize) -> Result<Self> {
        let pairs = TargetPairs::from_dataset(target)?;
        if batch_source > 0 && n_source == 0 {
            return Err(Error::Config("co-training needs source samples but the source split is empty".into()));
        }
        Ok(Step2Sampler {
            pair_identity: pairs.pairs.iter().map(|&(p, _)| target.identities[p]).collect(),
            pairs,
            n_source,
            source_order: Vec::new(),
            cursor: 0,
            batch_pairs,
            batch_source,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_pairs)
    }

    fn next_source<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.cursor >= self.source_order.len() {
            self.source_order = (0..self.n_source).collect();
            self.source_order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.source_order[self.cursor - 1]
    }

    pub fn epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Step2Batch> {
        let n = self.pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        (0..self.batches_per_epoch())
            .map(|b| {
                let mut chosen: Vec<usize> = (0..self.batch_pairs).map(|i| order[(b * self.batch_pairs + i) % n]).collect();
                // guarantee an in-batch negative for every sketch anchor
                let first = self.pair_identity[chosen[0]];
                if chosen.iter().all(|&c| self.pair_identity[c] == first) {
                    let other = order
                        .iter()
                        .copied()
                        .find(|&c| self.pair_identity[c] != first)
                        .expect("at least two identities");
                    *chosen.last_mut().expect("non-empty") = other;
                }
                let (photo_rows, sketch_rows): (Vec<usize>, Vec<usize>) =
                    chosen.iter().map(|&c| self.pairs.pairs[c]).unzip();
                Step2Batch {
                    source_rows: (0..self.batch_source).map(|_| self.next_source(rng)).collect(),
                    paired: vec![true; photo_rows.len()],
                    photo_rows,
                    sketch_rows,
                }
            })
            .collect()
    }
}

/// A single co-training batch drawn from a fresh sampler.
pub fn compose_step2_batch<R: Rng + ?Sized>(
    source: &Dataset,
    target: &Dataset,
    batch_pairs: usize,
    batch_source: usize,
    rng: &mut R,
) -> Result<Step2Batch> {
    let mut sampler = Step2Sampler::new(target, source.len(), batch_pairs, batch_source)?;
    Ok(sampler.epoch(rng).swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputShape;
    use crate::synthdata::Split;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `n_ids` identities with two photos and one sketch each.
    fn target(n_ids: u32) -> Dataset {
        let mut identities = Vec::new();
        let mut domains = Vec::new();
        for id in 0..n_ids {
            for d in [Domain::TargetPhoto, Domain::TargetPhoto, Domain::TargetSketch] {
                identities.push(100 + id);
                domains.push(d);
            }
        }
        Dataset {
            split: Split::TargetTrain,
            shape: InputShape {
                channels: 1,
                height: 1,
                width: 1,
            },
            images: Array2::zeros((identities.len(), 1)),
            identities,
            domains,
            attributes: None,
            attribute_info: Vec::new(),
        }
    }

    #[test]
    fn default_batch_has_32_of_each_domain() {
        let t = target(40);
        let s = target(3);
        let b = compose_step2_batch(&s, &t, 32, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.source_rows.len(), b.photo_rows.len(), b.sketch_rows.len()), (32, 32, 32));
        assert_eq!(b.len(), 96);
        for i in 0..32 {
            assert_eq!(b.paired[i], t.identities[b.photo_rows[i]] == t.identities[b.sketch_rows[i]]);
            assert!(b.paired[i]);
        }
        let again = compose_step2_batch(&s, &t, 32, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn epoch_length_and_negatives() {
        let t = target(40);
        let mut s = Step2Sampler::new(&t, 10, 32, 32).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in s.epoch(&mut rng) {
            let first = t.identities[b.photo_rows[0]];
            assert!(b.photo_rows.iter().any(|&r| t.identities[r] != first));
        }
        let mut tiny = Step2Sampler::new(&target(2), 10, 2, 2).unwrap();
        for _ in 0..20 {
            for b in tiny.epoch(&mut rng) {
                assert_ne!(t.identities[b.photo_rows[0]], t.identities[b.photo_rows[1]]);
            }
        }
    }

    #[test]
    fn single_identity_is_degenerate() {
        assert!(matches!(TargetPairs::from_dataset(&target(1)), Err(Error::Config(_))));
    }

    #[test]
    fn pk_batches_cover_identities() {
        let classes: Vec<usize> = (0..50).map(|i| i / 4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = source_batches(&classes, 4, 3, &mut rng);
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.len(), 12);
            let mut ids: Vec<usize> = b.iter().map(|&r| classes[r]).collect();
            ids.dedup();
            assert_eq!(ids.len(), 4);
        }
        let plain = source_batches(&classes, 16, 0, &mut rng);
        assert_eq!(plain.iter().map(Vec::len).sum::<usize>(), 50);
    }
}

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{AttributeSchema, CorpusRecord, CHANNELS, IMAGE_SIDE};
use crate::model::Vocabulary;
use crate::Tensor;

const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;

/// Every rendered image of a corpus, gathered into batches by id.
#[derive(Debug, Clone)]
pub struct ImageStore {
    index: HashMap<u64, usize>,
    pixels: Vec<f32>,
}

impl ImageStore {
    pub fn render(schema: &AttributeSchema, records: &[CorpusRecord]) -> Result<Self, String> {
        let images: Vec<Tensor<f32>> = records.par_iter().map(|r| r.image(schema)).collect::<Result<_, _>>()?;
        let mut pixels = Vec::with_capacity(records.len() * PIXELS);
        let mut index = HashMap::with_capacity(records.len());
        for (r, img) in records.iter().zip(&images) {
            if index.insert(r.id, index.len()).is_some() {
                return Err(format!("duplicate id {}", r.id));
            }
            pixels.extend_from_slice(img.data());
        }
        Ok(ImageStore { index, pixels })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    /// `[ids.len(), 32, 32, 3]`.
    pub fn batch(&self, ids: &[u64]) -> Result<Tensor<f32>, String> {
        let mut data = Vec::with_capacity(ids.len() * PIXELS);
        for id in ids {
            let i = *self.index.get(id).ok_or_else(|| format!("no image for item {id}"))?;
            data.extend_from_slice(&self.pixels[i * PIXELS..(i + 1) * PIXELS]);
        }
        Ok(Tensor::from_vec(vec![ids.len(), IMAGE_SIDE, IMAGE_SIDE, CHANNELS], data).expect("batch shape"))
    }
}

/// `[BOS] … [EOS]` rows, truncated to `max_len`.
pub fn encode_texts<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S], max_len: usize) -> Vec<Vec<u32>> {
    texts.iter().map(|t| vocab.encode(t.as_ref(), max_len)).collect()
}

/// Rows `rows` of a batch tensor, in that order.
pub fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_vec(shape, data).expect("row selection keeps shape")
}

/// Shuffled passes over `0..n`, reshuffling whenever fewer than a batch
/// remain. Batches never repeat an index.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        assert!(size <= self.order.len(), "batch larger than the data");
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(3, &mut rng)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn batches_follow_ids() {
        let schema = AttributeSchema::default();
        let items = crate::corpus::generate_corpus(&schema, 4, 1).unwrap();
        let store = ImageStore::render(&schema, &items).unwrap();
        let b = store.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 32, 32, 3]);
        assert_eq!(&b.data()[..PIXELS], items[2].image(&schema).unwrap().data());
        assert!(store.batch(&[9]).is_err());
        assert_eq!(select_rows(&b, &[1]).data(), &b.data()[PIXELS..]);
    }
}

use std::borrow::Cow;
use std::sync::OnceLock;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::ingest::{preprocess_sample, DatasetManifest, PreparedSample, PreprocessSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::taxonomy::{validate_mask, ClassTaxonomy, Split};
use crate::tensor::Tensor;

/// Images `[B, C, H, W]` with their flattened targets.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub targets: Vec<u8>,
    pub indices: Vec<usize>,
}

enum Source<T> {
    Memory(Vec<PreparedSample<T>>),
    Files {
        manifest: DatasetManifest,
        spec: PreprocessSpec,
        cache: Option<Vec<OnceLock<PreparedSample<T>>>>,
    },
}

/// Preprocessed samples addressed by index, either held in memory or
/// decoded from a manifest on demand.
pub struct Dataset<T> {
    id: String,
    content_hash: String,
    splits: Vec<Split>,
    taxonomy: ClassTaxonomy,
    source: Source<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_manifest(
        manifest: DatasetManifest,
        taxonomy: ClassTaxonomy,
        spec: PreprocessSpec,
        cache: bool,
    ) -> Result<Self, TrainError> {
        if manifest.is_empty() {
            return Err(TrainError::EmptyManifest(manifest.dataset_id().to_string()));
        }
        spec.validate()?;
        let n = manifest.len();
        Ok(Self {
            id: manifest.dataset_id().to_string(),
            content_hash: manifest.content_hash().to_string(),
            splits: manifest.entries().iter().map(|e| e.split).collect(),
            taxonomy,
            source: Source::Files {
                manifest,
                spec,
                cache: cache.then(|| (0..n).map(|_| OnceLock::new()).collect()),
            },
        })
    }

    /// Wraps already prepared samples; the content hash covers their values.
    pub fn from_samples(
        id: impl Into<String>,
        samples: Vec<PreparedSample<T>>,
        splits: Vec<Split>,
        taxonomy: ClassTaxonomy,
    ) -> Result<Self, TrainError> {
        let id = id.into();
        if samples.is_empty() {
            return Err(TrainError::EmptyManifest(id));
        }
        assert_eq!(samples.len(), splits.len(), "one split per sample");
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for s in &samples {
            validate_mask(&s.mask, &taxonomy)?;
            buf.clear();
            for v in s.image.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
            hasher.update(s.mask.values());
        }
        Ok(Self {
            id,
            content_hash: hex::encode(hasher.finalize()),
            splits,
            taxonomy,
            source: Source::Memory(samples),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }

    fn decode(&self, manifest: &DatasetManifest, spec: &PreprocessSpec, i: usize) -> Result<PreparedSample<T>, TrainError> {
        let s = preprocess_sample::<T>(&manifest.entries()[i], spec, manifest.base_dir())?;
        validate_mask(&s.mask, &self.taxonomy)?;
        Ok(s)
    }

    pub fn sample(&self, i: usize) -> Result<Cow<'_, PreparedSample<T>>, TrainError> {
        match &self.source {
            Source::Memory(v) => Ok(Cow::Borrowed(&v[i])),
            Source::Files {
                manifest,
                spec,
                cache: None,
            } => Ok(Cow::Owned(self.decode(manifest, spec, i)?)),
            Source::Files {
                manifest,
                spec,
                cache: Some(cache),
            } => {
                if let Some(s) = cache[i].get() {
                    return Ok(Cow::Borrowed(s));
                }
                let s = self.decode(manifest, spec, i)?;
                Ok(Cow::Borrowed(cache[i].get_or_init(|| s)))
            }
        }
    }

    /// Decodes the requested samples in parallel and stacks them in order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>, TrainError> {
        let samples: Vec<Cow<'_, PreparedSample<T>>> =
            indices.par_iter().map(|&i| self.sample(i)).collect::<Result<_, _>>()?;
        let dims = samples[0].mask.dims();
        if let Some(bad) = samples.iter().position(|s| s.mask.dims() != dims) {
            return Err(TrainError::Config(format!(
                "sample {} has size {:?}, batch expects {dims:?}",
                indices[bad],
                samples[bad].mask.dims()
            )));
        }
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.clone()).collect();
        let targets = samples.iter().flat_map(|s| s.mask.values().iter().copied()).collect();
        Ok(Batch {
            images: Tensor::stack(&images),
            targets,
            indices: indices.to_vec(),
        })
    }

    /// Labeled pixel counts per class over the whole dataset.
    pub fn class_counts(&self) -> Result<Vec<u64>, TrainError> {
        let c = self.taxonomy.num_classes();
        let ignore = self.taxonomy.ignore_value();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let s = self.sample(i)?;
                let mut counts = vec![0u64; c];
                for &v in s.mask.values() {
                    if v != ignore {
                        counts[v as usize] += 1;
                    }
                }
                Ok(counts)
            })
            .try_reduce(|| vec![0u64; c], |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect()))
    }
}

/// Sample order of one epoch, a pure function of its arguments.
pub fn epoch_order(seed: u64, content_hash: &str, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    rng::shuffle(&mut rng::stream(seed, &format!("epoch/{content_hash}"), epoch as u64), &mut order);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{make_taxonomy, LabelMask, TaxonomyVariant};

    fn tiny(n: usize) -> Dataset<f32> {
        let samples = (0..n)
            .map(|i| PreparedSample {
                image: Tensor::full(&[3, 2, 2], i as f32),
                mask: LabelMask::filled(2, 2, (i % 4) as u8),
            })
            .collect();
        Dataset::from_samples("tiny", samples, vec![Split::Train; n], make_taxonomy(TaxonomyVariant::FourClass)).unwrap()
    }

    #[test]
    fn batches_keep_requested_order() {
        let d = tiny(5);
        let b = d.batch(&[3, 0]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 2, 2]);
        assert_eq!(b.images.data()[0], 3.0);
        assert_eq!(b.targets, vec![3, 3, 3, 3, 0, 0, 0, 0]);
        assert_eq!(d.class_counts().unwrap(), vec![8, 4, 4, 4]);
    }

    #[test]
    fn epoch_order_is_deterministic_per_epoch() {
        assert_eq!(epoch_order(1, "h", 0, 20), epoch_order(1, "h", 0, 20));
        assert_ne!(epoch_order(1, "h", 0, 20), epoch_order(1, "h", 1, 20));
        assert_ne!(epoch_order(1, "h", 0, 20), epoch_order(1, "g", 0, 20));
        assert_ne!(epoch_order(1, "h", 0, 20), epoch_order(2, "h", 0, 20));
    }

    #[test]
    fn content_hash_tracks_values() {
        assert_eq!(tiny(3).content_hash(), tiny(3).content_hash());
        assert_ne!(tiny(3).content_hash(), tiny(4).content_hash());
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let s = PreparedSample {
            image: Tensor::<f32>::zeros(&[3, 1, 1]),
            mask: LabelMask::filled(1, 1, 9),
        };
        assert!(Dataset::from_samples("bad", vec![s], vec![Split::Train], make_taxonomy(TaxonomyVariant::FourClass)).is_err());
    }
}

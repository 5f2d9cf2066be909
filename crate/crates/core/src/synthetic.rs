//! Procedurally generated terrain-like datasets with known structure, for
//! exercising the training pipeline without real imagery.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{preprocess_images, DatasetManifest, IngestError, Normalization, PreprocessSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::taxonomy::{ClassTaxonomy, Channels, Domain, LabelMask, Split, TaxonomyVariant, TerrainSample};
use crate::train::{Dataset, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Rectangles and ellipses on a background; each class has its own
    /// intensity band, so labels are recoverable from local appearance.
    Geometric,
    /// Like `Geometric`, but the last class covers about
    /// `minority_fraction` of the pixels as small discs whose intensity
    /// overlaps the background and differs only in texture.
    Imbalanced { minority_fraction: f64 },
    /// Balanced label blocks over noise that carries no label information.
    Unlearnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split: Split,
    pub domain: Domain,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, images: usize, size: usize, seed: u64) -> Self {
        Self {
            kind,
            images,
            height: size,
            width: size,
            seed,
            split: Split::Train,
            domain: Domain::Msl,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Preprocessing that keeps the native size.
    pub fn preprocess(&self) -> PreprocessSpec {
        PreprocessSpec {
            target_height: self.height,
            target_width: self.width,
            to_grayscale: true,
            replicate_channels: 3,
            normalization: Normalization {
                mean: [0.5; 3],
                std: [0.25; 3],
            },
        }
    }
}

/// One generated image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image: GrayImage,
    pub mask: LabelMask,
}

/// Four classes, matching the default taxonomy.
pub const CLASSES: usize = 4;

const CLASS_MEAN: [f64; CLASSES] = [0.45, 0.75, 0.18, 0.95];
const NOISE: f64 = 0.04;

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit_f64(r)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, class: u8, inside: impl Fn(f64, f64) -> bool) -> usize {
        let mut n = 0;
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    self.labels[y * self.w + x] = class;
                    n += 1;
                }
            }
        }
        n
    }

    fn random_shape(&mut self, r: &mut ChaCha8Rng, class: u8) {
        let (h, w) = (self.h as f64, self.w as f64);
        let cy = uniform(r, 0.1 * h, 0.9 * h);
        let cx = uniform(r, 0.1 * w, 0.9 * w);
        let ry = uniform(r, 0.08 * h, 0.22 * h);
        let rx = uniform(r, 0.08 * w, 0.22 * w);
        if rng::below(r, 2) == 0 {
            self.paint(class, |y, x| (y - cy).abs() <= ry && (x - cx).abs() <= rx);
        } else {
            self.paint(class, |y, x| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0);
        }
    }
}

fn geometric(r: &mut ChaCha8Rng, h: usize, w: usize, minority: Option<f64>) -> SyntheticImage {
    let mut canvas = Canvas {
        h,
        w,
        labels: vec![0; h * w],
    };
    let shape_classes = if minority.is_some() { CLASSES - 2 } else { CLASSES - 1 };
    for _ in 0..2 + rng::below(r, 3) {
        let class = 1 + rng::below(r, shape_classes as u64) as u8;
        canvas.random_shape(r, class);
    }
    let minority_class = (CLASSES - 1) as u8;
    if let Some(frac) = minority {
        let target = (frac * (h * w) as f64).round() as usize;
        let mut painted = 0;
        while painted < target {
            let rad = uniform(r, 2.0, 3.5);
            let cy = uniform(r, rad, h as f64 - rad);
            let cx = uniform(r, rad, w as f64 - rad);
            canvas.paint(minority_class, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad);
            painted = canvas.labels.iter().filter(|&&l| l == minority_class).count();
        }
    }
    let mut pixels = Vec::with_capacity(h * w);
    for (i, &l) in canvas.labels.iter().enumerate() {
        let v = if minority.is_some() && l == minority_class {
            // Background brightness with a checkerboard texture.
            let (y, x) = (i / w, i % w);
            let sign = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
            CLASS_MEAN[0] + 0.07 * sign + NOISE * rng::normal(r)
        } else {
            CLASS_MEAN[l as usize] + NOISE * rng::normal(r)
        };
        pixels.push(to_u8(v));
    }
    SyntheticImage {
        image: GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size"),
        mask: LabelMask::new(h, w, canvas.labels).expect("buffer matches size"),
    }
}

fn unlearnable(r: &mut ChaCha8Rng, h: usize, w: usize, index: usize) -> SyntheticImage {
    // Quadrants carry the four classes in a rotating order, so every image
    // is balanced up to odd dimensions.
    let labels = (0..h * w)
        .map(|i| {
            let quadrant = 2 * usize::from(i / w >= h / 2) + usize::from(i % w >= w / 2);
            ((quadrant + index) % CLASSES) as u8
        })
        .collect();
    let pixels = (0..h * w).map(|_| to_u8(uniform(r, 0.0, 1.0))).collect();
    SyntheticImage {
        image: GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size"),
        mask: LabelMask::new(h, w, labels).expect("buffer matches size"),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Vec<SyntheticImage> {
    (0..spec.images)
        .map(|i| {
            let mut r = rng::stream(spec.seed, "synthetic", i as u64);
            match spec.kind {
                SyntheticKind::Geometric => geometric(&mut r, spec.height, spec.width, None),
                SyntheticKind::Imbalanced { minority_fraction } => {
                    geometric(&mut r, spec.height, spec.width, Some(minority_fraction))
                }
                SyntheticKind::Unlearnable => unlearnable(&mut r, spec.height, spec.width, i),
            }
        })
        .collect()
}

/// Generates and preprocesses in memory.
pub fn dataset<T: Scalar>(spec: &SyntheticSpec, taxonomy: &ClassTaxonomy) -> Result<Dataset<T>, TrainError> {
    if taxonomy.num_classes() != CLASSES {
        return Err(TrainError::Config(format!(
            "synthetic data has {CLASSES} classes, taxonomy has {}",
            taxonomy.num_classes()
        )));
    }
    let pre = spec.preprocess();
    let samples = generate(spec)
        .into_iter()
        .map(|s| preprocess_images::<T>(&DynamicImage::ImageLuma8(s.image), &s.mask, &pre))
        .collect::<Result<Vec<_>, _>>()?;
    let id = format!("synthetic-{}-{}", spec.seed, spec.images);
    Dataset::from_samples(id, samples, vec![spec.split; spec.images], taxonomy.clone())
}

/// Writes `images/` and `labels/` PNGs plus `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest, IngestError> {
    let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| IngestError::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(spec.images);
    for (i, s) in generate(spec).into_iter().enumerate() {
        let stem = format!("synth_{i:05}");
        let img_path = img_dir.join(format!("{stem}.png"));
        s.image.save(&img_path).map_err(|e| IngestError::CorruptFile {
            path: img_path.clone(),
            reason: e.to_string(),
        })?;
        s.mask.save(&lbl_dir.join(format!("{stem}.png")))?;
        entries.push(TerrainSample {
            image_ref: format!("images/{stem}.png"),
            mask_ref: format!("labels/{stem}.png"),
            domain: spec.domain,
            split: spec.split,
            sol: None,
            channels: Channels::Gray,
        });
    }
    let manifest = DatasetManifest::sorted(format!("synthetic-{}", spec.seed), TaxonomyVariant::FourClass, entries)
        .with_seed(spec.seed)
        .with_base_dir(dir);
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Fraction of labeled pixels per class.
pub fn class_fractions(images: &[SyntheticImage]) -> Vec<f64> {
    let mut counts = [0u64; CLASSES];
    for s in images {
        for &v in s.mask.values() {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::make_taxonomy;

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::new(SyntheticKind::Geometric, 3, 32, 7);
        assert_eq!(generate(&spec), generate(&spec));
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate(&spec), generate(&other));
    }

    #[test]
    fn geometric_uses_every_class() {
        let imgs = generate(&SyntheticSpec::new(SyntheticKind::Geometric, 32, 64, 1));
        assert!(class_fractions(&imgs).iter().all(|&f| f > 0.05));
    }

    #[test]
    fn imbalanced_minority_is_about_one_percent() {
        let imgs = generate(&SyntheticSpec::new(SyntheticKind::Imbalanced { minority_fraction: 0.01 }, 32, 64, 1));
        let f = class_fractions(&imgs);
        assert!((0.008..0.016).contains(&f[3]), "{f:?}");
        // Intensities of minority pixels overlap the background band.
        let mut minority = Vec::new();
        for s in &imgs {
            for (i, &l) in s.mask.values().iter().enumerate() {
                if l == 3 {
                    minority.push(s.image.as_raw()[i] as f64 / 255.0);
                }
            }
        }
        let mean = minority.iter().sum::<f64>() / minority.len() as f64;
        assert!((mean - CLASS_MEAN[0]).abs() < 0.02);
    }

    #[test]
    fn unlearnable_is_balanced() {
        let imgs = generate(&SyntheticSpec::new(SyntheticKind::Unlearnable, 8, 16, 1));
        assert!(class_fractions(&imgs).iter().all(|&f| (f - 0.25).abs() < 1e-12));
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(SyntheticKind::Geometric, 4, 16, 2);
        let m = write_dataset(dir.path(), &spec).unwrap();
        let back = DatasetManifest::read(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m, back);
        let tax = make_taxonomy(TaxonomyVariant::FourClass);
        let from_files = Dataset::<f32>::from_manifest(back, tax.clone(), spec.preprocess(), false).unwrap();
        let in_memory = dataset::<f32>(&spec, &tax).unwrap();
        for i in 0..4 {
            let a = from_files.sample(i).unwrap();
            let b = in_memory.sample(i).unwrap();
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
        }
    }
}

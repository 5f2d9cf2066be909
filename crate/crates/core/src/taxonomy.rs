//! Class taxonomy, label masks and terrain sample descriptors.
//!
//! Masks store one byte per pixel: a dense class index `0..C` or the ignore
//! sentinel `255` for null, insufficient-consensus and masked-out pixels.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ingest::DatasetManifest;

/// Sentinel for pixels excluded from losses and metrics.
pub const IGNORE_VALUE: u8 = 255;

const FOUR_CLASS_NAMES: [&str; 4] = ["soil", "bedrock", "sand", "big_rock"];
const SIX_CLASS_NAMES: [&str; 6] = ["soil", "bedrock", "sand", "big_rock", "rover", "background"];

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("INVALID_LABEL_VALUE: {offending_pixels} pixel(s) carry values outside the taxonomy {histogram:?}")]
    InvalidLabelValue {
        /// offending value -> pixel count
        histogram: BTreeMap<u8, u64>,
        offending_pixels: u64,
    },
    #[error("mask buffer holds {actual} values, expected {expected}")]
    MaskSize { expected: usize, actual: usize },
    #[error("mask shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("CORRUPT_FILE {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("unknown {what} `{value}`")]
    UnknownTag { what: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyVariant {
    FourClass,
    SixClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    variant: TaxonomyVariant,
    classes: Vec<String>,
    ignore_value: u8,
}

/// Builds the four-class terrain taxonomy or its six-class extension with
/// `rover` and `background` appended.
pub fn make_taxonomy(variant: TaxonomyVariant) -> ClassTaxonomy {
    let names: &[&str] = match variant {
        TaxonomyVariant::FourClass => &FOUR_CLASS_NAMES,
        TaxonomyVariant::SixClass => &SIX_CLASS_NAMES,
    };
    ClassTaxonomy {
        variant,
        classes: names.iter().map(|s| s.to_string()).collect(),
        ignore_value: IGNORE_VALUE,
    }
}

impl ClassTaxonomy {
    pub fn variant(&self) -> TaxonomyVariant {
        self.variant
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ignore_value(&self) -> u8 {
        self.ignore_value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        self.classes.iter().position(|c| *c == key)
    }

    /// Title-cased name, e.g. `big_rock` -> `Big Rock`.
    pub fn display_name(&self, index: usize) -> String {
        display_name(&self.classes[index])
    }

    pub fn is_valid_label(&self, value: u8) -> bool {
        value == self.ignore_value || (value as usize) < self.classes.len()
    }
}

pub fn display_name(snake: &str) -> String {
    snake
        .split('_')
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<String>>()
        .join(" ")
}

impl FromStr for TaxonomyVariant {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "four_class" | "4" => Ok(Self::FourClass),
            "six_class" | "6" => Ok(Self::SixClass),
            other => Err(TaxonomyError::UnknownTag {
                what: "taxonomy variant",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for TaxonomyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FourClass => "four_class",
            Self::SixClass => "six_class",
        })
    }
}

/// Per-pixel class indices for one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, TaxonomyError> {
        if values.len() != height * width {
            return Err(TaxonomyError::MaskSize {
                expected: height * width,
                actual: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn ignored_count(&self, ignore_value: u8) -> u64 {
        self.values.iter().filter(|&&v| v == ignore_value).count() as u64
    }

    /// Reads an 8-bit single-channel raster.
    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let corrupt = |reason: String| TaxonomyError::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::open(path).map_err(|e| corrupt(e.to_string()))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(corrupt(format!(
                    "mask must be single-channel 8-bit, found {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        Self::new(h as usize, w as usize, gray.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("mask buffer matches dimensions");
        img.save(path).map_err(|e| TaxonomyError::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Accepts the mask iff every value is a class index or the ignore sentinel.
pub fn validate_mask(mask: &LabelMask, taxonomy: &ClassTaxonomy) -> Result<(), TaxonomyError> {
    let mut histogram = BTreeMap::new();
    for &v in mask.values() {
        if !taxonomy.is_valid_label(v) {
            *histogram.entry(v).or_insert(0u64) += 1;
        }
    }
    if histogram.is_empty() {
        Ok(())
    } else {
        let offending_pixels = histogram.values().sum();
        Err(TaxonomyError::InvalidLabelValue {
            histogram,
            offending_pixels,
        })
    }
}

/// Folds the rover and range (beyond-30 m) masks into a terrain mask.
///
/// Flagged pixels (any nonzero value) take precedence background > rover >
/// terrain. Under the four-class taxonomy they become ignore pixels.
pub fn apply_auxiliary_masks(
    terrain: &mut LabelMask,
    rover: Option<&LabelMask>,
    range: Option<&LabelMask>,
    taxonomy: &ClassTaxonomy,
) -> Result<(), TaxonomyError> {
    let six = taxonomy.variant() == TaxonomyVariant::SixClass;
    let (rover_label, background_label) = if six {
        (
            taxonomy.index_of("rover").expect("six-class has rover") as u8,
            taxonomy.index_of("background").expect("six-class has background") as u8,
        )
    } else {
        (taxonomy.ignore_value(), taxonomy.ignore_value())
    };
    for (aux, label) in [(rover, rover_label), (range, background_label)] {
        let Some(aux) = aux else { continue };
        if aux.dims() != terrain.dims() {
            return Err(TaxonomyError::ShapeMismatch {
                left: terrain.dims(),
                right: aux.dims(),
            });
        }
        for (t, &flag) in terrain.values.iter_mut().zip(aux.values()) {
            if flag != 0 {
                *t = label;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Msl,
    M2020,
}

impl Domain {
    /// Raw `(height, width)` of the mission's navigation-camera frames.
    pub fn native_resolution(self) -> (usize, usize) {
        match self {
            Domain::Msl => (1024, 1024),
            Domain::M2020 => (960, 1280),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Gray,
    Color,
}

macro_rules! tag_enum {
    ($ty:ty, $what:literal, $($variant:path => $tag:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $tag),+ })
            }
        }

        impl FromStr for $ty {
            type Err = TaxonomyError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($tag => Ok($variant),)+
                    other => Err(TaxonomyError::UnknownTag { what: $what, value: other.to_string() }),
                }
            }
        }
    };
}

tag_enum!(Domain, "domain", Domain::Msl => "msl", Domain::M2020 => "m2020");
tag_enum!(Split, "split", Split::Train => "train", Split::Test => "test");
tag_enum!(Channels, "channel mode", Channels::Gray => "gray", Channels::Color => "color");

/// One image/mask pair plus its bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TerrainSample {
    pub image_ref: String,
    pub mask_ref: String,
    pub domain: Domain,
    pub split: Split,
    pub sol: Option<u32>,
    pub channels: Channels,
}

impl TerrainSample {
    pub fn is_trainable(&self) -> bool {
        self.split == Split::Train
    }
}

/// Per-class labeled pixel counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
    pub ignored: u64,
    /// Samples that could not be read or failed validation.
    pub skipped: usize,
    #[serde(default)]
    pub failures: Vec<String>,
}

impl ClassHistogram {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
            ..Default::default()
        }
    }

    pub fn labeled(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_mask(&mut self, mask: &LabelMask, taxonomy: &ClassTaxonomy) -> Result<(), TaxonomyError> {
        validate_mask(mask, taxonomy)?;
        for &v in mask.values() {
            if v == taxonomy.ignore_value() {
                self.ignored += 1;
            } else {
                self.counts[v as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassHistogram) {
        assert_eq!(self.counts.len(), other.counts.len(), "histogram class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        self.skipped += other.skipped;
        self.failures.extend(other.failures.iter().cloned());
    }

    /// Index of the most frequent class, `None` when nothing is labeled.
    pub fn modal_class(&self) -> Option<usize> {
        if self.labeled() == 0 {
            return None;
        }
        self.counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

/// Counts labeled pixels per class over every mask in the manifest.
///
/// Unreadable or invalid masks are skipped and reported in the result.
pub fn class_pixel_histogram(manifest: &DatasetManifest, taxonomy: &ClassTaxonomy) -> ClassHistogram {
    let mut hist = ClassHistogram::zeros(taxonomy.num_classes());
    for entry in manifest.entries() {
        let path = manifest.resolve(&entry.mask_ref);
        let outcome = LabelMask::load(&path).and_then(|m| {
            let mut local = ClassHistogram::zeros(taxonomy.num_classes());
            local.add_mask(&m, taxonomy).map(|_| local)
        });
        match outcome {
            Ok(local) => hist.merge(&local),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.mask_ref);
                hist.skipped += 1;
                hist.failures.push(format!("{}: {e}", entry.mask_ref));
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_class_order_and_sentinel() {
        let t = make_taxonomy(TaxonomyVariant::FourClass);
        assert_eq!(t.classes(), ["soil", "bedrock", "sand", "big_rock"]);
        assert_eq!(t.num_classes(), 4);
        assert_eq!(t.ignore_value(), 255);
        assert!(t.ignore_value() as usize >= t.num_classes());
    }

    #[test]
    fn six_class_appends_rover_and_background() {
        let t = make_taxonomy(TaxonomyVariant::SixClass);
        assert_eq!(t.num_classes(), 6);
        assert_eq!(t.index_of("rover"), Some(4));
        assert_eq!(t.index_of("background"), Some(5));
        assert_eq!(t.index_of("Big Rock"), Some(3));
        assert_eq!(t.display_name(3), "Big Rock");
    }

    #[test]
    fn validate_all_ignore_is_ok() {
        let m = LabelMask::filled(3, 3, IGNORE_VALUE);
        for v in [TaxonomyVariant::FourClass, TaxonomyVariant::SixClass] {
            assert!(validate_mask(&m, &make_taxonomy(v)).is_ok());
        }
    }

    #[test]
    fn validate_rover_value_depends_on_taxonomy() {
        let m = LabelMask::new(1, 3, vec![0, 4, 4]).unwrap();
        match validate_mask(&m, &make_taxonomy(TaxonomyVariant::FourClass)) {
            Err(TaxonomyError::InvalidLabelValue {
                histogram,
                offending_pixels,
            }) => {
                assert_eq!(offending_pixels, 2);
                assert_eq!(histogram.get(&4), Some(&2));
            }
            other => panic!("expected INVALID_LABEL_VALUE, got {other:?}"),
        }
        assert!(validate_mask(&m, &make_taxonomy(TaxonomyVariant::SixClass)).is_ok());
    }

    #[test]
    fn histogram_of_small_mask() {
        let t = make_taxonomy(TaxonomyVariant::FourClass);
        let m = LabelMask::new(2, 2, vec![0, 0, 2, IGNORE_VALUE]).unwrap();
        let mut h = ClassHistogram::zeros(4);
        h.add_mask(&m, &t).unwrap();
        assert_eq!(h.counts, vec![2, 0, 1, 0]);
        assert_eq!(h.ignored, 1);
        assert_eq!(h.labeled() + h.ignored, 4);
    }

    #[test]
    fn auxiliary_mask_precedence() {
        let six = make_taxonomy(TaxonomyVariant::SixClass);
        let mut terrain = LabelMask::new(1, 4, vec![0, 1, 2, 3]).unwrap();
        let rover = LabelMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let range = LabelMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        apply_auxiliary_masks(&mut terrain, Some(&rover), Some(&range), &six).unwrap();
        assert_eq!(terrain.values(), &[0, 4, 5, 5]);

        let four = make_taxonomy(TaxonomyVariant::FourClass);
        let mut terrain = LabelMask::new(1, 4, vec![0, 1, 2, 3]).unwrap();
        apply_auxiliary_masks(&mut terrain, Some(&rover), Some(&range), &four).unwrap();
        assert_eq!(terrain.values(), &[0, 255, 255, 255]);
    }

    #[test]
    fn tags_parse() {
        assert_eq!("MSL".parse::<Domain>().unwrap(), Domain::Msl);
        assert_eq!("m2020".parse::<Domain>().unwrap(), Domain::M2020);
        assert!("mars".parse::<Domain>().is_err());
        assert_eq!("six-class".parse::<TaxonomyVariant>().unwrap(), TaxonomyVariant::SixClass);
    }
}

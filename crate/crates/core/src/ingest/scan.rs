use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use walkdir::WalkDir;

use super::{DatasetManifest, IngestError};
use crate::taxonomy::{Channels, Domain, Split, TaxonomyVariant, TerrainSample};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MASK_EXTENSIONS: [&str; 1] = ["png"];

/// Published corpus sizes, used to sanity-check scans.
pub fn expected_count(domain: Domain, split: Split) -> usize {
    match (domain, split) {
        (Domain::Msl, Split::Train) => 16_064,
        (Domain::Msl, Split::Test) => 322,
        (Domain::M2020, Split::Train) => 1_321,
        (Domain::M2020, Split::Test) => 49,
    }
}

/// Layout of a dataset root.
#[derive(Clone, Debug)]
pub struct ScanOptions {
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    /// Suffixes stripped from mask stems before pairing, e.g. `_merged`.
    pub mask_suffixes: Vec<String>,
    pub taxonomy_variant: TaxonomyVariant,
    /// When set, refs are written relative to this directory.
    pub ref_base: Option<PathBuf>,
    pub dataset_id: Option<String>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            image_dir: PathBuf::from("images"),
            mask_dir: PathBuf::from("labels"),
            mask_suffixes: vec!["_merged".to_string()],
            taxonomy_variant: TaxonomyVariant::FourClass,
            ref_base: None,
            dataset_id: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    /// Images without a mask (MISSING_MASK).
    pub missing_masks: Vec<String>,
    /// Masks without an image (MISSING_IMAGE).
    pub missing_images: Vec<String>,
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn collect_by_stem(dir: &Path, exts: &[&str], suffixes: &[String]) -> Result<BTreeMap<String, PathBuf>, IngestError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
            IngestError::io(&path, e.into())
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || !has_ext(path, exts) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mut key = stem.to_string();
        for suffix in suffixes {
            if let Some(stripped) = key.strip_suffix(suffix.as_str()) {
                key = stripped.to_string();
                break;
            }
        }
        if let Some(prev) = out.get(&key) {
            log::warn!("duplicate stem `{key}`: keeping {} over {}", Path::display(prev), path.display());
            continue;
        }
        out.insert(key, path.to_path_buf());
    }
    Ok(out)
}

fn detect_channels(path: &Path) -> Result<Channels, IngestError> {
    use image::ImageDecoder;
    let corrupt = |reason: String| IngestError::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| IngestError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| IngestError::io(path, e))?;
    let decoder = reader.into_decoder().map_err(|e| corrupt(e.to_string()))?;
    Ok(if decoder.color_type().has_color() {
        Channels::Color
    } else {
        Channels::Gray
    })
}

fn reference(path: &Path, base: Option<&Path>) -> String {
    let rel = base.and_then(|b| path.strip_prefix(b).ok()).unwrap_or(path);
    rel.to_string_lossy().replace('\\', "/")
}

/// Pairs images and masks by file stem under `root`.
///
/// Entries are sorted by image ref. Unpaired files are reported in the
/// outcome; zero pairs is an error.
pub fn scan_dataset(root: &Path, domain: Domain, split: Split, options: &ScanOptions) -> Result<ScanOutcome, IngestError> {
    if !root.is_dir() {
        return Err(IngestError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let images = collect_by_stem(&root.join(&options.image_dir), &IMAGE_EXTENSIONS, &[])?;
    let masks = collect_by_stem(&root.join(&options.mask_dir), &MASK_EXTENSIONS, &options.mask_suffixes)?;

    let missing_masks: Vec<String> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .map(|(_, p)| p.display().to_string())
        .collect();
    let missing_images: Vec<String> = masks
        .iter()
        .filter(|(k, _)| !images.contains_key(*k))
        .map(|(_, p)| p.display().to_string())
        .collect();

    let pairs: Vec<(&PathBuf, &PathBuf)> = images
        .iter()
        .filter_map(|(k, img)| masks.get(k).map(|m| (img, m)))
        .collect();
    if pairs.is_empty() {
        return Err(IngestError::EmptyDataset(root.to_path_buf()));
    }

    let base = options.ref_base.as_deref();
    let entries = pairs
        .par_iter()
        .map(|(img, mask)| {
            Ok(TerrainSample {
                image_ref: reference(img, base),
                mask_ref: reference(mask, base),
                domain,
                split,
                sol: None,
                channels: detect_channels(img)?,
            })
        })
        .collect::<Result<Vec<_>, IngestError>>()?;

    for m in &missing_masks {
        log::warn!("MISSING_MASK {m}");
    }
    for m in &missing_images {
        log::warn!("MISSING_IMAGE {m}");
    }
    let expected = expected_count(domain, split);
    if entries.len() != expected {
        log::info!("{domain}/{split}: scanned {} pairs (full corpus has {expected})", entries.len());
    }

    let id = options
        .dataset_id
        .clone()
        .unwrap_or_else(|| format!("{domain}_{split}"));
    let mut manifest = DatasetManifest::sorted(id, options.taxonomy_variant, entries);
    if let Some(b) = base {
        manifest = manifest.with_base_dir(b);
    }
    Ok(ScanOutcome {
        manifest,
        missing_masks,
        missing_images,
    })
}

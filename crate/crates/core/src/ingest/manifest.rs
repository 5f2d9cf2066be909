use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::IngestError;
use crate::rng::GENERATOR_NAME;
use crate::taxonomy::{Domain, Split, TaxonomyVariant, TerrainSample};

const HEADER_TAG: &str = "#mixseg-manifest-v1";
const COLUMNS: &str = "image_ref\tmask_ref\tdomain\tsplit\tsol\tchannels";

/// Ordered list of samples with a digest over the entry list.
///
/// The digest covers entries only, so relabelling a manifest (id, seed,
/// location) never changes it.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    dataset_id: String,
    taxonomy_variant: TaxonomyVariant,
    entries: Vec<TerrainSample>,
    content_hash: String,
    seed: Option<u64>,
    base_dir: Option<PathBuf>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.dataset_id == other.dataset_id
            && self.taxonomy_variant == other.taxonomy_variant
            && self.entries == other.entries
            && self.content_hash == other.content_hash
            && self.seed == other.seed
    }
}

fn sol_field(sol: Option<u32>) -> String {
    sol.map_or_else(|| "-".to_string(), |s| s.to_string())
}

fn entry_line(e: &TerrainSample) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        e.image_ref,
        e.mask_ref,
        e.domain,
        e.split,
        sol_field(e.sol),
        e.channels
    )
}

pub fn hash_entries(entries: &[TerrainSample]) -> String {
    let mut hasher = Sha256::new();
    for e in entries {
        hasher.update(entry_line(e).as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

impl DatasetManifest {
    /// Entries are kept in the given order; use [`DatasetManifest::sorted`]
    /// for the canonical lexicographic order.
    pub fn new(dataset_id: impl Into<String>, taxonomy_variant: TaxonomyVariant, entries: Vec<TerrainSample>) -> Self {
        let content_hash = hash_entries(&entries);
        Self {
            dataset_id: dataset_id.into(),
            taxonomy_variant,
            entries,
            content_hash,
            seed: None,
            base_dir: None,
        }
    }

    pub fn sorted(dataset_id: impl Into<String>, taxonomy_variant: TaxonomyVariant, mut entries: Vec<TerrainSample>) -> Self {
        entries.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        Self::new(dataset_id, taxonomy_variant, entries)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn with_dataset_id(mut self, id: impl Into<String>) -> Self {
        self.dataset_id = id.into();
        self
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn taxonomy_variant(&self) -> TaxonomyVariant {
        self.taxonomy_variant
    }

    pub fn entries(&self) -> &[TerrainSample] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Absolute refs are returned as-is, relative ones are joined onto the
    /// base directory when one is set.
    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn count_domain(&self, domain: Domain) -> usize {
        self.entries.iter().filter(|e| e.domain == domain).count()
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn domain_entries(&self, domain: Domain) -> Vec<TerrainSample> {
        self.entries.iter().filter(|e| e.domain == domain).cloned().collect()
    }

    /// Entry-list concatenation. The base directory of the first part is kept.
    pub fn concat(dataset_id: impl Into<String>, parts: &[&DatasetManifest]) -> Self {
        let variant = parts.first().map_or(TaxonomyVariant::FourClass, |p| p.taxonomy_variant);
        let entries = parts.iter().flat_map(|p| p.entries.iter().cloned()).collect();
        let mut m = Self::new(dataset_id, variant, entries);
        m.base_dir = parts.first().and_then(|p| p.base_dir.clone());
        m
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{HEADER_TAG}\tdataset_id={}\ttaxonomy_variant={}",
            self.dataset_id, self.taxonomy_variant
        );
        if let Some(seed) = self.seed {
            let _ = write!(out, "\tseed={seed}\tgenerator={GENERATOR_NAME}");
        }
        let _ = writeln!(out, "\tcontent_hash={}", self.content_hash);
        let _ = writeln!(out, "#{COLUMNS}");
        for e in &self.entries {
            out.push_str(&entry_line(e));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let perr = |line: usize, reason: String| IngestError::Parse { line, reason };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty manifest".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(HEADER_TAG) {
            return Err(perr(1, format!("expected header starting with `{HEADER_TAG}`")));
        }
        let mut dataset_id = None;
        let mut variant = None;
        let mut seed = None;
        let mut declared_hash = None;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| perr(1, format!("header field `{field}` is not key=value")))?;
            match key {
                "dataset_id" => dataset_id = Some(value.to_string()),
                "taxonomy_variant" => {
                    variant = Some(value.parse::<TaxonomyVariant>().map_err(|e| perr(1, e.to_string()))?)
                }
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| perr(1, format!("seed: {e}")))?),
                "content_hash" => declared_hash = Some(value.to_string()),
                "generator" => {}
                other => return Err(perr(1, format!("unknown header key `{other}`"))),
            }
        }
        let dataset_id = dataset_id.ok_or_else(|| perr(1, "missing dataset_id".into()))?;
        let variant = variant.ok_or_else(|| perr(1, "missing taxonomy_variant".into()))?;

        let mut entries = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(perr(lineno, format!("expected 6 tab-separated fields, found {}", cols.len())));
            }
            let bad = |e: crate::taxonomy::TaxonomyError| perr(lineno, e.to_string());
            let sol = match cols[4] {
                "-" | "" => None,
                s => Some(s.parse::<u32>().map_err(|e| perr(lineno, format!("sol: {e}")))?),
            };
            entries.push(TerrainSample {
                image_ref: cols[0].to_string(),
                mask_ref: cols[1].to_string(),
                domain: cols[2].parse().map_err(bad)?,
                split: cols[3].parse().map_err(bad)?,
                sol,
                channels: cols[5].parse().map_err(bad)?,
            });
        }
        let mut manifest = Self::new(dataset_id, variant, entries);
        manifest.seed = seed;
        if let Some(h) = declared_hash {
            if h != manifest.content_hash {
                log::warn!(
                    "manifest `{}` declares content_hash {h} but entries hash to {}",
                    manifest.dataset_id,
                    manifest.content_hash
                );
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| IngestError::io(path, e))
    }

    /// Reads a manifest; its directory becomes the base for relative refs.
    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let m = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m.with_base_dir(base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Channels;
    use proptest::prelude::*;

    fn sample(i: usize, domain: Domain) -> TerrainSample {
        TerrainSample {
            image_ref: format!("images/{i:05}.png"),
            mask_ref: format!("labels/{i:05}.png"),
            domain,
            split: Split::Train,
            sol: if i.is_multiple_of(2) { Some(i as u32) } else { None },
            channels: Channels::Gray,
        }
    }

    #[test]
    fn single_entry_file_has_one_record() {
        let m = DatasetManifest::new("one", TaxonomyVariant::FourClass, vec![sample(3, Domain::Msl)]);
        let text = m.to_text();
        let records: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(records, vec!["images/00003.png\tlabels/00003.png\tmsl\ttrain\t-\tgray"]);
    }

    #[test]
    fn bad_domain_tag_reports_line() {
        let m = DatasetManifest::new("x", TaxonomyVariant::FourClass, vec![sample(0, Domain::Msl), sample(1, Domain::Msl)]);
        let text = m.to_text().replacen("\tmsl\t", "\tmars\t", 2).replacen("\tmars\t", "\tmsl\t", 1);
        match DatasetManifest::parse(&text) {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected PARSE_ERROR, got {other:?}"),
        }
    }

    #[test]
    fn hash_ignores_id_but_tracks_entries() {
        let a = DatasetManifest::new("a", TaxonomyVariant::FourClass, vec![sample(0, Domain::Msl)]);
        let b = DatasetManifest::new("b", TaxonomyVariant::FourClass, vec![sample(0, Domain::Msl)]);
        let c = DatasetManifest::new("a", TaxonomyVariant::FourClass, vec![sample(1, Domain::Msl)]);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    proptest! {
        #[test]
        fn text_roundtrip(ids in proptest::collection::vec(0usize..10_000, 0..40), seed in proptest::option::of(any::<u64>()), m2020 in any::<bool>()) {
            let domain = if m2020 { Domain::M2020 } else { Domain::Msl };
            let entries: Vec<_> = ids.iter().map(|&i| sample(i, domain)).collect();
            let mut m = DatasetManifest::new("prop", TaxonomyVariant::SixClass, entries);
            if let Some(s) = seed { m = m.with_seed(s); }
            let back = DatasetManifest::parse(&m.to_text()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}

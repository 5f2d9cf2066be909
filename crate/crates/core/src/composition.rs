//! Mixed-domain training sets and stratified label-fraction subsets.
//!
//! Each domain pool is shuffled once per seed with its own named stream and
//! samplers take prefixes of that order, so subsets drawn with the same seed
//! are nested as the requested size grows.

use std::collections::HashSet;

use crate::ingest::DatasetManifest;
use crate::rng;
use crate::taxonomy::{Domain, Split, TerrainSample};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CompositionError {
    #[error("INSUFFICIENT_SOURCE: {domain} pool has {available} images, {requested} requested")]
    InsufficientSource {
        domain: Domain,
        requested: usize,
        available: usize,
    },
    #[error("proportion {0} is outside [0, 1]")]
    InvalidProportion(f64),
    #[error("label fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("{m2020_count} M2020 images exceed the cap of {cap}")]
    CapExceeded { cap: usize, m2020_count: usize },
    #[error("ZERO_SAMPLE: fraction {0} selects no images")]
    ZeroSample(f64),
    #[error("DUPLICATE_SEED: seed {0} listed more than once")]
    DuplicateSeed(u64),
    #[error("seed list is empty")]
    NoSeeds,
    #[error("source manifest `{manifest}` contains a {found} entry ({image_ref}); expected {expected}")]
    WrongDomain {
        manifest: String,
        expected: Domain,
        found: Domain,
        image_ref: String,
    },
    #[error("source manifest `{manifest}` contains test entry {image_ref}; test samples are never trainable")]
    TestSampleInPool { manifest: String, image_ref: String },
    #[error("no source pools given")]
    NoSources,
}

/// `floor(x + 1/2)` after snapping values within 1e-9 of a half-integer,
/// so products such as `0.3 * 5` still round up.
pub fn round_half_up(x: f64) -> usize {
    let snapped = (x * 2.0).round();
    let y = if (x * 2.0 - snapped).abs() < 1e-9 { snapped / 2.0 } else { x };
    (y + 0.5).floor().max(0.0) as usize
}

/// Recipe for a capped mixed-domain training set.
#[derive(Clone, Copy, Debug)]
pub struct CompositionSpec<'a> {
    pub cap: usize,
    pub m2020_proportion: f64,
    pub seed: u64,
    pub source_msl: &'a DatasetManifest,
    pub source_m2020: &'a DatasetManifest,
}

/// Per-domain counts `(m2020, msl)` emitted for a cap and proportion.
pub fn mixed_counts(cap: usize, proportion: f64, m2020_pool: usize, msl_pool: usize) -> Result<(usize, usize), CompositionError> {
    if !(0.0..=1.0).contains(&proportion) || proportion.is_nan() {
        return Err(CompositionError::InvalidProportion(proportion));
    }
    let m2020 = round_half_up(proportion * m2020_pool as f64);
    if m2020 > cap {
        return Err(CompositionError::CapExceeded { cap, m2020_count: m2020 });
    }
    let msl = cap - m2020;
    if msl > msl_pool {
        return Err(CompositionError::InsufficientSource {
            domain: Domain::Msl,
            requested: msl,
            available: msl_pool,
        });
    }
    Ok((m2020, msl))
}

fn checked_pool(manifest: &DatasetManifest, domain: Domain) -> Result<Vec<TerrainSample>, CompositionError> {
    for e in manifest.entries() {
        if e.split == Split::Test {
            return Err(CompositionError::TestSampleInPool {
                manifest: manifest.dataset_id().to_string(),
                image_ref: e.image_ref.clone(),
            });
        }
        if e.domain != domain {
            return Err(CompositionError::WrongDomain {
                manifest: manifest.dataset_id().to_string(),
                expected: domain,
                found: e.domain,
                image_ref: e.image_ref.clone(),
            });
        }
    }
    Ok(manifest.entries().to_vec())
}

/// The seed-specific order of a domain pool; samplers take prefixes of it.
pub fn shuffled_pool(pool: &[TerrainSample], domain: Domain, seed: u64) -> Vec<TerrainSample> {
    let mut v = pool.to_vec();
    rng::shuffle(&mut rng::stream(seed, &format!("pool/{domain}"), 0), &mut v);
    v
}

fn finish(id: String, template: &DatasetManifest, mut entries: Vec<TerrainSample>, seed: u64, label: &str) -> DatasetManifest {
    rng::shuffle(&mut rng::stream(seed, label, 0), &mut entries);
    let mut m = DatasetManifest::new(id, template.taxonomy_variant(), entries).with_seed(seed);
    if let Some(base) = template.base_dir() {
        m = m.with_base_dir(base);
    }
    m
}

/// Draws `round(p * |M2020|)` M2020 images and fills the cap with MSL.
pub fn compose_mixed(spec: &CompositionSpec<'_>) -> Result<DatasetManifest, CompositionError> {
    let m2020_pool = checked_pool(spec.source_m2020, Domain::M2020)?;
    let msl_pool = checked_pool(spec.source_msl, Domain::Msl)?;
    let (n_m2020, n_msl) = mixed_counts(spec.cap, spec.m2020_proportion, m2020_pool.len(), msl_pool.len())?;

    let mut entries = shuffled_pool(&m2020_pool, Domain::M2020, spec.seed);
    entries.truncate(n_m2020);
    let mut msl = shuffled_pool(&msl_pool, Domain::Msl, spec.seed);
    msl.truncate(n_msl);
    entries.extend(msl);

    let id = format!("mixed_cap{}_p{}_seed{}", spec.cap, spec.m2020_proportion, spec.seed);
    Ok(finish(id, spec.source_msl, entries, spec.seed, "compose/order"))
}

/// One manifest per seed; seeds must be distinct.
pub fn seed_sweep(base: &CompositionSpec<'_>, seeds: &[u64]) -> Result<Vec<DatasetManifest>, CompositionError> {
    if seeds.is_empty() {
        return Err(CompositionError::NoSeeds);
    }
    let mut seen = HashSet::new();
    for &s in seeds {
        if !seen.insert(s) {
            return Err(CompositionError::DuplicateSeed(s));
        }
    }
    seeds
        .iter()
        .map(|&seed| compose_mixed(&CompositionSpec { seed, ..*base }))
        .collect()
}

/// Stratified subset of one or two single-domain pools.
#[derive(Clone, Debug)]
pub struct LabelFractionSpec<'a> {
    pub fraction: f64,
    pub seed: u64,
    pub sources: Vec<&'a DatasetManifest>,
}

/// Per-pool counts for a label fraction.
///
/// The total is `round_half_up(f * sum)`. Smaller pools receive
/// `round_half_up(total * share)` and the largest pool takes the remainder,
/// which keeps every pool's count non-decreasing in `f`.
pub fn stratified_counts(fraction: f64, pool_sizes: &[usize]) -> Result<Vec<usize>, CompositionError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CompositionError::InvalidFraction(fraction));
    }
    if pool_sizes.is_empty() {
        return Err(CompositionError::NoSources);
    }
    let sum: usize = pool_sizes.iter().sum();
    let total = round_half_up(fraction * sum as f64);
    if total == 0 {
        return Err(CompositionError::ZeroSample(fraction));
    }
    let largest = pool_sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("nonempty");
    let mut counts = vec![0; pool_sizes.len()];
    let mut assigned = 0;
    for (i, &size) in pool_sizes.iter().enumerate() {
        if i != largest {
            let c = round_half_up(total as f64 * size as f64 / sum as f64).min(size);
            counts[i] = c;
            assigned += c;
        }
    }
    counts[largest] = (total - assigned).min(pool_sizes[largest]);
    Ok(counts)
}

pub fn sample_label_fraction(spec: &LabelFractionSpec<'_>) -> Result<DatasetManifest, CompositionError> {
    if spec.sources.is_empty() {
        return Err(CompositionError::NoSources);
    }
    let mut pools = Vec::with_capacity(spec.sources.len());
    for m in &spec.sources {
        let domain = m.entries().first().map_or(Domain::Msl, |e| e.domain);
        pools.push((domain, checked_pool(m, domain)?));
    }
    let sizes: Vec<usize> = pools.iter().map(|(_, p)| p.len()).collect();
    let counts = stratified_counts(spec.fraction, &sizes)?;
    let mut entries = Vec::with_capacity(counts.iter().sum());
    for ((domain, pool), n) in pools.iter().zip(counts) {
        let mut order = shuffled_pool(pool, *domain, spec.seed);
        order.truncate(n);
        entries.extend(order);
    }
    let id = format!("fraction{}_seed{}", spec.fraction, spec.seed);
    Ok(finish(id, spec.sources[0], entries, spec.seed, "fraction/order"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{Channels, TaxonomyVariant};
    use proptest::prelude::*;

    pub(crate) fn pool(domain: Domain, n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| TerrainSample {
                image_ref: format!("{domain}/img{i:05}.png"),
                mask_ref: format!("{domain}/mask{i:05}.png"),
                domain,
                split: Split::Train,
                sol: None,
                channels: Channels::Gray,
            })
            .collect();
        DatasetManifest::new(format!("{domain}_train"), TaxonomyVariant::FourClass, entries)
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_half_up(660.5), 661);
        assert_eq!(round_half_up(330.25), 330);
        assert_eq!(round_half_up(990.75), 991);
        assert_eq!(round_half_up(0.3 * 5.0), 2);
        assert_eq!(round_half_up(0.0), 0);
    }

    #[test]
    fn degenerate_proportions() {
        let msl = pool(Domain::Msl, 2000);
        let m20 = pool(Domain::M2020, 1321);
        for (p, want_m20) in [(0.0, 0), (1.0, 1321)] {
            let m = compose_mixed(&CompositionSpec {
                cap: 1321,
                m2020_proportion: p,
                seed: 3,
                source_msl: &msl,
                source_m2020: &m20,
            })
            .unwrap();
            assert_eq!(m.len(), 1321);
            assert_eq!(m.count_domain(Domain::M2020), want_m20);
            assert_eq!(m.count_domain(Domain::Msl), 1321 - want_m20);
        }
    }

    #[test]
    fn insufficient_msl_pool() {
        let msl = pool(Domain::Msl, 100);
        let m20 = pool(Domain::M2020, 1321);
        let err = compose_mixed(&CompositionSpec {
            cap: 1321,
            m2020_proportion: 0.5,
            seed: 0,
            source_msl: &msl,
            source_m2020: &m20,
        })
        .unwrap_err();
        assert!(matches!(err, CompositionError::InsufficientSource { domain: Domain::Msl, .. }));
    }

    #[test]
    fn test_entries_rejected() {
        let msl = pool(Domain::Msl, 10);
        let mut entries = pool(Domain::M2020, 10).entries().to_vec();
        entries[4].split = Split::Test;
        let m20 = DatasetManifest::new("bad", TaxonomyVariant::FourClass, entries);
        let err = compose_mixed(&CompositionSpec {
            cap: 10,
            m2020_proportion: 0.5,
            seed: 0,
            source_msl: &msl,
            source_m2020: &m20,
        })
        .unwrap_err();
        assert!(matches!(err, CompositionError::TestSampleInPool { .. }));
    }

    #[test]
    fn seed_sweep_rules() {
        let msl = pool(Domain::Msl, 1321);
        let m20 = pool(Domain::M2020, 1321);
        let base = CompositionSpec {
            cap: 1321,
            m2020_proportion: 0.25,
            seed: 0,
            source_msl: &msl,
            source_m2020: &m20,
        };
        assert_eq!(seed_sweep(&base, &[7, 7]).unwrap_err(), CompositionError::DuplicateSeed(7));
        assert_eq!(seed_sweep(&base, &[]).unwrap_err(), CompositionError::NoSeeds);
        let two = seed_sweep(&base, &[1, 2]).unwrap();
        for m in &two {
            assert_eq!(m.count_domain(Domain::M2020), 330);
        }
        assert_ne!(two[0].content_hash(), two[1].content_hash());
        let one = seed_sweep(&base, &[9]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], compose_mixed(&CompositionSpec { seed: 9, ..base }).unwrap());
    }

    #[test]
    fn zero_sample_fraction() {
        assert_eq!(stratified_counts(0.001, &[100, 10]).unwrap_err(), CompositionError::ZeroSample(0.001));
        assert!(matches!(stratified_counts(0.0, &[100]), Err(CompositionError::InvalidFraction(_))));
        assert!(matches!(stratified_counts(1.5, &[100]), Err(CompositionError::InvalidFraction(_))));
    }

    #[test]
    fn full_fraction_returns_union() {
        let msl = pool(Domain::Msl, 300);
        let m20 = pool(Domain::M2020, 40);
        let m = sample_label_fraction(&LabelFractionSpec {
            fraction: 1.0,
            seed: 1,
            sources: vec![&msl, &m20],
        })
        .unwrap();
        assert_eq!(m.len(), 340);
        let mut refs: Vec<_> = m.entries().iter().map(|e| e.image_ref.clone()).collect();
        refs.sort();
        refs.dedup();
        assert_eq!(refs.len(), 340);
    }

    proptest! {
        #[test]
        fn counts_monotone_in_fraction(a in 1u32..=1000, b in 1u32..=1000, msl in 50usize..3000, m20 in 1usize..400) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f1 = lo as f64 / 1000.0;
            let f2 = hi as f64 / 1000.0;
            if let (Ok(c1), Ok(c2)) = (stratified_counts(f1, &[msl, m20]), stratified_counts(f2, &[msl, m20])) {
                prop_assert!(c1[0] <= c2[0] && c1[1] <= c2[1]);
                prop_assert!(c1[0] <= msl && c1[1] <= m20);
            }
        }

        #[test]
        fn mixed_compose_counts_and_no_duplicates(cap in 1usize..200, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let msl = pool(Domain::Msl, 250);
            let m20 = pool(Domain::M2020, 120);
            let spec = CompositionSpec { cap, m2020_proportion: p, seed, source_msl: &msl, source_m2020: &m20 };
            match compose_mixed(&spec) {
                Ok(m) => {
                    let want = round_half_up(p * 120.0);
                    prop_assert_eq!(m.count_domain(Domain::M2020), want);
                    prop_assert_eq!(m.len(), cap);
                    let uniq: HashSet<_> = m.entries().iter().map(|e| &e.image_ref).collect();
                    prop_assert_eq!(uniq.len(), cap);
                }
                Err(CompositionError::CapExceeded { .. }) => prop_assert!(round_half_up(p * 120.0) > cap),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}

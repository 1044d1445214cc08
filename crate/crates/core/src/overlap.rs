//! Cross-catalog set statistics over a [`MembershipMap`].

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::catalog::{
    validate_order, CatalogId, CatalogSnapshot, MembershipMap, ModelError, NormalizedUrl,
    OverlapReport, ProbeOutcome, ProbeRecord,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlapError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no probe record for {url} (catalog {catalog})")]
    MissingProbe { catalog: String, url: String },
    #[error("specificity is undefined for an empty membership map")]
    Empty,
}

/// Builds the membership map. With `reachable_only`, a catalog contributes
/// the comparison keys of those of its probe URLs whose probe was
/// `Reachable`; otherwise it contributes all its strong entries.
pub fn build_membership(
    snapshots: &[CatalogSnapshot],
    reachable_only: bool,
    probes: &[ProbeRecord],
) -> Result<MembershipMap, OverlapError> {
    let order: Vec<CatalogId> = snapshots.iter().map(|s| s.catalog.clone()).collect();
    validate_order(&order)?;
    let by_url: HashMap<&str, &ProbeRecord> =
        probes.iter().map(|r| (r.probe_url.as_str(), r)).collect();

    let mut entries: BTreeMap<NormalizedUrl, u32> = BTreeMap::new();
    for (bit, snap) in snapshots.iter().enumerate() {
        if reachable_only {
            for url in &snap.entries_simple {
                let record =
                    by_url
                        .get(url.as_str())
                        .ok_or_else(|| OverlapError::MissingProbe {
                            catalog: snap.catalog.id().to_string(),
                            url: url.clone(),
                        })?;
                if record.outcome == ProbeOutcome::Reachable {
                    *entries.entry(record.normalized.clone()).or_default() |= 1 << bit;
                }
            }
        } else {
            for key in &snap.entries_strong {
                *entries.entry(key.clone()).or_default() |= 1 << bit;
            }
        }
    }
    Ok(MembershipMap::new(order, entries)?)
}

/// Count of keys per distinct nonzero mask present in the data.
pub fn venn_regions(map: &MembershipMap) -> BTreeMap<u32, u64> {
    let mut regions = BTreeMap::new();
    for &mask in map.entries().values() {
        *regions.entry(mask).or_default() += 1;
    }
    regions
}

/// Every one of the 2^k − 1 regions in mask order, zeros included.
pub fn full_regions(map: &MembershipMap) -> Vec<(u32, u64)> {
    let regions = venn_regions(map);
    (1..=map.full_mask())
        .map(|mask| (mask, regions.get(&mask).copied().unwrap_or(0)))
        .collect()
}

/// Common-key counts for each catalog pair (zero diagonal) and each catalog's
/// own size.
pub fn pairwise_matrix(map: &MembershipMap) -> (Vec<Vec<u64>>, Vec<u64>) {
    let k = map.catalog_order().len();
    let mut matrix = vec![vec![0u64; k]; k];
    let mut totals = vec![0u64; k];
    for (mask, count) in venn_regions(map) {
        let bits: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        for &i in &bits {
            totals[i] += count;
            for &j in &bits {
                if i != j {
                    matrix[i][j] += count;
                }
            }
        }
    }
    (matrix, totals)
}

/// `num / den` rounded half away from zero to two decimals, computed on
/// integers so that exact halves are not lost to binary floating point.
pub fn round_ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let hundredths = (200 * num as u128 + den as u128) / (2 * den as u128);
    hundredths as f64 / 100.0
}

/// Row-normalized ratios: `R[i][j] = M[i][j] / totals[i]`, rounded to two
/// decimals; rows with a zero total are all zero. Not symmetric.
pub fn ratio_matrix(pairwise: &[Vec<u64>], totals: &[u64]) -> Vec<Vec<f64>> {
    pairwise
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &m)| {
                    if i == j {
                        0.0
                    } else {
                        round_ratio(m, totals[i])
                    }
                })
                .collect()
        })
        .collect()
}

/// Share and number of keys listed by exactly one catalog.
pub fn specificity(map: &MembershipMap) -> Result<(f64, u64), OverlapError> {
    if map.is_empty() {
        return Err(OverlapError::Empty);
    }
    let count = map
        .entries()
        .values()
        .filter(|m| m.count_ones() == 1)
        .count() as u64;
    Ok((count as f64 / map.len() as f64, count))
}

/// Drops one catalog: its bit is removed from every mask, keys left with no
/// catalog disappear, and higher bits shift down.
pub fn exclude_catalog(map: &MembershipMap, excluded: &str) -> Result<MembershipMap, OverlapError> {
    let pos = map
        .catalog_order()
        .iter()
        .position(|c| c.id() == excluded)
        .ok_or_else(|| ModelError::UnknownCatalog(excluded.to_string()))?;
    let low = (1u32 << pos) - 1;
    let entries = map
        .entries()
        .iter()
        .filter_map(|(key, &mask)| {
            let cleared = mask & !(1 << pos);
            let compact = (cleared & low) | ((cleared >> 1) & !low);
            (compact != 0).then(|| (key.clone(), compact))
        })
        .collect();
    let mut order = map.catalog_order().to_vec();
    order.remove(pos);
    Ok(MembershipMap::new(order, entries)?)
}

/// Keys present in every catalog, ascending.
pub fn all_common(map: &MembershipMap) -> (u64, Vec<NormalizedUrl>) {
    let full = map.full_mask();
    if full == 0 {
        return (0, Vec::new());
    }
    let keys: Vec<NormalizedUrl> = map
        .entries()
        .iter()
        .filter(|(_, &m)| m == full)
        .map(|(k, _)| k.clone())
        .collect();
    (keys.len() as u64, keys)
}

/// Runs every statistic. An empty map yields a specificity of zero.
pub fn analyze(map: &MembershipMap) -> OverlapReport {
    let region_counts = venn_regions(map);
    let (pairwise, per_catalog_total) = pairwise_matrix(map);
    let ratio = ratio_matrix(&pairwise, &per_catalog_total);
    let (specificity_fraction, specificity_count) = specificity(map).unwrap_or((0.0, 0));
    let (all_common_count, all_common) = all_common(map);
    OverlapReport {
        catalog_order: map.catalog_order().to_vec(),
        total_distinct: map.len() as u64,
        region_counts,
        pairwise,
        per_catalog_total,
        ratio,
        specificity_fraction,
        specificity_count,
        all_common_count,
        all_common,
    }
}

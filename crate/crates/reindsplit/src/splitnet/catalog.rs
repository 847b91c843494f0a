//! Split-point catalog: cut placement and per-cut resource/time costs.

use crate::config::CostEntry;
use crate::error::{Error, Result};

use super::NetworkSpec;

/// One selectable cut: how many layers run client-side, what the client
/// segment requires, and the fraction of total compute it carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEntry {
    /// Number of client-side layers.
    pub cut_layer: usize,
    pub r_req: f64,
    pub t_req: f64,
    pub load_fraction: f64,
}

/// The K split choices, ordered by split index (1-based accessors).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCatalog {
    entries: Vec<SplitEntry>,
}

impl SplitCatalog {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    /// Entry for 1-based split index.
    pub fn entry(&self, split: usize) -> Result<&SplitEntry> {
        if split == 0 || split > self.entries.len() {
            return Err(Error::Shape(format!(
                "split index {split} outside [1, {}]",
                self.entries.len()
            )));
        }
        Ok(&self.entries[split - 1])
    }

    pub fn entries(&self) -> &[SplitEntry] {
        &self.entries
    }

    /// Fraction of total model compute executed client-side under `split`.
    pub fn client_load(&self, split: usize) -> Result<f64> {
        Ok(self.entry(split)?.load_fraction)
    }

    fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[0].cut_layer >= pair[1].cut_layer {
                return Err(Error::Config(
                    "catalog cut layers must strictly increase".into(),
                ));
            }
            if pair[0].load_fraction >= pair[1].load_fraction {
                return Err(Error::Config(
                    "catalog load fractions must strictly increase".into(),
                ));
            }
            if pair[0].r_req >= pair[1].r_req || pair[0].t_req >= pair[1].t_req {
                return Err(Error::Config("catalog costs must strictly increase".into()));
            }
        }
        let last = self.entries.last().expect("nonempty catalog");
        if last.load_fraction > 1.0 {
            return Err(Error::Config("load fraction above 1".into()));
        }
        Ok(())
    }
}

/// Derive K cuts from the architecture: split k places `ceil(k*L/(K+1))`
/// layers client-side, the load fraction is the client share of
/// multiply-accumulates, and costs map linearly onto the capacity range:
/// `req = low + (high - low) * load`.
pub fn catalog_cuts(spec: &NetworkSpec, k: usize, capacity_range: [f64; 2]) -> Result<SplitCatalog> {
    catalog_with_overrides(spec, k, capacity_range, None)
}

/// Same as [`catalog_cuts`] but with an explicit cost table taking the place
/// of the linear map. Table entries may also override the load fraction.
pub fn catalog_with_overrides(
    spec: &NetworkSpec,
    k: usize,
    capacity_range: [f64; 2],
    cost_table: Option<&[CostEntry]>,
) -> Result<SplitCatalog> {
    spec.validate()?;
    if k < 1 {
        return Err(Error::Config("catalog needs at least one split".into()));
    }
    let depth = spec.depth();
    if k > depth - 1 {
        return Err(Error::Config(format!(
            "K = {k} exceeds L - 1 = {} for a {depth}-layer network",
            depth - 1
        )));
    }
    if let Some(table) = cost_table {
        if table.len() != k {
            return Err(Error::Config(format!(
                "cost table has {} entries for K = {k}",
                table.len()
            )));
        }
    }

    let macs = spec.mac_counts();
    let total: u64 = macs.iter().sum();
    let [low, high] = capacity_range;

    let mut entries = Vec::with_capacity(k);
    for split in 1..=k {
        let cut_layer = (split * depth).div_ceil(k + 1);
        let client_macs: u64 = macs[..cut_layer].iter().sum();
        let mut load_fraction = client_macs as f64 / total as f64;
        let (r_req, t_req) = match cost_table {
            Some(table) => {
                let e = table[split - 1];
                if let Some(f) = e.load_fraction {
                    load_fraction = f;
                }
                (e.r_req, e.t_req)
            }
            None => {
                let cost = low + (high - low) * load_fraction;
                (cost, cost)
            }
        };
        entries.push(SplitEntry {
            cut_layer,
            r_req,
            t_req,
            load_fraction,
        });
    }

    let catalog = SplitCatalog { entries };
    catalog.validate()?;
    Ok(catalog)
}

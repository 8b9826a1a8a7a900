use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::smiles::{canonical, parse_smiles, strip_atom_maps, write, BranchOrder, MolGraph};

/// A mapped reaction. Every product atom map also occurs in the reactants;
/// reactant atoms without a partner are leaving groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionRecord {
    pub product: MolGraph,
    pub reactants: MolGraph,
}

impl ReactionRecord {
    /// `reactants>>product`, or `reactants>reagents>product` with the
    /// reagents ignored.
    pub fn parse(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.trim().split('>').collect();
        let (lhs, rhs) = match parts.as_slice() {
            [l, _, r] => (*l, *r),
            _ => return Err(format!("expected `reactants>>product`, found {} fields", parts.len())),
        };
        let reactants = parse_smiles(lhs).map_err(|e| format!("reactants: {e}"))?;
        let product = parse_smiles(rhs).map_err(|e| format!("product: {e}"))?;
        let maps: HashSet<u32> = reactants.atoms.iter().filter_map(|a| a.atom_map).collect();
        if let Some(m) = product.atoms.iter().filter_map(|a| a.atom_map).find(|m| !maps.contains(m)) {
            return Err(format!("product atom map {m} has no reactant partner"));
        }
        Ok(ReactionRecord { product, reactants })
    }

    /// The mapped line form read by [`ReactionRecord::parse`].
    pub fn to_line(&self) -> Result<String, TrainError> {
        let w = |g: &MolGraph| -> Result<String, TrainError> {
            if g.is_empty() {
                return Ok(String::new());
            }
            Ok(write(g, 0, &BranchOrder::Input)?)
        };
        Ok(format!("{}>>{}", w(&self.reactants)?, w(&self.product)?))
    }

    /// Canonical product, maps removed.
    pub fn product_key(&self) -> String {
        canonical(&strip_atom_maps(&self.product))
    }

    /// Canonical reactant set, maps removed.
    pub fn reactant_key(&self) -> String {
        canonical(&strip_atom_maps(&self.reactants))
    }
}

/// Parsed records plus the lines that were skipped, as `(line number, reason)`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<ReactionRecord>,
    pub malformed: Vec<(usize, String)>,
}

/// Reject a file when more than this share of its lines is malformed.
pub const MAX_MALFORMED: f64 = 0.10;

pub fn parse_dataset(text: &str) -> Result<Dataset, TrainError> {
    let mut ds = Dataset::default();
    let mut lines = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match ReactionRecord::parse(line) {
            Ok(r) => ds.records.push(r),
            Err(e) => ds.malformed.push((i + 1, e)),
        }
    }
    if ds.malformed.len() as f64 > MAX_MALFORMED * lines as f64 {
        let mut msg = format!("{} of {} lines are malformed", ds.malformed.len(), lines);
        for (n, e) in ds.malformed.iter().take(5) {
            let _ = write!(msg, "; line {n}: {e}");
        }
        return Err(TrainError::Dataset(msg));
    }
    for (n, e) in &ds.malformed {
        log::warn!("skipping line {n}: {e}");
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, TrainError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn dataset_text(records: &[ReactionRecord]) -> Result<String, TrainError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[ReactionRecord]) -> Result<(), TrainError> {
    std::fs::write(path, dataset_text(records)?)?;
    Ok(())
}

/// Hex SHA-256 of a byte string; used to fingerprint datasets in manifests.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

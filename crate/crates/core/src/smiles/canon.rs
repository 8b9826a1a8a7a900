use std::collections::BTreeMap;

use super::writer::{write, BranchOrder};
use super::{BondStereo, MolGraph};

/// Canonical SMILES: components are canonicalized separately, sorted and
/// joined with `.`.
pub fn canonical(graph: &MolGraph) -> String {
    let mut parts: Vec<String> = graph.components().iter().map(|c| canonical_connected(&graph.subgraph(c))).collect();
    parts.sort();
    parts.join(".")
}

fn canonical_connected(g: &MolGraph) -> String {
    let colors = refine(g, &atom_invariants(g));
    let mut best: Option<String> = None;
    search(g, colors, &mut best);
    best.unwrap_or_default()
}

/// Dense ranks of the per-atom properties that appear in the written form.
fn atom_invariants(g: &MolGraph) -> Vec<u32> {
    let keys: Vec<_> = (0..g.len())
        .map(|i| {
            let a = &g.atoms[i];
            (
                a.element,
                a.isotope,
                a.charge,
                a.aromatic,
                g.hydrogen_count(i),
                g.degree(i),
                a.chirality.is_some(),
                a.atom_map,
            )
        })
        .collect();
    dense_ranks(&keys)
}

pub(crate) fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<u32> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    let index: BTreeMap<&K, u32> = sorted.iter().enumerate().map(|(i, k)| (k, i as u32)).collect();
    keys.iter().map(|k| index[k]).collect()
}

/// Iterated neighbourhood refinement until the partition is stable. The
/// result only splits classes of `initial`, never merges them.
pub(crate) fn refine(g: &MolGraph, initial: &[u32]) -> Vec<u32> {
    let adj = g.adjacency();
    let mut colors = dense_ranks(initial);
    let mut classes = count_classes(&colors);
    loop {
        let sigs: Vec<(u32, Vec<(u8, bool, u32)>)> = (0..g.len())
            .map(|u| {
                let mut nb: Vec<(u8, bool, u32)> = adj[u]
                    .iter()
                    .map(|&b| {
                        let bond = &g.bonds[b];
                        (bond.order as u8, bond.stereo != BondStereo::None, colors[bond.other(u)])
                    })
                    .collect();
                nb.sort_unstable();
                (colors[u], nb)
            })
            .collect();
        let next = dense_ranks(&sigs);
        let n = count_classes(&next);
        colors = next;
        if n == classes {
            return colors;
        }
        classes = n;
    }
}

fn count_classes(colors: &[u32]) -> usize {
    colors.iter().copied().max().map_or(0, |m| m as usize + 1)
}

/// Individualization-refinement over the first ambiguous class; every
/// discrete leaf is written and the least string kept.
fn search(g: &MolGraph, colors: Vec<u32>, best: &mut Option<String>) {
    let n = g.len();
    if count_classes(&colors) == n {
        let root = colors.iter().position(|&c| c == 0).expect("discrete partition has rank 0");
        let order = BranchOrder::Priority(colors.iter().map(|&c| c as u64).collect());
        let s = write(g, root, &order).expect("root is a valid atom");
        if best.as_ref().is_none_or(|b| s < *b) {
            *best = Some(s);
        }
        return;
    }
    let mut size = vec![0usize; n];
    for &c in &colors {
        size[c as usize] += 1;
    }
    let target = (0..n).find(|&c| size[c] > 1).expect("non-discrete partition has a repeated class") as u32;
    for x in (0..n).filter(|&a| colors[a] == target) {
        let split: Vec<u32> = (0..n).map(|a| 2 * colors[a] + u32::from(a != x)).collect();
        search(g, refine(g, &split), best);
    }
}

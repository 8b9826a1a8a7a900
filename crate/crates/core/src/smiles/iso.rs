use super::canon::{dense_ranks, refine};
use super::MolGraph;

/// Graph isomorphism preserving element, charge, isotope, aromaticity,
/// hydrogen count and bond order. Atom maps and stereo markers are ignored.
pub fn is_isomorphic(a: &MolGraph, b: &MolGraph) -> bool {
    if a.len() != b.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let n = a.len();
    // Refine both graphs together so that colours are comparable.
    let joint = a.union(b);
    let keys: Vec<_> = (0..joint.len())
        .map(|i| {
            let at = &joint.atoms[i];
            (at.element, at.charge, at.isotope, at.aromatic, joint.hydrogen_count(i))
        })
        .collect();
    let mut plain = joint.clone();
    for bond in &mut plain.bonds {
        bond.stereo = super::BondStereo::None;
    }
    let colors = refine(&plain, &dense_ranks(&keys));
    let (ca, cb) = colors.split_at(n);
    let mut sa = ca.to_vec();
    let mut sb = cb.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb {
        return false;
    }

    let bond_a = bond_table(a);
    let bond_b = bond_table(b);
    let adj_a = neighbors(a);
    // Match atoms in breadth-first order so each new atom touches mapped ones.
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    for start in 0..n {
        if placed[start] {
            continue;
        }
        placed[start] = true;
        order.push(start);
        let mut i = order.len() - 1;
        while i < order.len() {
            for &v in &adj_a[order[i]] {
                if !placed[v] {
                    placed[v] = true;
                    order.push(v);
                }
            }
            i += 1;
        }
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    extend(0, &order, ca, cb, &bond_a, &bond_b, &adj_a, &mut map, &mut used)
}

type BondTable = std::collections::HashMap<(usize, usize), super::BondOrder>;

fn bond_table(g: &MolGraph) -> BondTable {
    g.bonds.iter().flat_map(|b| [((b.a, b.b), b.order), ((b.b, b.a), b.order)]).collect()
}

fn neighbors(g: &MolGraph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.len()];
    for b in &g.bonds {
        adj[b.a].push(b.b);
        adj[b.b].push(b.a);
    }
    adj
}

#[allow(clippy::too_many_arguments)]
fn extend(
    depth: usize,
    order: &[usize],
    ca: &[u32],
    cb: &[u32],
    bond_a: &BondTable,
    bond_b: &BondTable,
    adj_a: &[Vec<usize>],
    map: &mut [usize],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let u = order[depth];
    for v in 0..cb.len() {
        if used[v] || cb[v] != ca[u] {
            continue;
        }
        // Degrees agree through the colours, so checking bonds to already
        // mapped neighbours of `u` is enough to catch missing ones on `v`'s
        // side once every atom is placed.
        let consistent = adj_a[u].iter().filter(|&&w| map[w] != usize::MAX).all(|&w| {
            bond_b.get(&(v, map[w])) == bond_a.get(&(u, w))
        });
        if !consistent {
            continue;
        }
        map[u] = v;
        used[v] = true;
        if extend(depth + 1, order, ca, cb, bond_a, bond_b, adj_a, map, used) {
            return true;
        }
        map[u] = usize::MAX;
        used[v] = false;
    }
    false
}

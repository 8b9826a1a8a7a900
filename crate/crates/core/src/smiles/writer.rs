use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_organic_subset, strip_atom_maps, BondOrder, BondStereo, MolGraph, Neighbor, SmilesError};

/// How neighbours are ordered during the depth-first walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchOrder {
    /// By atom index.
    Input,
    /// By `(priority[atom], atom)`.
    Priority(Vec<u64>),
}

impl BranchOrder {
    fn key(&self, atom: usize) -> (u64, usize) {
        match self {
            BranchOrder::Input => (0, atom),
            BranchOrder::Priority(p) => (p[atom], atom),
        }
    }
}

/// Writes `graph` starting at `root`. Other components follow, each rooted
/// at its first atom under `order`.
pub fn write(graph: &MolGraph, root: usize, order: &BranchOrder) -> Result<String, SmilesError> {
    Ok(write_with_rank(graph, root, order)?.0)
}

/// Uniformly random root and random branch order, drawn from `seed`.
pub fn random_rooted(graph: &MolGraph, seed: u64) -> Result<String, SmilesError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rooted_with(graph, &mut rng)
}

pub fn random_rooted_with<R: Rng>(graph: &MolGraph, rng: &mut R) -> Result<String, SmilesError> {
    if graph.is_empty() {
        return Err(SmilesError::Empty);
    }
    let root = rng.gen_range(0..graph.len());
    let order = BranchOrder::Priority((0..graph.len()).map(|_| rng.gen()).collect());
    write(graph, root, &order)
}

/// Product written from `root` with atom-index branch order, reactants
/// aligned to it. See [`root_align_with`].
pub fn root_align(product: &MolGraph, reactants: &MolGraph, root: usize) -> Result<(String, String), SmilesError> {
    root_align_with(product, reactants, root, &BranchOrder::Input)
}

/// Writes the product from `root`, then the reactants so that the reactant
/// component holding the root's mapped atom comes first, rooted there, and
/// every reactant walk prefers atoms the product visited earlier. Atom maps
/// are dropped from both strings.
pub fn root_align_with(
    product: &MolGraph,
    reactants: &MolGraph,
    root: usize,
    order: &BranchOrder,
) -> Result<(String, String), SmilesError> {
    if root >= product.len() {
        return Err(SmilesError::BadAtom(root));
    }
    let map = product.atoms[root]
        .atom_map
        .ok_or_else(|| SmilesError::Alignment(format!("product root atom {root} is unmapped")))?;
    let r_root = reactants
        .atom_with_map(map)
        .ok_or_else(|| SmilesError::Alignment(format!("map {map} not present in reactants")))?;
    let (p_text, p_rank) = write_with_rank(&strip_atom_maps(product), root, order)?;

    let unmapped_base = product.len() as u64;
    let priority = reactants
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            a.atom_map
                .and_then(|m| product.atom_with_map(m))
                .map_or(unmapped_base + i as u64, |p| p_rank[p] as u64)
        })
        .collect();
    let r_text = write(&strip_atom_maps(reactants), r_root, &BranchOrder::Priority(priority))?;
    Ok((p_text, r_text))
}

/// Writes the graph and returns, for every atom, its position in the
/// emitted atom sequence.
pub(crate) fn write_with_rank(
    graph: &MolGraph,
    root: usize,
    order: &BranchOrder,
) -> Result<(String, Vec<usize>), SmilesError> {
    if root >= graph.len() {
        return Err(SmilesError::BadAtom(root));
    }
    if let BranchOrder::Priority(p) = order {
        if p.len() != graph.len() {
            return Err(SmilesError::BadAtom(p.len()));
        }
    }
    let mut w = Walker::new(graph, order);
    let mut roots = vec![root];
    let mut rest: Vec<usize> = graph
        .components()
        .into_iter()
        .filter(|c| !c.contains(&root))
        .map(|c| c.into_iter().min_by_key(|&a| order.key(a)).expect("components are non-empty"))
        .collect();
    rest.sort_by_key(|&a| order.key(a));
    roots.extend(rest);

    let mut out = String::new();
    for (i, &r) in roots.iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        w.discover(r, None);
        w.finish_rings();
        w.emit(r, None, &mut out);
    }
    Ok((out, w.rank))
}

struct Walker<'g> {
    g: &'g MolGraph,
    adj: Vec<Vec<usize>>,
    order: &'g BranchOrder,
    rank: Vec<usize>,
    next_rank: usize,
    children: Vec<Vec<(usize, usize)>>,
    /// Ring bonds opened at each atom, as `(bond, closing atom)`.
    opens: Vec<Vec<(usize, usize)>>,
    /// Ring bonds closed at each atom, as `(bond, opening atom)`.
    closes: Vec<Vec<(usize, usize)>>,
    ring_seen: Vec<bool>,
    digit_of: Vec<u32>,
    in_use: Vec<bool>,
}

impl<'g> Walker<'g> {
    fn new(g: &'g MolGraph, order: &'g BranchOrder) -> Self {
        let n = g.len();
        Walker {
            g,
            adj: g.adjacency(),
            order,
            rank: vec![usize::MAX; n],
            next_rank: 0,
            children: vec![Vec::new(); n],
            opens: vec![Vec::new(); n],
            closes: vec![Vec::new(); n],
            ring_seen: vec![false; g.bonds.len()],
            digit_of: vec![0; g.bonds.len()],
            in_use: vec![false; 101],
        }
    }

    fn sorted_neighbors(&self, u: usize) -> Vec<(usize, usize)> {
        let mut nb: Vec<(usize, usize)> = self.adj[u].iter().map(|&b| (b, self.g.bonds[b].other(u))).collect();
        nb.sort_by_key(|&(_, v)| self.order.key(v));
        nb
    }

    /// Builds the spanning tree and classifies the remaining bonds as ring
    /// closures.
    fn discover(&mut self, root: usize, parent_bond: Option<usize>) {
        let mut stack = vec![(root, parent_bond, 0usize)];
        self.rank[root] = self.next_rank;
        self.next_rank += 1;
        let mut nbs = vec![self.sorted_neighbors(root)];
        while let Some(&mut (u, pb, ref mut i)) = stack.last_mut() {
            let list = nbs.last().expect("stack and neighbour lists move together");
            if *i == list.len() {
                stack.pop();
                nbs.pop();
                continue;
            }
            let (b, v) = list[*i];
            *i += 1;
            if Some(b) == pb {
                continue;
            }
            if self.rank[v] == usize::MAX {
                self.children[u].push((v, b));
                self.rank[v] = self.next_rank;
                self.next_rank += 1;
                stack.push((v, Some(b), 0));
                nbs.push(self.sorted_neighbors(v));
            } else if !self.ring_seen[b] {
                self.ring_seen[b] = true;
                self.opens[v].push((b, u));
                self.closes[u].push((b, v));
            }
        }
    }

    /// Fixes the order of ring bonds so it depends only on the tree, not on
    /// when each closure happened to be discovered.
    fn finish_rings(&mut self) {
        for list in self.opens.iter_mut().chain(self.closes.iter_mut()) {
            list.sort_by_key(|&(_, partner)| self.rank[partner]);
        }
    }

    fn emit(&mut self, u: usize, parent: Option<(usize, usize)>, out: &mut String) {
        let g = self.g;
        if let Some((p, b)) = parent {
            out.push_str(bond_symbol(g, b, p));
        }

        let bracket = needs_bracket(g, u);
        let mut written: Vec<Neighbor> = Vec::new();
        if let Some((p, _)) = parent {
            written.push(Neighbor::Atom(p));
        }
        if bracket && g.hydrogen_count(u) > 0 {
            written.push(Neighbor::ImplicitH);
        }
        let closes = self.closes[u].clone();
        let opens = self.opens[u].clone();
        written.extend(closes.iter().map(|&(_, v)| Neighbor::Atom(v)));
        written.extend(opens.iter().map(|&(_, v)| Neighbor::Atom(v)));
        written.extend(self.children[u].iter().map(|&(v, _)| Neighbor::Atom(v)));

        out.push_str(&atom_text(g, u, bracket, &written));

        for &(b, _) in &closes {
            push_digit(out, self.digit_of[b]);
        }
        for &(b, _) in &opens {
            let d = (1..self.in_use.len()).find(|&d| !self.in_use[d]).expect("fewer than 100 open rings") as u32;
            self.in_use[d as usize] = true;
            self.digit_of[b] = d;
            out.push_str(bond_symbol(g, b, u));
            push_digit(out, d);
        }
        for &(b, _) in &closes {
            self.in_use[self.digit_of[b] as usize] = false;
        }

        let children = self.children[u].clone();
        let last = children.len().saturating_sub(1);
        for (i, &(v, b)) in children.iter().enumerate() {
            if i < last {
                out.push('(');
                self.emit(v, Some((u, b)), out);
                out.push(')');
            } else {
                self.emit(v, Some((u, b)), out);
            }
        }
    }
}

fn push_digit(out: &mut String, d: u32) {
    if d < 10 {
        out.push(char::from(b'0' + d as u8));
    } else {
        out.push_str(&format!("%{d:02}"));
    }
}

/// Symbol for bond `b` written from atom `from` towards its partner.
fn bond_symbol(g: &MolGraph, b: usize, from: usize) -> &'static str {
    let bond = &g.bonds[b];
    let both_aromatic = g.atoms[bond.a].aromatic && g.atoms[bond.b].aromatic;
    match bond.order {
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => {
            if both_aromatic {
                ""
            } else {
                ":"
            }
        }
        BondOrder::Single => match bond.stereo_from(from) {
            BondStereo::Up => "/",
            BondStereo::Down => "\\",
            BondStereo::None if both_aromatic => "-",
            BondStereo::None => "",
        },
    }
}

fn needs_bracket(g: &MolGraph, u: usize) -> bool {
    let a = &g.atoms[u];
    !is_organic_subset(a.element, a.aromatic)
        || a.charge != 0
        || a.isotope.is_some()
        || a.atom_map.is_some()
        || a.chirality.is_some()
        || a.explicit_h.is_some_and(|h| h as u32 != g.implicit_h(u))
}

fn atom_text(g: &MolGraph, u: usize, bracket: bool, written: &[Neighbor]) -> String {
    let a = &g.atoms[u];
    let sym = if a.aromatic { a.element.to_ascii_lowercase() } else { a.element.to_string() };
    if !bracket {
        return sym;
    }
    let mut s = String::from("[");
    if let Some(iso) = a.isotope {
        s.push_str(&iso.to_string());
    }
    s.push_str(&sym);
    if let Some(ch) = &a.chirality {
        let clockwise = ch.clockwise ^ odd_permutation(&ch.order, written);
        s.push_str(if clockwise { "@@" } else { "@" });
    }
    match g.hydrogen_count(u) {
        0 => {}
        1 => s.push('H'),
        h => s.push_str(&format!("H{h}")),
    }
    match a.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    if let Some(m) = a.atom_map {
        s.push_str(&format!(":{m}"));
    }
    s.push(']');
    s
}

/// Whether `to` is an odd permutation of `from`. Sequences that are not
/// permutations of each other count as even.
fn odd_permutation(from: &[Neighbor], to: &[Neighbor]) -> bool {
    if from.len() != to.len() {
        return false;
    }
    let Some(mut pos) = to.iter().map(|n| from.iter().position(|m| m == n)).collect::<Option<Vec<usize>>>() else {
        return false;
    };
    let mut swaps = 0;
    for i in 0..pos.len() {
        while pos[i] != i {
            let j = pos[i];
            if j >= pos.len() || pos[j] == j {
                return false;
            }
            pos.swap(i, j);
            swaps += 1;
        }
    }
    swaps % 2 == 1
}

#[cfg(test)]
mod tests {
    use super::super::{is_isomorphic, parse_smiles};
    use super::*;

    #[test]
    fn chain_reversal() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(write(&g, 2, &BranchOrder::Input).unwrap(), "OCC");
        assert_eq!(write(&g, 0, &BranchOrder::Input).unwrap(), "CCO");
    }

    #[test]
    fn branches_and_rings_round_trip_from_every_root() {
        for smi in [
            "CC(=O)Oc1ccccc1C(=O)O",
            "C1CC2CCC1CC2",
            "c1ccc2[nH]ccc2c1",
            "N#CC(C)(C)[O-].[Na+]",
            "F/C=C/Cl",
            "C[C@H](N)C(=O)O",
            "C%11CC%11",
            "[13CH3][2H]",
        ] {
            let g = parse_smiles(smi).unwrap();
            for r in 0..g.len() {
                let s = write(&g, r, &BranchOrder::Input).unwrap();
                let back = parse_smiles(&s).unwrap_or_else(|e| panic!("{smi} root {r} wrote {s}: {e}"));
                assert!(is_isomorphic(&g, &back), "{smi} root {r} wrote {s}");
            }
        }
    }

    #[test]
    fn aromatic_single_bond_is_explicit() {
        let g = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        let s = write(&g, 0, &BranchOrder::Input).unwrap();
        assert!(s.contains('-'), "{s}");
        assert!(is_isomorphic(&g, &parse_smiles(&s).unwrap()));
    }

    #[test]
    fn chirality_survives_rerooting() {
        let g = parse_smiles("N[C@@H](C)C(=O)O").unwrap();
        let from_c = write(&g, 2, &BranchOrder::Input).unwrap();
        let back = parse_smiles(&from_c).unwrap();
        // Writing the re-parsed graph from the original root restores the text.
        let n = back.atoms.iter().position(|a| a.element == "N").unwrap();
        assert_eq!(write(&back, n, &BranchOrder::Input).unwrap(), "N[C@@H](C)C(=O)O");
    }

    #[test]
    fn parity() {
        use Neighbor::{Atom as A, ImplicitH as H};
        assert!(!odd_permutation(&[A(0), A(1), A(2)], &[A(1), A(2), A(0)]));
        assert!(odd_permutation(&[A(0), A(1), A(2), H], &[A(1), A(0), A(2), H]));
    }

    #[test]
    fn single_atom_any_seed() {
        let g = parse_smiles("[Na+]").unwrap();
        for seed in 0..5 {
            assert_eq!(random_rooted(&g, seed).unwrap(), "[Na+]");
        }
    }

    #[test]
    fn root_align_rejects_unmapped_root() {
        let p = parse_smiles("[CH3:1]C").unwrap();
        let r = parse_smiles("[CH3:1]Br").unwrap();
        assert!(matches!(root_align(&p, &r, 1), Err(SmilesError::Alignment(_))));
        let r2 = parse_smiles("[CH3:2]Br").unwrap();
        assert!(matches!(root_align(&p, &r2, 0), Err(SmilesError::Alignment(_))));
    }
}

//! Synthetic single-step reactions for desk-scale runs.
//!
//! Products are two small acyclic fragments (carbon chains with branches and
//! ether oxygens) joined through one reactive centre. The retro direction
//! splits the centre and restores the leaving group; atom maps pair every
//! product atom with its reactant copy.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::ReactionRecord;
use crate::smiles::{canonical, strip_atom_maps, Atom, Bond, BondOrder, BondStereo, MolGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// acid + alcohol → ester
    Esterification,
    /// acid + primary amine → amide
    Amidation,
    /// alkyl chloride + primary amine → secondary amine
    Alkylation,
}

pub const TEMPLATES: [Template; 3] = [Template::Esterification, Template::Amidation, Template::Alkylation];

pub const MIN_ATOMS: usize = 4;
pub const MAX_ATOMS: usize = 12;

struct Fragment {
    elements: Vec<&'static str>,
    edges: Vec<(usize, usize)>,
}

/// Random tree of `size` atoms attached through atom 0, which is always
/// carbon. `hub` forces atom 0 to carry at least two branches; `primary`
/// keeps it at one or none.
fn fragment<R: Rng>(rng: &mut R, size: usize, hub: bool, primary: bool) -> Fragment {
    let mut degree = vec![0usize; size];
    let mut edges = Vec::new();
    for i in 1..size {
        let parent = if hub && i <= 2 {
            0
        } else {
            // Atom 0 keeps one slot free for the attachment bond.
            let open: Vec<usize> = (0..i).filter(|&p| degree[p] < if p == 0 { 3 } else { 4 } && !(primary && p == 0 && degree[0] >= 1)).collect();
            *open.choose(rng).expect("a chain always has an open end")
        };
        degree[parent] += 1;
        degree[i] += 1;
        edges.push((parent, i));
    }
    let mut elements = vec!["C"; size];
    for i in 1..size {
        let nbrs: Vec<usize> = edges.iter().filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None }).collect();
        if degree[i] == 2 && nbrs.iter().all(|&n| elements[n] == "C") && rng.gen_bool(0.25) {
            elements[i] = "O";
        }
    }
    Fragment { elements, edges }
}

fn single(a: usize, b: usize) -> Bond {
    Bond { a, b, order: BondOrder::Single, stereo: BondStereo::None }
}

/// Appends a fragment to `g`, returning the index of its attachment atom.
fn place(g: &mut MolGraph, f: &Fragment) -> usize {
    let base = g.len();
    for e in &f.elements {
        g.add_atom(Atom::new(e));
    }
    for &(a, b) in &f.edges {
        g.bonds.push(single(base + a, base + b));
    }
    base
}

/// One mapped reaction drawn from `rng`.
pub fn synth_reaction<R: Rng>(rng: &mut R) -> (Template, ReactionRecord) {
    let template = *TEMPLATES.choose(rng).expect("non-empty");
    let mut product = MolGraph::default();
    // Bond broken in the retro direction, and the atom receiving the
    // leaving group.
    let (cut, leaving_on, leaving) = match template {
        Template::Esterification | Template::Amidation => {
            let (a, b) = loop {
                let (a, b) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
                if a + b + 3 <= MAX_ATOMS {
                    break (a, b);
                }
            };
            let acid = place(&mut product, &fragment(rng, a, false, false));
            let c = product.add_atom(Atom::new("C"));
            let o = product.add_atom(Atom::new("O"));
            let x = product.add_atom(Atom::new(if template == Template::Esterification { "O" } else { "N" }));
            let other = place(&mut product, &fragment(rng, b, false, false));
            product.bonds.push(single(acid, c));
            product.bonds.push(Bond { a: c, b: o, order: BondOrder::Double, stereo: BondStereo::None });
            product.bonds.push(single(c, x));
            product.bonds.push(single(x, other));
            ((c, x), c, "O")
        }
        Template::Alkylation => {
            let (a, b) = loop {
                let (a, b) = (rng.gen_range(3..=6), rng.gen_range(1..=5));
                if a + b + 1 <= MAX_ATOMS {
                    break (a, b);
                }
            };
            let amine = place(&mut product, &fragment(rng, a, true, false));
            let n = product.add_atom(Atom::new("N"));
            let alkyl = place(&mut product, &fragment(rng, b, false, true));
            product.bonds.push(single(amine, n));
            product.bonds.push(single(n, alkyl));
            ((n, alkyl), alkyl, "Cl")
        }
    };

    // Shuffle atom order so the written form does not leak the construction.
    let mut perm: Vec<usize> = (0..product.len()).collect();
    perm.shuffle(rng);
    let (cut, leaving_on) = ((perm[cut.0], perm[cut.1]), perm[leaving_on]);
    let mut product = product.permuted(&perm);
    for (i, a) in product.atoms.iter_mut().enumerate() {
        a.atom_map = Some(i as u32 + 1);
    }

    let mut reactants = product.clone();
    reactants.bonds.retain(|b| (b.a.min(b.b), b.a.max(b.b)) != (cut.0.min(cut.1), cut.0.max(cut.1)));
    let lg = reactants.add_atom(Atom::new(leaving));
    reactants.bonds.push(single(leaving_on, lg));
    (template, ReactionRecord { product, reactants })
}

/// `n` reactions, deterministic in `seed`.
pub fn synth_dataset(n: usize, seed: u64) -> Vec<ReactionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_reaction(&mut rng).1).collect()
}

/// Applies `template` in the forward direction to every matching pair of
/// reactant sites and returns the canonical products. Atom maps are ignored.
pub fn forward_products(template: Template, reactants: &MolGraph) -> BTreeSet<String> {
    let g = strip_atom_maps(reactants);
    let adj = g.adjacency();
    let comp_of = {
        let mut c = vec![0; g.len()];
        for (i, comp) in g.components().iter().enumerate() {
            for &a in comp {
                c[a] = i;
            }
        }
        c
    };
    let nbrs = |a: usize| adj[a].iter().map(|&bi| (g.bonds[bi].other(a), g.bonds[bi].order)).collect::<Vec<_>>();
    let is = |a: usize, el: &str| g.atoms[a].element == el && g.atoms[a].charge == 0;
    let carbonyl = |c: usize| nbrs(c).iter().any(|&(o, ord)| ord == BondOrder::Double && is(o, "O"));

    // (electrophile carbon, leaving atom)
    let mut electrophiles = Vec::new();
    // nucleophile heteroatom
    let mut nucleophiles = Vec::new();
    for a in 0..g.len() {
        let n = nbrs(a);
        match template {
            Template::Esterification | Template::Amidation => {
                if is(a, "C") && carbonyl(a) {
                    for &(o, ord) in &n {
                        if ord == BondOrder::Single && is(o, "O") && g.degree(o) == 1 {
                            electrophiles.push((a, o));
                        }
                    }
                }
                let el = if template == Template::Esterification { "O" } else { "N" };
                if is(a, el) && n.len() == 1 && n[0].1 == BondOrder::Single && is(n[0].0, "C") && !carbonyl(n[0].0) {
                    nucleophiles.push(a);
                }
            }
            Template::Alkylation => {
                if is(a, "Cl") && n.len() == 1 && is(n[0].0, "C") && !carbonyl(n[0].0) {
                    electrophiles.push((n[0].0, a));
                }
                if is(a, "N") && n.len() == 1 && n[0].1 == BondOrder::Single && is(n[0].0, "C") && !carbonyl(n[0].0) {
                    nucleophiles.push(a);
                }
            }
        }
    }

    let mut out = BTreeSet::new();
    for &(e, leaving) in &electrophiles {
        for &nu in &nucleophiles {
            if comp_of[e] == comp_of[nu] {
                continue;
            }
            let mut joined = g.clone();
            joined.bonds.push(single(e, nu));
            let keep: Vec<usize> = (0..g.len()).filter(|&i| i != leaving).collect();
            let joined = joined.subgraph(&keep);
            // The new molecule is the component holding the electrophile.
            let pos = keep.iter().position(|&i| i == e).expect("electrophile kept");
            let comp = joined.components().into_iter().find(|c| c.contains(&pos)).expect("component exists");
            out.insert(canonical(&joined.subgraph(&comp)));
        }
    }
    out
}

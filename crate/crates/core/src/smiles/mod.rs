//! SMILES text, molecular graphs, rooted writing and canonical forms.

mod canon;
mod iso;
mod lexer;
mod parser;
mod vocab;
mod writer;

use thiserror::Error;

pub use canon::canonical;
pub use iso::is_isomorphic;
pub use lexer::{lex, Token, TokenKind};
pub use parser::{parse, parse_smiles};
pub use vocab::{Vocab, DOT, LENGTH, PAD, UNK};
pub use writer::{random_rooted, random_rooted_with, root_align, root_align_with, write, BranchOrder};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnknownChar { ch: char, offset: usize },
    #[error("unterminated bracket atom starting at byte {offset}")]
    UnterminatedBracket { offset: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid bracket atom {text:?} at token {index}")]
    BadBracket { text: String, index: usize },
    #[error("unmatched parenthesis at token {index}")]
    UnmatchedParen { index: usize },
    #[error("ring bond {ring} opened at token {index} never closed")]
    UnclosedRing { ring: u32, index: usize },
    #[error("bond without an atom on both sides at token {index}")]
    DanglingBond { index: usize },
    #[error("ring closure at token {index} would duplicate an existing bond")]
    DuplicateBond { index: usize },
    #[error("atom index {0} out of range")]
    BadAtom(usize),
    #[error("atom map {0} needed for alignment is missing")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the σ+π bond-order sum used for implicit hydrogens.
    fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

/// Double-bond geometry marker, relative to the bond's stored direction
/// `a → b`: `Up` is written `/` when `a` precedes `b` in the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondStereo {
    None,
    Up,
    Down,
}

impl BondStereo {
    pub fn flipped(self) -> Self {
        match self {
            BondStereo::Up => BondStereo::Down,
            BondStereo::Down => BondStereo::Up,
            BondStereo::None => BondStereo::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub stereo: BondStereo,
}

impl Bond {
    pub fn other(&self, x: usize) -> usize {
        if self.a == x {
            self.b
        } else {
            self.a
        }
    }

    /// Stereo marker as seen when travelling `from → other`.
    pub fn stereo_from(&self, from: usize) -> BondStereo {
        if from == self.a {
            self.stereo
        } else {
            self.stereo.flipped()
        }
    }
}

/// A tetrahedral neighbour reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Neighbor {
    Atom(usize),
    ImplicitH,
}

/// Tetrahedral marker: `clockwise` is `@@`. The sense is defined relative to
/// `order`, the neighbour sequence the marker was written against.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chirality {
    pub clockwise: bool,
    pub order: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: &'static str,
    pub aromatic: bool,
    pub charge: i8,
    /// Hydrogen count written inside brackets; `None` for organic-subset
    /// atoms whose hydrogens are implicit.
    pub explicit_h: Option<u8>,
    pub isotope: Option<u16>,
    pub atom_map: Option<u32>,
    pub chirality: Option<Chirality>,
}

impl Atom {
    pub fn new(element: &'static str) -> Self {
        Atom { element, aromatic: false, charge: 0, explicit_h: None, isotope: None, atom_map: None, chirality: None }
    }
}

/// Elements accepted inside brackets.
pub(crate) const ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti",
    "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Mo", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "W", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi",
];

pub(crate) fn intern_element(sym: &str) -> Option<&'static str> {
    ELEMENTS.iter().copied().find(|&e| e == sym)
}

/// Allowed valences of the organic subset, lowest first.
fn default_valences(element: &str) -> &'static [u32] {
    match element {
        "B" => &[3],
        "C" => &[4],
        "N" | "P" => &[3, 5],
        "O" => &[2],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

pub(crate) fn is_organic_subset(element: &str, aromatic: bool) -> bool {
    if aromatic {
        matches!(element, "B" | "C" | "N" | "O" | "P" | "S")
    } else {
        !default_valences(element).is_empty()
    }
}

/// Atoms plus bonds. Multiple disconnected components are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolGraph {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.atoms.len() - 1
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds.iter().find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
    }

    /// Bond indices incident to each atom, in bond order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (i, b) in self.bonds.iter().enumerate() {
            adj[b.a].push(i);
            adj[b.b].push(i);
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    /// Implicit hydrogens from the organic-subset valence table. Bracket
    /// atoms report their written count instead.
    pub fn hydrogen_count(&self, atom: usize) -> u32 {
        let at = &self.atoms[atom];
        if let Some(h) = at.explicit_h {
            return h as u32;
        }
        self.implicit_h(atom)
    }

    pub fn implicit_h(&self, atom: usize) -> u32 {
        let at = &self.atoms[atom];
        let valences = default_valences(at.element);
        if valences.is_empty() {
            return 0;
        }
        let mut sum = 0;
        let mut aromatic_bonds = 0;
        for b in self.bonds.iter().filter(|b| b.a == atom || b.b == atom) {
            sum += b.order.valence();
            if b.order == BondOrder::Aromatic {
                aromatic_bonds += 1;
            }
        }
        if at.aromatic {
            // Ring oxygen and sulfur donate a lone pair and never carry H.
            if matches!(at.element, "O" | "S") {
                return 0;
            }
            if aromatic_bonds > 0 {
                sum += 1;
            }
        }
        valences.iter().find(|&&v| v >= sum).map_or(0, |v| v - sum)
    }

    /// Connected components as sorted atom index lists, ordered by their
    /// smallest atom index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut out = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut i = 0;
            while i < comp.len() {
                let a = comp[i];
                for &bi in &adj[a] {
                    let n = self.bonds[bi].other(a);
                    if !seen[n] {
                        seen[n] = true;
                        comp.push(n);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// The induced subgraph on `atoms`, renumbered in the given order.
    pub fn subgraph(&self, atoms: &[usize]) -> MolGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in atoms.iter().enumerate() {
            map[old] = new;
        }
        let mut g = MolGraph::default();
        for &old in atoms {
            let mut at = self.atoms[old].clone();
            if let Some(ch) = &mut at.chirality {
                ch.order = ch
                    .order
                    .iter()
                    .map(|n| match n {
                        Neighbor::Atom(x) => Neighbor::Atom(map[*x]),
                        Neighbor::ImplicitH => Neighbor::ImplicitH,
                    })
                    .collect();
            }
            g.atoms.push(at);
        }
        for b in &self.bonds {
            if map[b.a] != usize::MAX && map[b.b] != usize::MAX {
                g.bonds.push(Bond { a: map[b.a], b: map[b.b], ..*b });
            }
        }
        g
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let mut inverse = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let mut g = self.subgraph(&inverse);
        g.bonds.sort_by_key(|b| (b.a.min(b.b), b.a.max(b.b)));
        g
    }

    /// Disjoint union; atoms of `other` are appended after `self`'s.
    pub fn union(&self, other: &MolGraph) -> MolGraph {
        let offset = self.atoms.len();
        let mut g = self.clone();
        let shifted = other.subgraph(&(0..other.len()).collect::<Vec<_>>());
        for mut at in shifted.atoms {
            if let Some(ch) = &mut at.chirality {
                for n in &mut ch.order {
                    if let Neighbor::Atom(x) = n {
                        *x += offset;
                    }
                }
            }
            g.atoms.push(at);
        }
        for b in shifted.bonds {
            g.bonds.push(Bond { a: b.a + offset, b: b.b + offset, ..b });
        }
        g
    }

    pub fn atom_with_map(&self, map: u32) -> Option<usize> {
        self.atoms.iter().position(|a| a.atom_map == Some(map))
    }

    /// Checks the structural invariants: valid, distinct endpoints, no
    /// duplicate bonds, aromatic bonds only between aromatic atoms.
    pub fn validate(&self) -> Result<(), SmilesError> {
        let mut seen = std::collections::HashSet::new();
        for b in &self.bonds {
            if b.a >= self.atoms.len() {
                return Err(SmilesError::BadAtom(b.a));
            }
            if b.b >= self.atoms.len() || b.a == b.b {
                return Err(SmilesError::BadAtom(b.b));
            }
            if !seen.insert((b.a.min(b.b), b.a.max(b.b))) {
                return Err(SmilesError::DuplicateBond { index: b.a });
            }
            if b.order == BondOrder::Aromatic && !(self.atoms[b.a].aromatic && self.atoms[b.b].aromatic) {
                return Err(SmilesError::BadAtom(b.a));
            }
        }
        Ok(())
    }
}

/// Clears every atom-map label.
pub fn strip_atom_maps(graph: &MolGraph) -> MolGraph {
    let mut g = graph.clone();
    for a in &mut g.atoms {
        a.atom_map = None;
    }
    g
}

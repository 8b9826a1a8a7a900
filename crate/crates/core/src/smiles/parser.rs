use std::collections::BTreeMap;

use super::lexer::{lex, Token, TokenKind};
use super::{intern_element, Atom, Bond, BondOrder, BondStereo, Chirality, MolGraph, Neighbor, SmilesError};

/// Lex and parse in one step.
pub fn parse_smiles(smiles: &str) -> Result<MolGraph, SmilesError> {
    parse(&lex(smiles)?)
}

#[derive(Clone, Copy)]
struct BondSpec {
    order: BondOrder,
    stereo: BondStereo,
}

fn bond_spec(text: &str) -> BondSpec {
    let (order, stereo) = match text {
        "=" => (BondOrder::Double, BondStereo::None),
        "#" => (BondOrder::Triple, BondStereo::None),
        ":" => (BondOrder::Aromatic, BondStereo::None),
        "/" => (BondOrder::Single, BondStereo::Up),
        "\\" => (BondOrder::Single, BondStereo::Down),
        _ => (BondOrder::Single, BondStereo::None),
    };
    BondSpec { order, stereo }
}

struct OpenRing {
    atom: usize,
    spec: Option<BondSpec>,
    token: usize,
    /// Position in the opening atom's neighbour order reserved for the partner.
    slot: usize,
}

/// Builds a molecular graph from lexer tokens.
pub fn parse(tokens: &[Token]) -> Result<MolGraph, SmilesError> {
    if tokens.is_empty() {
        return Err(SmilesError::Empty);
    }
    let mut g = MolGraph::default();
    let mut order: Vec<Vec<Neighbor>> = Vec::new();
    let mut chiral: Vec<Option<bool>> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondSpec, usize)> = None;
    let mut stack: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();

    for (idx, tok) in tokens.iter().enumerate() {
        match tok.kind {
            TokenKind::Atom | TokenKind::BracketAtom => {
                let (atom, clockwise) = if tok.kind == TokenKind::Atom {
                    (organic_atom(&tok.text), None)
                } else {
                    bracket_atom(&tok.text).ok_or_else(|| SmilesError::BadBracket { text: tok.text.clone(), index: idx })?
                };
                let has_h = atom.explicit_h.is_some_and(|h| h > 0);
                let a = g.add_atom(atom);
                order.push(Vec::new());
                chiral.push(clockwise);
                if let Some(p) = prev {
                    let spec = pending.take().map(|(s, _)| s);
                    add_bond(&mut g, p, a, spec, idx)?;
                    order[p].push(Neighbor::Atom(a));
                    order[a].push(Neighbor::Atom(p));
                } else if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { index: at });
                }
                if has_h {
                    order[a].push(Neighbor::ImplicitH);
                }
                prev = Some(a);
            }
            TokenKind::Bond => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::DanglingBond { index: idx });
                }
                pending = Some((bond_spec(&tok.text), idx));
            }
            TokenKind::BranchOpen => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::UnmatchedParen { index: idx });
                }
                stack.push((prev, idx));
            }
            TokenKind::BranchClose => {
                if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { index: at });
                }
                match stack.pop() {
                    Some((p, _)) => prev = p,
                    None => return Err(SmilesError::UnmatchedParen { index: idx }),
                }
            }
            TokenKind::Ring => {
                let Some(p) = prev else {
                    return Err(SmilesError::DanglingBond { index: idx });
                };
                let num: u32 = tok.text.trim_start_matches('%').parse().map_err(|_| SmilesError::BadBracket {
                    text: tok.text.clone(),
                    index: idx,
                })?;
                let spec = pending.take().map(|(s, _)| s);
                if let Some(open) = rings.remove(&num) {
                    if open.atom == p || g.bond_between(open.atom, p).is_some() {
                        return Err(SmilesError::DuplicateBond { index: idx });
                    }
                    // A symbol at the closing digit is read from the closing
                    // atom towards the opening one.
                    let (a, b, spec) = match (spec, open.spec) {
                        (Some(s), _) => (p, open.atom, Some(s)),
                        (None, s) => (open.atom, p, s),
                    };
                    add_bond(&mut g, a, b, spec, idx)?;
                    order[open.atom][open.slot] = Neighbor::Atom(p);
                    order[p].push(Neighbor::Atom(open.atom));
                } else {
                    order[p].push(Neighbor::ImplicitH); // placeholder, patched on close
                    rings.insert(num, OpenRing { atom: p, spec, token: idx, slot: order[p].len() - 1 });
                }
            }
            TokenKind::Dot => {
                if let Some((_, at)) = pending {
                    return Err(SmilesError::DanglingBond { index: at });
                }
                if let Some(&(_, at)) = stack.last() {
                    return Err(SmilesError::UnmatchedParen { index: at });
                }
                prev = None;
            }
        }
    }
    if let Some((_, at)) = pending {
        return Err(SmilesError::DanglingBond { index: at });
    }
    if let Some(&(_, at)) = stack.last() {
        return Err(SmilesError::UnmatchedParen { index: at });
    }
    if let Some((&ring, open)) = rings.iter().next() {
        return Err(SmilesError::UnclosedRing { ring, index: open.token });
    }
    for (i, cw) in chiral.into_iter().enumerate() {
        if let Some(clockwise) = cw {
            g.atoms[i].chirality = Some(Chirality { clockwise, order: std::mem::take(&mut order[i]) });
        }
    }
    Ok(g)
}

fn add_bond(g: &mut MolGraph, a: usize, b: usize, spec: Option<BondSpec>, idx: usize) -> Result<(), SmilesError> {
    if a == b || g.bond_between(a, b).is_some() {
        return Err(SmilesError::DuplicateBond { index: idx });
    }
    let both_aromatic = g.atoms[a].aromatic && g.atoms[b].aromatic;
    let spec = spec.unwrap_or(BondSpec {
        order: if both_aromatic { BondOrder::Aromatic } else { BondOrder::Single },
        stereo: BondStereo::None,
    });
    let spec = if spec.order == BondOrder::Aromatic && !both_aromatic {
        BondSpec { order: BondOrder::Single, ..spec }
    } else {
        spec
    };
    g.bonds.push(Bond { a, b, order: spec.order, stereo: spec.stereo });
    Ok(())
}

fn organic_atom(text: &str) -> Atom {
    let aromatic = text.chars().next().is_some_and(|c| c.is_ascii_lowercase());
    let sym = if aromatic { text.to_ascii_uppercase() } else { text.to_string() };
    let mut atom = Atom::new(intern_element(&sym).expect("lexer only emits organic-subset symbols"));
    atom.aromatic = aromatic;
    atom
}

/// Parses the inside of `[...]`. Returns the atom and, if present, whether
/// the tetrahedral marker is `@@`.
fn bracket_atom(text: &str) -> Option<(Atom, Option<bool>)> {
    let inner = text.strip_prefix('[')?.strip_suffix(']')?.as_bytes();
    let mut i = 0;
    let digits = |i: &mut usize| -> Option<u32> {
        let start = *i;
        while *i < inner.len() && inner[*i].is_ascii_digit() {
            *i += 1;
        }
        if *i == start {
            None
        } else {
            std::str::from_utf8(&inner[start..*i]).ok()?.parse().ok()
        }
    };

    let isotope = digits(&mut i).map(|v| v as u16);
    if i >= inner.len() || !inner[i].is_ascii_alphabetic() {
        return None;
    }
    // Element: aromatic lowercase forms first, then longest uppercase match.
    let rest = std::str::from_utf8(&inner[i..]).ok()?;
    let (element, aromatic, len) = ["se", "as", "te"]
        .iter()
        .find(|s| rest.starts_with(*s))
        .map(|s| (intern_element(&capitalize(s)), true, 2))
        .or_else(|| {
            let c = inner[i];
            if matches!(c, b'b' | b'c' | b'n' | b'o' | b'p' | b's') {
                Some((intern_element(&(c as char).to_ascii_uppercase().to_string()), true, 1))
            } else {
                None
            }
        })
        .or_else(|| {
            if rest.len() >= 2 && inner[i + 1].is_ascii_lowercase() {
                if let Some(e) = intern_element(&rest[..2]) {
                    return Some((Some(e), false, 2));
                }
            }
            Some((intern_element(&rest[..1]), false, 1))
        })?;
    let element = element?;
    i += len;

    let mut clockwise = None;
    if i < inner.len() && inner[i] == b'@' {
        i += 1;
        clockwise = Some(false);
        if i < inner.len() && inner[i] == b'@' {
            i += 1;
            clockwise = Some(true);
        }
    }
    let mut hcount = 0u8;
    if i < inner.len() && inner[i] == b'H' {
        i += 1;
        hcount = digits(&mut i).unwrap_or(1) as u8;
    }
    let mut charge: i8 = 0;
    if i < inner.len() && (inner[i] == b'+' || inner[i] == b'-') {
        let sign: i8 = if inner[i] == b'+' { 1 } else { -1 };
        let sym = inner[i];
        i += 1;
        let mut mag = 1i8;
        if let Some(n) = digits(&mut i) {
            mag = n as i8;
        } else {
            while i < inner.len() && inner[i] == sym {
                mag += 1;
                i += 1;
            }
        }
        charge = sign * mag;
    }
    let mut atom_map = None;
    if i < inner.len() && inner[i] == b':' {
        i += 1;
        atom_map = Some(digits(&mut i)?);
    }
    if i != inner.len() {
        return None;
    }
    let atom = Atom { element, aromatic, charge, explicit_h: Some(hcount), isotope, atom_map, chirality: None };
    Some((atom, clockwise))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclopropane() {
        let g = parse_smiles("C1CC1").unwrap();
        assert_eq!((g.atoms.len(), g.bonds.len()), (3, 3));
    }

    #[test]
    fn acetic_acid_has_one_double_bond() {
        let g = parse_smiles("CC(=O)O").unwrap();
        assert_eq!(g.atoms.len(), 4);
        let doubles: Vec<_> = g.bonds.iter().filter(|b| b.order == BondOrder::Double).collect();
        assert_eq!(doubles.len(), 1);
        let d = doubles[0];
        assert_eq!((g.atoms[d.a].element, g.atoms[d.b].element), ("C", "O"));
    }

    #[test]
    fn unclosed_ring_is_reported() {
        assert_eq!(parse_smiles("C1CC"), Err(SmilesError::UnclosedRing { ring: 1, index: 1 }));
    }

    #[test]
    fn structural_errors_carry_token_index() {
        assert_eq!(parse_smiles("CC(C"), Err(SmilesError::UnmatchedParen { index: 2 }));
        assert_eq!(parse_smiles("CC)C"), Err(SmilesError::UnmatchedParen { index: 2 }));
        assert_eq!(parse_smiles("CC="), Err(SmilesError::DanglingBond { index: 2 }));
        assert_eq!(parse_smiles("=C"), Err(SmilesError::DanglingBond { index: 0 }));
        assert_eq!(parse_smiles("C11"), Err(SmilesError::DuplicateBond { index: 2 }));
        assert_eq!(parse_smiles("C1C1"), Err(SmilesError::DuplicateBond { index: 3 }));
        assert!(matches!(parse_smiles("[Xx]"), Err(SmilesError::BadBracket { index: 0, .. })));
    }

    #[test]
    fn dot_separates_components() {
        let g = parse_smiles("CCO.CC").unwrap();
        assert_eq!(g.components().len(), 2);
        assert_eq!(g.bonds.len(), 3);
    }

    #[test]
    fn bracket_fields() {
        let g = parse_smiles("[13CH2+:7]").unwrap();
        let a = &g.atoms[0];
        assert_eq!((a.element, a.isotope, a.explicit_h, a.charge, a.atom_map), ("C", Some(13), Some(2), 1, Some(7)));
        let g = parse_smiles("[O--]").unwrap();
        assert_eq!(g.atoms[0].charge, -2);
        let g = parse_smiles("[Fe+3]").unwrap();
        assert_eq!(g.atoms[0].charge, 3);
        let g = parse_smiles("[nH]1cccc1").unwrap();
        assert!(g.atoms[0].aromatic);
        let g = parse_smiles("[se]1cccc1").unwrap();
        assert_eq!(g.atoms[0].element, "Se");
    }

    #[test]
    fn chirality_order_includes_implicit_h_and_ring_slot() {
        let g = parse_smiles("F[C@H]1CC1Cl").unwrap();
        let ch = g.atoms[1].chirality.as_ref().unwrap();
        assert!(!ch.clockwise);
        assert_eq!(
            ch.order,
            vec![Neighbor::Atom(0), Neighbor::ImplicitH, Neighbor::Atom(3), Neighbor::Atom(2)]
        );
    }

    #[test]
    fn stereo_bond_directions() {
        let g = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(g.bonds[0].stereo, BondStereo::Up);
        assert_eq!(g.bonds[2].stereo, BondStereo::Up);
    }
}

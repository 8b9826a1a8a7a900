use differ::smiles::{
    canonical, is_isomorphic, lex, parse_smiles, random_rooted, root_align, strip_atom_maps, write, Atom, Bond,
    BondOrder, BondStereo, BranchOrder, Chirality, MolGraph, Neighbor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random connected graph: a random tree plus a few extra ring bonds,
/// with assorted atom and bond decorations.
fn random_graph(seed: u64, max_atoms: usize) -> MolGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_atoms);
    let elements = ["C", "C", "C", "N", "O", "S", "Cl", "P", "Br"];
    let mut g = MolGraph::default();
    for _ in 0..n {
        let mut a = Atom::new(elements[rng.gen_range(0..elements.len())]);
        if rng.gen_bool(0.1) {
            a.charge = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        if rng.gen_bool(0.05) {
            a.isotope = Some(13);
        }
        if rng.gen_bool(0.1) {
            a.explicit_h = Some(rng.gen_range(0..3));
        }
        g.add_atom(a);
    }
    let add = |g: &mut MolGraph, a: usize, b: usize, rng: &mut ChaCha8Rng| {
        if a == b || g.bond_between(a, b).is_some() {
            return;
        }
        let order = match rng.gen_range(0..10) {
            0 | 1 => BondOrder::Double,
            2 => BondOrder::Triple,
            _ => BondOrder::Single,
        };
        let stereo = if order == BondOrder::Single && rng.gen_bool(0.1) {
            if rng.gen_bool(0.5) {
                BondStereo::Up
            } else {
                BondStereo::Down
            }
        } else {
            BondStereo::None
        };
        g.bonds.push(Bond { a, b, order, stereo });
    };
    for i in 1..n {
        let p = rng.gen_range(0..i);
        add(&mut g, p, i, &mut rng);
    }
    for _ in 0..rng.gen_range(0..=n / 4) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        add(&mut g, a, b, &mut rng);
    }
    for u in 0..n {
        if g.degree(u) >= 3 && rng.gen_bool(0.3) {
            let mut order: Vec<Neighbor> =
                g.bonds.iter().filter(|b| b.a == u || b.b == u).map(|b| Neighbor::Atom(b.other(u))).collect();
            if g.hydrogen_count(u) > 0 {
                order.push(Neighbor::ImplicitH);
            }
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            g.atoms[u].chirality = Some(Chirality { clockwise: rng.gen_bool(0.5), order });
        }
    }
    g
}

fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

const MOLECULES: &[&str] = &[
    "CCO",
    "c1ccccc1",
    "CC(=O)Oc1ccccc1C(=O)O",
    "CN1CCC[C@H]1c1cccnc1",
    "O=C(O)c1ccc(Cl)cc1",
    "CC(C)(C)OC(=O)N1CCNCC1",
    "c1ccc2c(c1)[nH]c1ccccc12",
    "N#Cc1ccc(Br)cc1",
    "C/C=C/C(=O)OC",
    "O=S(=O)(Cl)c1ccccc1",
    "C1CC2(CC1)OCCO2",
    "[O-][N+](=O)c1ccc(F)cc1",
    "CC[C@@H](C)[C@H](N)C(=O)O",
    "O=C1CCCN1",
    "COc1cc(C=O)ccc1O",
    "CC(C)Cc1ccc(C(C)C(=O)O)cc1",
    "c1ccsc1",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "[Na+].[Cl-]",
    "C%10CCCCC%10",
];

#[test]
fn benzene_from_each_atom_canonicalizes_identically() {
    let g = parse_smiles("c1ccccc1").unwrap();
    let strings: Vec<String> = (0..6).map(|r| write(&g, r, &BranchOrder::Input).unwrap()).collect();
    assert_eq!(strings.len(), 6);
    let c0 = canonical(&g);
    for s in &strings {
        assert_eq!(canonical(&parse_smiles(s).unwrap()), c0);
    }
}

#[test]
fn listed_molecules_round_trip_from_every_root_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for smi in MOLECULES {
        let g = parse_smiles(smi).unwrap();
        let want = canonical(&g);
        for r in 0..g.len() {
            let order = BranchOrder::Priority((0..g.len()).map(|_| rng.gen()).collect());
            let s = write(&g, r, &order).unwrap();
            let back = parse_smiles(&s).unwrap();
            assert!(is_isomorphic(&g, &back), "{smi} -> {s}");
            assert_eq!(canonical(&back), want, "{smi} -> {s}");
        }
    }
}

#[test]
fn random_root_frequencies_are_uniform() {
    // Mapped atoms make the root readable from the first bracket.
    let g = parse_smiles("[CH3:1][CH2:2][O:3][CH2:4][NH:5][CH3:6]").unwrap();
    let mut counts = [0usize; 6];
    for seed in 0..1000 {
        let s = random_rooted(&g, seed).unwrap();
        let first = &lex(&s).unwrap()[0].text;
        let map: usize = first.trim_end_matches(']').rsplit(':').next().unwrap().parse().unwrap();
        counts[map - 1] += 1;
    }
    for c in counts {
        let f = c as f64 / 1000.0;
        assert!((f - 1.0 / 6.0).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn random_rooted_is_deterministic() {
    let g = parse_smiles("CC(=O)Nc1ccc(O)cc1").unwrap();
    assert_eq!(random_rooted(&g, 11).unwrap(), random_rooted(&g, 11).unwrap());
}

#[test]
fn strip_commutes_with_canonical() {
    let g = parse_smiles("[CH3:1][C:2](=[O:3])[NH:4][c:5]1[cH:6][cH:7][cH:8][cH:9][cH:10]1").unwrap();
    let direct = canonical(&strip_atom_maps(&g));
    let via = canonical(&strip_atom_maps(&parse_smiles(&canonical(&g)).unwrap()));
    assert_eq!(direct, via);
}

#[test]
fn identical_mapped_graphs_align_identically() {
    let g = parse_smiles("[CH3:1][C:2](=[O:3])[O:4][CH2:5][c:6]1[cH:7][cH:8][cH:9][cH:10][cH:11]1").unwrap();
    for r in 0..g.len() {
        let (p, q) = root_align(&g, &g, r).unwrap();
        assert_eq!(p, q);
    }
}

const MAPPED_REACTIONS: &[&str] = &[
    "[CH3:1][C:2](=[O:3])Cl.[NH2:4][CH2:5][CH3:6]>>[CH3:1][C:2](=[O:3])[NH:4][CH2:5][CH3:6]",
    "[CH3:1][C:2](=[O:3])O.[OH:4][CH2:5][c:6]1[cH:7][cH:8][cH:9][cH:10][cH:11]1>>[CH3:1][C:2](=[O:3])[O:4][CH2:5][c:6]1[cH:7][cH:8][cH:9][cH:10][cH:11]1",
    "CC(C)(C)OC(=O)[NH:1][CH2:2][CH2:3][OH:4]>>[NH2:1][CH2:2][CH2:3][OH:4]",
    "Br[c:1]1[cH:2][cH:3][c:4]([CH3:5])[cH:6][cH:7]1.OB(O)[c:8]1[cH:9][cH:10][cH:11][cH:12][cH:13]1>>[c:1]1([c:8]2[cH:9][cH:10][cH:11][cH:12][cH:13]2)[cH:2][cH:3][c:4]([CH3:5])[cH:6][cH:7]1",
    "[NH:1]1[CH2:2][CH2:3][O:4][CH2:5][CH2:6]1.Br[CH2:7][c:8]1[cH:9][cH:10][cH:11][cH:12][cH:13]1>>[N:1]1([CH2:7][c:8]2[cH:9][cH:10][cH:11][cH:12][cH:13]2)[CH2:2][CH2:3][O:4][CH2:5][CH2:6]1",
    "[CH3:1][CH2:2][C:3](=[O:4])[O:5]C>>[CH3:1][CH2:2][C:3](=[O:4])[OH:5]",
    "[CH3:1][C:2](=[O:3])[c:4]1[cH:5][cH:6][cH:7][cH:8][cH:9]1>>[CH3:1][CH:2]([OH:3])[c:4]1[cH:5][cH:6][cH:7][cH:8][cH:9]1",
    "[OH:1][c:2]1[cH:3][cH:4][cH:5][cH:6][cH:7]1.I[CH3:8]>>[CH3:8][O:1][c:2]1[cH:3][cH:4][cH:5][cH:6][cH:7]1",
    "[CH3:1][S:2](=[O:3])(=[O:4])Cl.[NH2:5][c:6]1[cH:7][cH:8][cH:9][cH:10][cH:11]1>>[CH3:1][S:2](=[O:3])(=[O:4])[NH:5][c:6]1[cH:7][cH:8][cH:9][cH:10][cH:11]1",
    "[CH3:1][CH2:2][CH:3]=O.[NH2:4][CH3:5]>>[CH3:1][CH2:2][CH2:3][NH:4][CH3:5]",
    "[O-][N+:8](=O)[c:1]1[cH:2][cH:3][c:4]([Cl:5])[cH:6][cH:7]1>>[NH2:8][c:1]1[cH:2][cH:3][c:4]([Cl:5])[cH:6][cH:7]1",
    "[CH3:1][C:2](=[O:3])OC(C)=O.[OH:4][CH:5]1[CH2:6][CH2:7][CH2:8][CH2:9][CH2:10]1>>[CH3:1][C:2](=[O:3])[O:4][CH:5]1[CH2:6][CH2:7][CH2:8][CH2:9][CH2:10]1",
    "F[c:1]1[cH:2][cH:3][c:4]([N+:5](=[O:6])[O-:7])[cH:8][cH:9]1.[NH:10]1[CH2:11][CH2:12][CH2:13][CH2:14]1>>[c:1]1([N:10]2[CH2:11][CH2:12][CH2:13][CH2:14]2)[cH:2][cH:3][c:4]([N+:5](=[O:6])[O-:7])[cH:8][cH:9]1",
    "[CH3:1][N:2]=[C:3]=[O:4].[NH2:5][CH2:6][CH3:7]>>[CH3:1][NH:2][C:3](=[O:4])[NH:5][CH2:6][CH3:7]",
    "CC(C)(C)[Si](C)(C)[O:1][CH2:2][CH2:3][CH2:4][Cl:5]>>[OH:1][CH2:2][CH2:3][CH2:4][Cl:5]",
    "[CH3:1][Mg]Br.[O:2]=[CH:3][c:4]1[cH:5][cH:6][cH:7][cH:8][cH:9]1>>[CH3:1][CH:3]([OH:2])[c:4]1[cH:5][cH:6][cH:7][cH:8][cH:9]1",
    "O=C(OCc1ccccc1)[NH:1][CH:2]([CH3:3])[C:4](=[O:5])[OH:6]>>[NH2:1][CH:2]([CH3:3])[C:4](=[O:5])[OH:6]",
    "I[c:1]1[cH:2][cH:3][cH:4][cH:5][cH:6]1.[CH:7]#[C:8][CH2:9][OH:10]>>[c:1]1([C:7]#[C:8][CH2:9][OH:10])[cH:2][cH:3][cH:4][cH:5][cH:6]1",
    "[OH:1][CH2:2][CH2:3][CH3:4].CS(=O)(=O)Cl>>CS(=O)(=O)[O:1][CH2:2][CH2:3][CH3:4]",
    "[OH:1][CH2:2][c:3]1[cH:4][cH:5][cH:6][cH:7][cH:8]1>>[O:1]=[CH:2][c:3]1[cH:4][cH:5][cH:6][cH:7][cH:8]1",
];

fn common_prefix(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// Mean common-prefix length over every mapped product root, for aligned
/// pairs and for pairs whose two sides are rooted independently at random.
fn prefix_means(product: &MolGraph, reactants: &MolGraph, seed: u64) -> (f64, f64) {
    let roots: Vec<usize> = (0..product.len())
        .filter(|&i| product.atoms[i].atom_map.is_some_and(|m| reactants.atom_with_map(m).is_some()))
        .collect();
    assert!(!roots.is_empty());
    let (p_plain, r_plain) = (strip_atom_maps(product), strip_atom_maps(reactants));
    let mut aligned = 0.0;
    let mut unaligned = 0.0;
    for (k, &root) in roots.iter().enumerate() {
        let (ps, rs) = root_align(product, reactants, root).unwrap();
        // Both strings re-parse to the unmapped molecules.
        assert!(is_isomorphic(&parse_smiles(&ps).unwrap(), &p_plain));
        assert!(is_isomorphic(&parse_smiles(&rs).unwrap(), &r_plain));
        aligned += common_prefix(&ps, &rs) as f64;
        let s = seed.wrapping_mul(1000).wrapping_add(k as u64);
        let (ups, urs) = (random_rooted(&p_plain, 2 * s).unwrap(), random_rooted(&r_plain, 2 * s + 1).unwrap());
        unaligned += common_prefix(&ups, &urs) as f64;
    }
    let n = roots.len() as f64;
    (aligned / n, unaligned / n)
}

#[test]
fn aligned_pairs_share_longer_prefixes_than_independent_rootings() {
    let mut aligned = 0.0;
    let mut unaligned = 0.0;
    let mut canonical_pairs = 0.0;
    for (i, rxn) in MAPPED_REACTIONS.iter().enumerate() {
        let (r, p) = rxn.split_once(">>").unwrap();
        let reactants = parse_smiles(r).unwrap();
        let product = parse_smiles(p).unwrap();
        let (a, u) = prefix_means(&product, &reactants, i as u64);
        aligned += a;
        unaligned += u;
        let cp = canonical(&strip_atom_maps(&product));
        let cr = canonical(&strip_atom_maps(&reactants));
        canonical_pairs += common_prefix(&cp, &cr) as f64;
    }
    let n = MAPPED_REACTIONS.len() as f64;
    eprintln!(
        "mean common prefix: aligned {:.2}, independent {:.2}, canonical {:.2}",
        aligned / n,
        unaligned / n,
        canonical_pairs / n
    );
    assert!(aligned > unaligned, "aligned {} vs independent {}", aligned / n, unaligned / n);
}

#[test]
fn first_reactant_block_is_rooted_at_the_mapped_atom() {
    for rxn in MAPPED_REACTIONS {
        let (r, p) = rxn.split_once(">>").unwrap();
        let reactants = parse_smiles(r).unwrap();
        let product = parse_smiles(p).unwrap();
        for root in 0..product.len() {
            let Some(m) = product.atoms[root].atom_map else { continue };
            let Some(r_atom) = reactants.atom_with_map(m) else { continue };
            let (_, rs) = root_align(&product, &reactants, root).unwrap();
            let first_block = rs.split('.').next().unwrap();
            let block = parse_smiles(first_block).unwrap();
            let comp = reactants.components().into_iter().find(|c| c.contains(&r_atom)).unwrap();
            let sub = strip_atom_maps(&reactants.subgraph(&comp));
            assert_eq!(canonical(&block), canonical(&sub), "{rxn} root {root}");
            assert_eq!(block.atoms[0].element, reactants.atoms[r_atom].element);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lex_never_panics(s in "\\PC{0,40}") {
        let _ = lex(&s);
    }

    #[test]
    fn lex_tokens_concatenate_to_input(s in "[CNOcno()=#123%\\[\\]+H@.]{1,30}") {
        if let Ok(tokens) = lex(&s) {
            let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
            prop_assert_eq!(joined, s);
        }
    }

    #[test]
    fn parse_never_panics(s in "[CNOcn()=#12\\[\\]+H@./\\\\]{1,30}") {
        let _ = parse_smiles(&s);
    }

    #[test]
    fn write_round_trips_random_graphs(seed in any::<u64>()) {
        let g = random_graph(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let root = rng.gen_range(0..g.len());
        let order = BranchOrder::Priority((0..g.len()).map(|_| rng.gen()).collect());
        let s = write(&g, root, &order).unwrap();
        let back = parse_smiles(&s).unwrap();
        prop_assert!(is_isomorphic(&g, &back), "{}", s);
    }

    #[test]
    fn canonical_is_relabel_invariant(seed in any::<u64>()) {
        let g = random_graph(seed, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let perm = random_permutation(g.len(), &mut rng);
        prop_assert_eq!(canonical(&g.permuted(&perm)), canonical(&g));
    }

    #[test]
    fn canonical_is_root_invariant(seed in any::<u64>()) {
        let g = random_graph(seed, 20);
        let want = canonical(&g);
        for k in 0..5 {
            let s = random_rooted(&g, seed.wrapping_add(k)).unwrap();
            prop_assert_eq!(&canonical(&parse_smiles(&s).unwrap()), &want, "{}", s);
        }
    }
}

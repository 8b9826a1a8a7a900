use std::collections::{BTreeMap, BTreeSet};

/// One model's preference order over candidate keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ballot {
    pub model: usize,
    pub candidates: Vec<String>,
}

/// Orders `tied` by instant-runoff over `ballots`.
///
/// Each round counts, for every ballot, its highest-ranked candidate still
/// in the running; the candidates with the fewest first choices drop out
/// together. Later elimination ranks higher. Candidates that drop out in the
/// same round are ordered by a runoff among just themselves, and when that
/// cannot separate them, lexicographically.
pub fn break_ties(tied: &[String], ballots: &[Ballot]) -> Vec<String> {
    let set: BTreeSet<&str> = tied.iter().map(String::as_str).collect();
    runoff(&set, ballots).into_iter().map(str::to_string).collect()
}

fn runoff<'a>(candidates: &BTreeSet<&'a str>, ballots: &[Ballot]) -> Vec<&'a str> {
    let mut active = candidates.clone();
    // Elimination rounds, first eliminated first.
    let mut rounds: Vec<Vec<&'a str>> = Vec::new();
    while !active.is_empty() {
        let mut counts: BTreeMap<&str, usize> = active.iter().map(|&c| (c, 0)).collect();
        for b in ballots {
            if let Some(first) = b.candidates.iter().find(|c| active.contains(c.as_str())) {
                *counts.get_mut(first.as_str()).expect("active") += 1;
            }
        }
        let fewest = *counts.values().min().expect("non-empty");
        let out: BTreeSet<&'a str> = active.iter().copied().filter(|c| counts[c] == fewest).collect();
        let ordered = if out.len() == 1 {
            out.iter().copied().collect()
        } else if out.len() == active.len() {
            // Nothing separates them: lexicographic.
            out.iter().copied().collect()
        } else {
            runoff(&out, ballots)
        };
        for c in &out {
            active.remove(c);
        }
        rounds.push(ordered);
    }
    rounds.into_iter().rev().flatten().collect()
}

use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    /// Organic-subset atom written without brackets.
    Atom,
    /// `[...]`, kept whole.
    BracketAtom,
    Bond,
    BranchOpen,
    BranchClose,
    /// A single ring digit or `%nn`.
    Ring,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offset of the token in the input.
    pub offset: usize,
}

/// Splits SMILES text into tokens whose concatenation is the input.
pub fn lex(smiles: &str) -> Result<Vec<Token>, SmilesError> {
    let bytes = smiles.as_bytes();
    if bytes.is_empty() {
        return Err(SmilesError::Empty);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let (kind, len) = match c {
            b'[' => match bytes[i..].iter().position(|&b| b == b']') {
                Some(end) => (TokenKind::BracketAtom, end + 1),
                None => return Err(SmilesError::UnterminatedBracket { offset: i }),
            },
            b'C' if bytes.get(i + 1) == Some(&b'l') => (TokenKind::Atom, 2),
            b'B' if bytes.get(i + 1) == Some(&b'r') => (TokenKind::Atom, 2),
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                (TokenKind::Atom, 1)
            }
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => (TokenKind::Bond, 1),
            b'(' => (TokenKind::BranchOpen, 1),
            b')' => (TokenKind::BranchClose, 1),
            b'0'..=b'9' => (TokenKind::Ring, 1),
            b'%' => {
                let ok = bytes.len() >= i + 3 && bytes[i + 1].is_ascii_digit() && bytes[i + 2].is_ascii_digit();
                if !ok {
                    return Err(SmilesError::UnknownChar { ch: '%', offset: i });
                }
                (TokenKind::Ring, 3)
            }
            b'.' => (TokenKind::Dot, 1),
            _ => {
                let ch = smiles[i..].chars().next().unwrap_or('?');
                return Err(SmilesError::UnknownChar { ch, offset: i });
            }
        };
        out.push(Token { kind, text: smiles[i..i + len].to_string(), offset: i });
        i += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        lex(s).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn two_letter_halogens_are_single_tokens() {
        assert_eq!(texts("CCl"), ["C", "Cl"]);
        assert_eq!(texts("BrCBr"), ["Br", "C", "Br"]);
    }

    #[test]
    fn benzene_tokens() {
        assert_eq!(texts("c1ccccc1"), ["c", "1", "c", "c", "c", "c", "c", "1"]);
    }

    #[test]
    fn bracket_atoms_and_percent_rings() {
        assert_eq!(texts("[NH3+]"), ["[NH3+]"]);
        assert_eq!(texts("C%12CC%12"), ["C", "%12", "C", "C", "%12"]);
        assert_eq!(texts("[Si](C)(C)C"), ["[Si]", "(", "C", ")", "(", "C", ")", "C"]);
    }

    #[test]
    fn positioned_errors() {
        assert_eq!(lex("CCX"), Err(SmilesError::UnknownChar { ch: 'X', offset: 2 }));
        assert_eq!(lex("C[NH4"), Err(SmilesError::UnterminatedBracket { offset: 1 }));
        assert_eq!(lex("C%1"), Err(SmilesError::UnknownChar { ch: '%', offset: 1 }));
        assert_eq!(lex(""), Err(SmilesError::Empty));
    }
}

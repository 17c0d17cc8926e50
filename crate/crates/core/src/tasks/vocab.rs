use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// Bumped whenever the symbol table changes; checkpoints trained against
/// one version are meaningless under another.
pub const VOCAB_VERSION: u32 = 1;

const SPECIALS: [&str; 3] = ["<pad>", "<mask>", "<eos>"];
const SPACE_NAME: &str = "<space>";
const CHARS: &str = "0123456789 +=|→ADORST";

/// Fixed character-level symbol table. Ids 0..3 are PAD, MASK and EOS;
/// every later id is one character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn standard() -> Self {
        Self::from_chars(CHARS.chars().collect()).expect("built-in vocabulary is bijective")
    }

    fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (i + SPECIALS.len()) as u32).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocab { chars, index })
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    /// Character for a content id; `None` for specials and out-of-range ids.
    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(SPECIALS.len())
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id(c).ok_or(Error::Encoding(c)))
            .collect()
    }

    /// Inverse of [`Self::encode`]. Special ids render as their names.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id as usize {
                i if i < SPECIALS.len() => SPECIALS[i].to_string(),
                _ => self.char_of(id).map(String::from).unwrap_or_else(|| format!("<{id}>")),
            })
            .collect()
    }

    /// One symbol per line; line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut out = String::new();
        for s in SPECIALS {
            out.push_str(s);
            out.push('\n');
        }
        for &c in &self.chars {
            if c == ' ' {
                out.push_str(SPACE_NAME);
            } else {
                out.push(c);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_file_contents(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parse("vocab file must start with <pad>, <mask>, <eos>".into()));
        }
        let chars = lines[SPECIALS.len()..]
            .iter()
            .map(|&line| {
                if line == SPACE_NAME {
                    return Ok(' ');
                }
                let mut it = line.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Parse(format!("vocab line {line:?} is not a single symbol"))),
                }
            })
            .collect::<Result<Vec<char>>>()?;
        Self::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_contents())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_text() {
        let v = Vocab::standard();
        let ids = v.encode("12+3").unwrap();
        assert_eq!(v.decode(&ids), "12+3");
        assert!(!ids.contains(&MASK_ID));
    }

    #[test]
    fn rejects_unknown_character() {
        let err = Vocab::standard().encode("12*3").unwrap_err();
        assert!(matches!(err, Error::Encoding('*')));
    }

    #[test]
    fn every_symbol_round_trips() {
        let v = Vocab::standard();
        for id in 3..v.len() as u32 {
            let c = v.char_of(id).unwrap();
            assert_eq!(v.encode(&c.to_string()).unwrap(), vec![id]);
        }
    }

    #[test]
    fn file_format_round_trips() {
        let v = Vocab::standard();
        let text = v.to_file_contents();
        assert_eq!(text.lines().count(), v.len());
        assert_eq!(Vocab::from_file_contents(&text).unwrap(), v);
    }
}

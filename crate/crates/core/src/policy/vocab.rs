use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const SEP: usize = 3;

const PUNCT: &str = ".,:;?!()+-*/=^%";

/// Fixed character vocabulary: four control tokens then printable symbols.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: [Option<u8>; 128],
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const CONTROL: usize = 4;

    pub fn new() -> Self {
        let mut symbols: Vec<char> = Vec::new();
        symbols.extend('0'..='9');
        symbols.extend('a'..='z');
        symbols.extend('A'..='Z');
        symbols.push(' ');
        symbols.push('\n');
        symbols.extend(PUNCT.chars());
        let mut index = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            index[c as usize] = Some((i + Self::CONTROL) as u8);
        }
        Vocab { symbols, index }
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + Self::CONTROL
    }

    pub fn id(&self, c: char) -> Option<usize> {
        if (c as u32) < 128 {
            self.index[c as usize].map(usize::from)
        } else {
            None
        }
    }

    pub fn contains_all(&self, text: &str) -> bool {
        text.chars().all(|c| self.id(c).is_some())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.char_indices()
            .map(|(offset, ch)| self.id(ch).ok_or(Error::OutOfVocab { ch, offset }))
            .collect()
    }

    /// Control tokens decode to nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= Self::CONTROL)
            .filter_map(|&i| self.symbols.get(i - Self::CONTROL))
            .collect()
    }

    /// `BOS question SEP`
    pub fn encode_prompt(&self, question: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(question.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(question)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// `answer EOS`
    pub fn encode_completion(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = self.encode(answer)?;
        ids.push(EOS);
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn control_ids_are_fixed() {
        let v = Vocab::new();
        assert_eq!((BOS, EOS, PAD, SEP), (0, 1, 2, 3));
        assert_eq!(v.id('0'), Some(4));
        assert_eq!(v.size(), 4 + 10 + 26 + 26 + 2 + 15);
    }

    #[test]
    fn empty_and_formula_round_trip() {
        let v = Vocab::new();
        assert!(v.encode("").unwrap().is_empty());
        assert_eq!(v.decode(&[]), "");
        let ids = v.encode("E = mc^2").unwrap();
        assert_eq!(v.decode(&ids), "E = mc^2");
    }

    #[test]
    fn out_of_vocab_reports_offset() {
        let v = Vocab::new();
        match v.encode("π") {
            Err(Error::OutOfVocab { ch, offset }) => assert_eq!((ch, offset), ('π', 0)),
            other => panic!("{other:?}"),
        }
        match v.encode("ab\t") {
            Err(Error::OutOfVocab { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[0-9a-zA-Z \n.,:;?!()+*/=^%-]{0,60}") {
            let v = Vocab::new();
            let ids = v.encode(&s).unwrap();
            prop_assert_eq!(v.decode(&ids), s);
        }
    }
}

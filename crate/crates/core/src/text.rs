//! Character vocabulary shared by the ASR head and the language model.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Separates the instruction from the content text.
pub const SEP: u32 = 3;
/// Begin-of-speech marker closing the text context.
pub const BOS_SPEECH: u32 = 4;
pub const UNK: u32 = 5;

const SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz,.'?!-:";
const FIRST_SYMBOL: u32 = 6;

/// Total number of text token ids.
pub const TEXT_VOCAB: usize = FIRST_SYMBOL as usize + SYMBOLS.len();

pub fn char_id(c: char) -> u32 {
    let c = c.to_ascii_lowercase();
    SYMBOLS
        .find(c)
        .map(|i| FIRST_SYMBOL + i as u32)
        .unwrap_or(UNK)
}

pub fn id_char(id: u32) -> Option<char> {
    id.checked_sub(FIRST_SYMBOL)
        .and_then(|i| SYMBOLS.chars().nth(i as usize))
}

pub fn encode_chars(s: &str) -> Vec<u32> {
    s.chars().map(char_id).collect()
}

pub fn decode_chars(ids: &[u32]) -> String {
    ids.iter().filter_map(|&i| id_char(i)).collect()
}

/// Instruction (style prompt) plus the content to be spoken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionText {
    pub instruction: String,
    pub content_text: String,
}

impl InstructionText {
    pub fn new(instruction: impl Into<String>, content_text: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            content_text: content_text.into(),
        }
    }

    /// `instruction SEP content BOS_SPEECH`.
    pub fn tokens(&self) -> Vec<u32> {
        let mut out = encode_chars(&self.instruction);
        out.push(SEP);
        out.extend(encode_chars(&self.content_text));
        out.push(BOS_SPEECH);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_forty_symbols() {
        assert_eq!(TEXT_VOCAB, 40);
    }

    #[test]
    fn round_trip_and_unknowns() {
        let ids = encode_chars("Hi there!");
        assert_eq!(decode_chars(&ids), "hi there!");
        assert_eq!(char_id('#'), UNK);
    }

    #[test]
    fn serialization_layout() {
        let t = InstructionText::new("ab", "c").tokens();
        assert_eq!(t, vec![char_id('a'), char_id('b'), SEP, char_id('c'), BOS_SPEECH]);
    }
}

//! Byte-level tokenizer: `BOS = 0`, `EOS = 1`, byte `b` maps to `b + 2`.

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const N_SPECIAL: u32 = 2;
/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256 + N_SPECIAL as usize;

pub fn tokenize(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(|b| b as u32 + N_SPECIAL));
    ids.push(EOS);
    ids
}

pub fn byte_of(token: u32) -> Option<u8> {
    if (N_SPECIAL..N_SPECIAL + 256).contains(&token) {
        Some((token - N_SPECIAL) as u8)
    } else {
        None
    }
}

pub fn token_of(byte: u8) -> u32 {
    byte as u32 + N_SPECIAL
}

/// Decodes byte tokens back to a string, skipping specials. Invalid UTF-8 is
/// replaced with U+FFFD.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter_map(|&t| byte_of(t)).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_char() {
        assert_eq!(tokenize("A"), vec![0, 67, 1]);
    }

    #[test]
    fn empty_text() {
        assert_eq!(tokenize(""), vec![0, 1]);
    }

    #[test]
    fn roundtrip_non_ascii() {
        assert_eq!(decode(&tokenize("héllo")), "héllo");
    }

    proptest! {
        #[test]
        fn decode_inverts_tokenize(s in "\\PC{0,40}") {
            prop_assert_eq!(decode(&tokenize(&s)), s);
        }
    }
}

//! Fixed toy-vocabulary layout.
//!
//! The synthetic corpus writes token ids from these ranges; the default
//! model vocabulary (256) leaves headroom above them. Names exist only to
//! make corpora and reports readable.

use crate::model::SpecialTokens;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const REFUSE: u32 = 3;

/// Function words available to question templates and the answer grammar.
pub const WORDS_BASE: u32 = 4;
pub const WORD_NAMES: [&str; 24] = [
    "tell", "me", "the", "of", "could", "you", "describe", "what", "is", "in", "this", "image",
    "provide", "details", "about", "show", "shown", "picture", "share", "explain", "more", "info",
    "photo", "how",
];

/// Sensitive attribute pool, shared across subjects the way "number" or
/// "code" attach to many real privacy categories.
pub const SENSITIVE_ATTR_BASE: u32 = 28;
pub const SENSITIVE_ATTR_NAMES: [&str; 4] = ["number", "code", "serial", "pin"];

/// Benign attribute pool.
pub const BENIGN_ATTR_BASE: u32 = 32;
pub const BENIGN_ATTR_NAMES: [&str; 4] = ["kind", "color", "size", "style"];

/// Subject tokens; a subject may occupy one or two of these.
pub const SUBJECT_BASE: u32 = 36;
pub const SUBJECT_SLOTS: u32 = 24;

/// Context-augmentation starter words.
pub const STARTER_BASE: u32 = 60;
pub const STARTER_NAMES: [&str; 5] = ["The", "Therefore", "Because", "I", "You"];

/// Context chain words following a starter.
pub const CHAIN_BASE: u32 = 65;
pub const CHAIN_COUNT: u32 = 16;

/// Answer value tokens.
pub const VALUE_BASE: u32 = 81;
pub const VALUE_COUNT: u32 = 64;

pub const VOCAB_USED: u32 = VALUE_BASE + VALUE_COUNT;

pub fn word(name: &str) -> u32 {
    let idx = WORD_NAMES
        .iter()
        .position(|w| *w == name)
        .unwrap_or_else(|| panic!("unknown function word {name:?}"));
    WORDS_BASE + idx as u32
}

pub fn starter_tokens() -> Vec<u32> {
    (0..STARTER_NAMES.len() as u32)
        .map(|i| STARTER_BASE + i)
        .collect()
}

pub fn default_special_tokens() -> SpecialTokens {
    SpecialTokens {
        bos: BOS,
        eos: EOS,
        refuse: REFUSE,
    }
}

/// Deterministic answer value for (subject, attribute): the fact the base
/// model has to memorize and the edit has to preserve.
pub fn value_token(subject_id: u32, attr: u32) -> u32 {
    VALUE_BASE
        + (subject_id
            .wrapping_mul(7)
            .wrapping_add(attr.wrapping_mul(13)))
            % VALUE_COUNT
}

/// Readable name for a token id, for report annotations.
pub fn token_name(id: u32) -> String {
    match id {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        REFUSE => "<refuse>".into(),
        _ if (WORDS_BASE..SENSITIVE_ATTR_BASE).contains(&id) => {
            WORD_NAMES[(id - WORDS_BASE) as usize].into()
        }
        _ if (SENSITIVE_ATTR_BASE..BENIGN_ATTR_BASE).contains(&id) => {
            SENSITIVE_ATTR_NAMES[(id - SENSITIVE_ATTR_BASE) as usize].into()
        }
        _ if (BENIGN_ATTR_BASE..SUBJECT_BASE).contains(&id) => {
            BENIGN_ATTR_NAMES[(id - BENIGN_ATTR_BASE) as usize].into()
        }
        _ if (SUBJECT_BASE..SUBJECT_BASE + SUBJECT_SLOTS).contains(&id) => {
            format!("subj{}", id - SUBJECT_BASE)
        }
        _ if (STARTER_BASE..CHAIN_BASE).contains(&id) => {
            STARTER_NAMES[(id - STARTER_BASE) as usize].into()
        }
        _ if (CHAIN_BASE..CHAIN_BASE + CHAIN_COUNT).contains(&id) => {
            format!("ctx{}", id - CHAIN_BASE)
        }
        _ if (VALUE_BASE..VALUE_BASE + VALUE_COUNT).contains(&id) => {
            format!("val{}", id - VALUE_BASE)
        }
        _ => format!("tok{id}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_do_not_overlap() {
        assert!(WORDS_BASE + WORD_NAMES.len() as u32 <= SENSITIVE_ATTR_BASE);
        assert!(SENSITIVE_ATTR_BASE + SENSITIVE_ATTR_NAMES.len() as u32 <= BENIGN_ATTR_BASE);
        assert!(BENIGN_ATTR_BASE + BENIGN_ATTR_NAMES.len() as u32 <= SUBJECT_BASE);
        assert!(SUBJECT_BASE + SUBJECT_SLOTS <= STARTER_BASE);
        assert!(STARTER_BASE + STARTER_NAMES.len() as u32 <= CHAIN_BASE);
        assert!(CHAIN_BASE + CHAIN_COUNT <= VALUE_BASE);
        assert!(VOCAB_USED <= 256);
    }

    #[test]
    fn value_token_stable() {
        assert_eq!(value_token(2, 30), value_token(2, 30));
        assert!((VALUE_BASE..VALUE_BASE + VALUE_COUNT).contains(&value_token(5, 29)));
    }
}

//! Synthetic cipher languages.
//!
//! Each registered language maps ASCII letters into its own contiguous
//! 52-codepoint block (`a..z` then `A..Z`); digits, punctuation, and
//! whitespace pass through. Blocks are 0x40 apart, so the scripts of any
//! two languages never share a codepoint and the mapping is invertible.

use crate::error::{Error, Result};

/// Registered synthetic language tags, `l1` through `l10`.
pub const LANGUAGE_TAGS: [&str; 10] = ["l1", "l2", "l3", "l4", "l5", "l6", "l7", "l8", "l9", "l10"];

const BLOCK_BASE: u32 = 0x4E00;
const BLOCK_STRIDE: u32 = 0x40;
const LETTERS: u32 = 52;

pub fn is_cipher_language(tag: &str) -> bool {
    LANGUAGE_TAGS.contains(&tag)
}

/// Block base codepoint for a registered language.
pub fn block_base(language: &str) -> Result<u32> {
    let index = LANGUAGE_TAGS
        .iter()
        .position(|&t| t == language)
        .ok_or_else(|| Error::Config(format!("unregistered cipher language: {language}")))?;
    Ok(BLOCK_BASE + index as u32 * BLOCK_STRIDE)
}

/// Maps ASCII letters into the language's block; everything else is kept.
pub fn cipher_translate(text: &str, language: &str) -> Result<String> {
    let base = block_base(language)?;
    Ok(text
        .chars()
        .map(|c| match c {
            'a'..='z' => char::from_u32(base + (c as u32 - 'a' as u32)).unwrap(),
            'A'..='Z' => char::from_u32(base + 26 + (c as u32 - 'A' as u32)).unwrap(),
            other => other,
        })
        .collect())
}

/// Inverse of [`cipher_translate`] for the same language.
pub fn cipher_invert(text: &str, language: &str) -> Result<String> {
    let base = block_base(language)?;
    Ok(text
        .chars()
        .map(|c| {
            let cp = c as u32;
            if (base..base + 26).contains(&cp) {
                char::from_u32('a' as u32 + (cp - base)).unwrap()
            } else if (base + 26..base + LETTERS).contains(&cp) {
                char::from_u32('A' as u32 + (cp - base - 26)).unwrap()
            } else {
                c
            }
        })
        .collect())
}

//! The fixed 96-token vocabulary shared by documents, prompts and the policy.
//!
//! ```text
//!  0..5    [PAD] [BEGIN] [SEP] [ASK] [EOS]
//!  5..15   '0'..'9'
//! 15..41   'a'..'z'
//! 41..44   '-' '.' ':'
//! 44..50   per-key markers (one per schema position)
//! 50..55   field-kind markers
//! 55..96   layout tokens (key label variants, then filler)
//! ```

use crate::error::{Error, Result};

pub type Token = u16;

pub const VOCAB_SIZE: usize = 96;

pub const PAD: Token = 0;
pub const BEGIN: Token = 1;
pub const SEP: Token = 2;
pub const ASK: Token = 3;
pub const EOS: Token = 4;

const DIGIT_BASE: Token = 5;
const LETTER_BASE: Token = 15;
pub const DASH: Token = 41;
pub const DOT: Token = 42;
pub const COLON: Token = 43;

pub const KEY_MARKER_BASE: Token = 44;
/// Number of distinct key markers, hence the maximum schema width.
pub const MAX_KEYS: usize = 6;
pub const KIND_MARKER_BASE: Token = 50;
pub const KIND_COUNT: usize = 5;
pub const LAYOUT_BASE: Token = 55;
/// Rendered label variants per key (e.g. "Invoice No", "Inv. #", ...).
pub const LABEL_VARIANTS: usize = 4;
pub const FILLER_BASE: Token = LAYOUT_BASE + (MAX_KEYS * LABEL_VARIANTS) as Token;

pub fn digit(d: u8) -> Token {
    debug_assert!(d < 10);
    DIGIT_BASE + d as Token
}

pub fn is_digit(t: Token) -> bool {
    (DIGIT_BASE..LETTER_BASE).contains(&t)
}

pub fn digit_value(t: Token) -> Option<u8> {
    is_digit(t).then(|| (t - DIGIT_BASE) as u8)
}

pub fn is_letter(t: Token) -> bool {
    (LETTER_BASE..DASH).contains(&t)
}

/// Characters that may appear inside a field value.
pub fn is_value_token(t: Token) -> bool {
    (DIGIT_BASE..KEY_MARKER_BASE).contains(&t)
}

pub fn key_marker(index: usize) -> Token {
    debug_assert!(index < MAX_KEYS);
    KEY_MARKER_BASE + index as Token
}

pub fn key_index(t: Token) -> Option<usize> {
    (KEY_MARKER_BASE..KIND_MARKER_BASE)
        .contains(&t)
        .then(|| (t - KEY_MARKER_BASE) as usize)
}

pub fn is_kind_marker(t: Token) -> bool {
    (KIND_MARKER_BASE..LAYOUT_BASE).contains(&t)
}

pub fn label_token(key_index: usize, variant: usize) -> Token {
    debug_assert!(key_index < MAX_KEYS && variant < LABEL_VARIANTS);
    LAYOUT_BASE + (key_index * LABEL_VARIANTS + variant) as Token
}

pub fn char_to_token(c: char) -> Option<Token> {
    match c {
        '0'..='9' => Some(DIGIT_BASE + (c as u8 - b'0') as Token),
        'a'..='z' => Some(LETTER_BASE + (c as u8 - b'a') as Token),
        'A'..='Z' => Some(LETTER_BASE + (c as u8 - b'A') as Token),
        '-' => Some(DASH),
        '.' => Some(DOT),
        ':' => Some(COLON),
        _ => None,
    }
}

pub fn token_to_char(t: Token) -> Option<char> {
    match t {
        _ if is_digit(t) => Some((b'0' + (t - DIGIT_BASE) as u8) as char),
        _ if is_letter(t) => Some((b'a' + (t - LETTER_BASE) as u8) as char),
        DASH => Some('-'),
        DOT => Some('.'),
        COLON => Some(':'),
        _ => None,
    }
}

/// Encodes a value string; upper-case letters fold onto the lower-case tokens.
pub fn encode(text: &str) -> Result<Vec<Token>> {
    text.chars()
        .map(|c| char_to_token(c).ok_or_else(|| Error::input(format!("character {c:?} has no token"))))
        .collect()
}

/// Renders tokens as text. `[PAD]` is dropped; non-character tokens render as `<id>`.
pub fn render(tokens: &[Token]) -> String {
    let mut out = String::with_capacity(tokens.len());
    for &t in tokens {
        if t == PAD {
            continue;
        }
        match token_to_char(t) {
            Some(c) => out.push(c),
            None => {
                out.push('<');
                out.push_str(&t.to_string());
                out.push('>');
            }
        }
    }
    out
}

pub fn check_tokens(tokens: &[Token], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(t) => Err(Error::input(format!("token {t} outside vocabulary of {vocab_size}"))),
        None => Ok(()),
    }
}

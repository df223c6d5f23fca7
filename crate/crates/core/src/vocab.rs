//! Fixed 32-token vocabulary shared by the policy, the environment and the
//! verifier.
//!
//! Token ids are stable contract: PAD = 0, EOS = 1, then markup, digits,
//! attribute words and question keywords. Responses wrap a free-form trace in
//! THINK_OPEN/THINK_CLOSE and the final answer digits in BOX_OPEN/BOX_CLOSE.

pub type TokenId = u8;

pub const VOCAB_SIZE: usize = 32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const THINK_OPEN: TokenId = 2;
pub const THINK_CLOSE: TokenId = 3;
pub const BOX_OPEN: TokenId = 4;
pub const BOX_CLOSE: TokenId = 5;
/// digits 0..=9 occupy ids 6..=15
pub const DIGIT_BASE: TokenId = 6;
/// colors red, green, blue, yellow occupy ids 16..=19
pub const COLOR_BASE: TokenId = 16;
/// shapes circle, square, triangle, star occupy ids 20..=23
pub const SHAPE_BASE: TokenId = 20;
pub const SIZE_SMALL: TokenId = 24;
pub const SIZE_LARGE: TokenId = 25;
pub const HOW_MANY: TokenId = 26;
pub const TOTAL: TokenId = 27;
pub const COMPARE: TokenId = 28;
pub const MORE: TokenId = 29;
pub const SEP: TokenId = 30;
pub const OBJECTS: TokenId = 31;

pub const NUM_COLORS: usize = 4;
pub const NUM_SHAPES: usize = 4;

const NAMES: [&str; VOCAB_SIZE] = [
    "<pad>", "<eos>", "<think>", "</think>", "<box>", "</box>", "0", "1", "2", "3", "4", "5",
    "6", "7", "8", "9", "red", "green", "blue", "yellow", "circle", "square", "triangle",
    "star", "small", "large", "how_many", "total", "compare", "more", ";", "objects",
];

pub fn token_name(id: TokenId) -> &'static str {
    NAMES[id as usize]
}

pub fn digit_token(d: u8) -> TokenId {
    debug_assert!(d <= 9);
    DIGIT_BASE + d
}

/// Digit value of a token, if it is a digit token.
pub fn token_digit(id: TokenId) -> Option<u8> {
    if (DIGIT_BASE..DIGIT_BASE + 10).contains(&id) {
        Some(id - DIGIT_BASE)
    } else {
        None
    }
}

pub fn color_token(c: u8) -> TokenId {
    debug_assert!((c as usize) < NUM_COLORS);
    COLOR_BASE + c
}

pub fn shape_token(s: u8) -> TokenId {
    debug_assert!((s as usize) < NUM_SHAPES);
    SHAPE_BASE + s
}

pub fn size_token(large: bool) -> TokenId {
    if large {
        SIZE_LARGE
    } else {
        SIZE_SMALL
    }
}

pub fn is_valid(id: TokenId) -> bool {
    (id as usize) < VOCAB_SIZE
}

/// Render a token sequence for reports and diagnostics.
pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable() {
        assert_eq!(PAD, 0);
        assert_eq!(EOS, 1);
        assert_eq!(digit_token(0), 6);
        assert_eq!(digit_token(9), 15);
        assert_eq!(color_token(3), 19);
        assert_eq!(shape_token(0), 20);
        assert_eq!(OBJECTS, 31);
        assert_eq!(NAMES.len(), VOCAB_SIZE);
    }

    #[test]
    fn digit_round_trip() {
        for d in 0..=9u8 {
            assert_eq!(token_digit(digit_token(d)), Some(d));
        }
        assert_eq!(token_digit(PAD), None);
        assert_eq!(token_digit(COLOR_BASE), None);
    }
}

//! Fixed prompt vocabulary: `[count] [color]+ [gravity|nogravity]`.

use super::PALETTE;

pub const PAD: u32 = 0;
pub const NULL: u32 = 1;
/// Longest prompt: count word, four colors, gravity word.
pub const PROMPT_LEN: usize = 6;

const COUNTS: [&str; 5] = ["zero", "one", "two", "three", "four"];
const COUNT_BASE: u32 = 2;
const COLOR_BASE: u32 = COUNT_BASE + COUNTS.len() as u32;
pub const GRAVITY: u32 = COLOR_BASE + PALETTE.len() as u32;
pub const NO_GRAVITY: u32 = GRAVITY + 1;
pub const VOCAB_SIZE: usize = NO_GRAVITY as usize + 1;

pub fn token_text(id: u32) -> Option<&'static str> {
    match id {
        PAD => Some("<pad>"),
        NULL => Some("<null>"),
        GRAVITY => Some("gravity"),
        NO_GRAVITY => Some("nogravity"),
        i if (COUNT_BASE..COLOR_BASE).contains(&i) => Some(COUNTS[(i - COUNT_BASE) as usize]),
        i if (COLOR_BASE..GRAVITY).contains(&i) => Some(PALETTE[(i - COLOR_BASE) as usize].0),
        _ => None,
    }
}

pub fn token_id(word: &str) -> Option<u32> {
    (0..VOCAB_SIZE as u32).find(|&i| token_text(i) == Some(word))
}

/// Tokens for an episode with the given palette indices, padded to [`PROMPT_LEN`].
pub fn encode(colors: &[usize], gravity: bool) -> Vec<u32> {
    let mut sorted = colors.to_vec();
    sorted.sort_unstable();
    let mut out = vec![COUNT_BASE + colors.len() as u32];
    out.extend(sorted.iter().map(|&c| COLOR_BASE + c as u32));
    out.push(if gravity { GRAVITY } else { NO_GRAVITY });
    out.resize(PROMPT_LEN, PAD);
    out
}

/// The unconditional prompt used for text dropout and guidance.
pub fn null_prompt() -> Vec<u32> {
    let mut out = vec![NULL];
    out.resize(PROMPT_LEN, PAD);
    out
}

pub fn to_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| token_text(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses whitespace-separated words; unknown words are rejected.
pub fn parse(text: &str) -> Option<Vec<u32>> {
    let mut out: Vec<u32> = text.split_whitespace().map(token_id).collect::<Option<_>>()?;
    if out.is_empty() || out.len() > PROMPT_LEN {
        return None;
    }
    out.resize(PROMPT_LEN, PAD);
    Some(out)
}

//! Word-level prompt tokenizer with style-phrase localization.

use crate::data_synth::{StyleSet, LABELS};
use crate::error::{Error, Result};

pub const UNK_ID: usize = 0;

/// Fixed word list; ids are `1 + position`, id 0 is reserved for unknown words.
pub const VOCAB: [&str; 30] = [
    "make", "the", "turn", "into", "render", "in", "style", "a", "an", "of", "pixel", "art",
    "cyberpunk", "expressionism", "line", LABELS[0], LABELS[1], LABELS[2], LABELS[3], LABELS[4],
    LABELS[5], LABELS[6], LABELS[7], LABELS[8], LABELS[9], LABELS[10], LABELS[11], "only", "and",
    "with",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    /// Positions of the style phrase tokens (K_s).
    pub style_positions: Vec<usize>,
    pub style_id: usize,
}

pub fn word_id(word: &str) -> usize {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .map_or(UNK_ID, |p| p + 1)
}

fn words(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| c.is_whitespace() || c == '-')
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Splits `prompt` into word ids and locates the single style phrase it must contain.
pub fn tokenize_prompt(prompt: &str, styles: &StyleSet) -> Result<TokenizedPrompt> {
    let words = words(prompt);
    let ids: Vec<usize> = words.iter().map(|w| word_id(w)).collect();
    let mut found: Vec<(usize, Vec<usize>)> = Vec::new();
    for spec in styles.iter() {
        let phrase: Vec<&str> = spec.name().split('-').collect();
        if phrase.len() > words.len() {
            continue;
        }
        for start in 0..=words.len() - phrase.len() {
            if phrase.iter().enumerate().all(|(i, p)| words[start + i] == *p) {
                found.push((spec.style_id, (start..start + phrase.len()).collect()));
            }
        }
    }
    match found.len() {
        0 => Err(Error::Prompt(format!("no style phrase in {prompt:?}"))),
        1 => {
            let (style_id, style_positions) = found.pop().expect("one match");
            Ok(TokenizedPrompt {
                ids,
                style_positions,
                style_id,
            })
        }
        n => Err(Error::Prompt(format!(
            "{n} style phrases in {prompt:?}; exactly one is required"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn styles() -> StyleSet {
        StyleSet::builtin(4).unwrap()
    }

    #[test]
    fn marks_style_phrase_positions() {
        let t = tokenize_prompt("make the cat pixel-art style", &styles()).unwrap();
        assert_eq!(t.ids.len(), 6);
        assert_eq!(t.style_positions, vec![3, 4]);
        assert_eq!(t.style_id, 0);
        assert_eq!(t.ids[3], word_id("pixel"));
        let c = tokenize_prompt("turn the dog into cyberpunk style", &styles()).unwrap();
        assert_eq!(c.style_positions, vec![4]);
        assert_eq!(c.style_id, 1);
    }

    #[test]
    fn missing_or_multiple_styles_error() {
        assert!(tokenize_prompt("make the cat blue", &styles()).is_err());
        assert!(tokenize_prompt("make the cat line-art and cyberpunk", &styles()).is_err());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = tokenize_prompt("make the zebra expressionism style!", &styles()).unwrap();
        assert_eq!(t.ids[2], UNK_ID);
        assert_eq!(t.style_positions, vec![3]);
    }

    #[test]
    fn deterministic() {
        let a = tokenize_prompt("render the boat in line-art style", &styles()).unwrap();
        let b = tokenize_prompt("render the boat in line-art style", &styles()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn style_outside_the_configured_set_is_not_matched() {
        let two = StyleSet::builtin(2).unwrap();
        assert!(tokenize_prompt("make the cat line-art style", &two).is_err());
    }
}

//! Input encoders: dialogue windows, frozen text embedders and scene
//! feature backbones.
//!
//! The dialogue at decision point `t` is packed into `context_length + 1`
//! fixed slots of [`SLOT_LEN`] tokens each. Every slot pairs the previous
//! follower utterance with the current giver utterance, each prefixed by its
//! speaker token, so a clarification request sits directly before the answer
//! it received. Slots are right-padded (head-keep truncation); missing
//! history produces all-padding slots on the left, which keeps the newest
//! instruction at a fixed position.
//!
//! Text embedders and image backbones are frozen: their parameters are never
//! updated and each exposes a checksum so runs can assert immutability.

pub mod backbone;
pub mod bert;
pub mod scene;
pub mod text;

use crate::corpus::UtterancePair;

/// Tokens per dialogue slot.
pub const SLOT_LEN: usize = 80;

/// Token id of the padding symbol.
pub const PAD_ID: u32 = 0;

/// Token id of the instruction-giver speaker symbol.
pub const TELLER_ID: u32 = 1;

/// Token id of the instruction-follower speaker symbol.
pub const DRAWER_ID: u32 = 2;

/// Tokenizer interface shared by the frozen text embedders.
pub trait SpeakerTokenizer {
    /// Token ids of a plain utterance, without speaker or padding symbols.
    fn encode_text(&self, text: &str) -> Vec<u32>;
}

/// A fixed-length token window over the dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueWindow {
    pub token_ids: Vec<u32>,
    /// True at real token positions, false at padding.
    pub attention_mask: Vec<bool>,
    pub context_length: usize,
}

impl DialogueWindow {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    /// Token range holding the newest instruction slot.
    pub fn newest_slot(&self) -> std::ops::Range<usize> {
        self.context_length * SLOT_LEN..(self.context_length + 1) * SLOT_LEN
    }
}

/// Pack the dialogue history into the fixed slot layout.
///
/// `turn` indexes the current decision point within `history` (which holds
/// the utterance pairs of turns `0..=turn`); `context` is the number of
/// previous slots.
pub fn assemble_dialogue_text(
    history: &[UtterancePair],
    turn: usize,
    context: usize,
    tokenizer: &dyn SpeakerTokenizer,
) -> DialogueWindow {
    let slots = context + 1;
    let mut token_ids = Vec::with_capacity(slots * SLOT_LEN);
    let mut attention_mask = Vec::with_capacity(slots * SLOT_LEN);
    for slot in 0..slots {
        let j = turn as isize - context as isize + slot as isize;
        let mut toks: Vec<u32> = Vec::new();
        if j >= 0 {
            let j = j as usize;
            if j > 0 {
                if let Some(prev) = history.get(j - 1) {
                    toks.push(DRAWER_ID);
                    toks.extend(tokenizer.encode_text(&prev.drawer));
                }
            }
            if let Some(cur) = history.get(j) {
                toks.push(TELLER_ID);
                toks.extend(tokenizer.encode_text(&cur.teller));
            }
        }
        toks.truncate(SLOT_LEN);
        let fill = toks.len();
        token_ids.extend(&toks);
        token_ids.extend(std::iter::repeat(PAD_ID).take(SLOT_LEN - fill));
        attention_mask.extend(std::iter::repeat(true).take(fill));
        attention_mask.extend(std::iter::repeat(false).take(SLOT_LEN - fill));
    }
    DialogueWindow {
        token_ids,
        attention_mask,
        context_length: context,
    }
}

#[cfg(test)]
mod tests {
    use super::text::{HashedTextEncoder, TextEmbedder};
    use super::*;

    fn pair(t: &str, d: &str) -> UtterancePair {
        UtterancePair {
            teller: t.into(),
            drawer: d.into(),
        }
    }

    #[test]
    fn first_turn_has_all_padding_history() {
        let enc = HashedTextEncoder::new(64, 7);
        let history = vec![pair("place the sun high up", "")];
        let w = assemble_dialogue_text(&history, 0, 3, enc.tokenizer());
        assert_eq!(w.len(), 4 * SLOT_LEN);
        assert!(w.token_ids[..3 * SLOT_LEN].iter().all(|&t| t == PAD_ID));
        assert!(w.attention_mask[..3 * SLOT_LEN].iter().all(|&m| !m));
        // newest slot starts with the giver speaker token
        assert_eq!(w.token_ids[w.newest_slot().start], TELLER_ID);
        assert!(w.attention_mask[w.newest_slot().start]);
    }

    #[test]
    fn slot_offsets_follow_index_arithmetic() {
        let enc = HashedTextEncoder::new(64, 7);
        let history = vec![
            pair("a sun please", "which corner?"),
            pair("top left corner", "done"),
        ];
        let w = assemble_dialogue_text(&history, 1, 1, enc.tokenizer());
        assert_eq!(w.len(), 2 * SLOT_LEN);
        // slot 0 is turn 0: no previous drawer utterance, starts with teller
        assert_eq!(w.token_ids[0], TELLER_ID);
        // slot 1 is turn 1: previous drawer utterance prefixed
        assert_eq!(w.token_ids[SLOT_LEN], DRAWER_ID);
        let drawer_len = enc.tokenizer().encode_text("which corner?").len();
        assert_eq!(w.token_ids[SLOT_LEN + 1 + drawer_len], TELLER_ID);
    }

    #[test]
    fn newest_instruction_is_always_in_the_last_slot() {
        let enc = HashedTextEncoder::new(64, 7);
        let history: Vec<UtterancePair> = (0..6)
            .map(|i| pair(&format!("instruction {i}"), &format!("reply {i}")))
            .collect();
        for c in 0..4 {
            for t in 0..history.len() {
                let w = assemble_dialogue_text(&history[..=t], t, c, enc.tokenizer());
                let r = w.newest_slot();
                assert_eq!(r, c * SLOT_LEN..(c + 1) * SLOT_LEN);
                let expect_first = if t > 0 { DRAWER_ID } else { TELLER_ID };
                assert_eq!(w.token_ids[r.start], expect_first);
            }
        }
    }

    #[test]
    fn overlong_utterances_truncate_keeping_the_head() {
        let enc = HashedTextEncoder::new(64, 7);
        let long = vec!["word"; 200].join(" ");
        let history = vec![pair(&long, "")];
        let w = assemble_dialogue_text(&history, 0, 0, enc.tokenizer());
        assert_eq!(w.len(), SLOT_LEN);
        assert!(w.attention_mask.iter().all(|&m| m));
        assert_eq!(w.token_ids[0], TELLER_ID);
    }
}

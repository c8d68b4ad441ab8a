//! Byte-level tokenizer and chat template.
//!
//! The vocabulary is fixed: four special tokens followed by one token per
//! byte value, 260 ids total. Byte-level coverage means every Unicode
//! script — Indic or synthetic cipher — encodes without training.
//!
//! Template (documented wire format):
//!
//! ```text
//! BOS  "USER: " [IMG] {user text} "\n" "ASSISTANT: " {assistant text} EOS  …
//! ```
//!
//! The IMG placeholder appears once, at the start of the first user turn of
//! an image-bearing sample. The loss mask covers exactly the assistant text
//! bytes and their EOS. No system prompt is emitted.

use crate::data::ConversationSample;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Fixed vocabulary layout: specials then bytes.
pub struct VocabLayout;

impl VocabLayout {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const IMG: TokenId = 3;
    pub const BYTE_OFFSET: TokenId = 4;
    pub const VOCAB_SIZE: usize = 260;

    pub fn is_special(id: TokenId) -> bool {
        id < Self::BYTE_OFFSET
    }

    pub fn is_byte(id: TokenId) -> bool {
        (Self::BYTE_OFFSET..Self::VOCAB_SIZE as TokenId).contains(&id)
    }
}

pub const USER_PREFIX: &str = "USER: ";
pub const USER_SUFFIX: &str = "\n";
pub const ASSISTANT_PREFIX: &str = "ASSISTANT: ";

/// UTF-8 bytes shifted past the special ids. No BOS/EOS framing here.
pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(|b| b as TokenId + VocabLayout::BYTE_OFFSET).collect()
}

/// Inverse of [`encode`] on byte tokens; invalid UTF-8 renders replacement
/// characters. Special or out-of-range ids are rejected — callers strip
/// specials first.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= VocabLayout::VOCAB_SIZE {
            return Err(Error::Vocabulary {
                id,
                vocab: VocabLayout::VOCAB_SIZE,
            });
        }
        if VocabLayout::is_special(id) {
            return Err(Error::Schema(format!(
                "decode expects byte tokens only, got special id {id}"
            )));
        }
        bytes.push((id - VocabLayout::BYTE_OFFSET) as u8);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// A conversation rendered to token ids with its supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub image_slot: Option<usize>,
}

impl RenderedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Renders a conversation through the chat template.
///
/// With `for_training` the sample must end on an assistant turn and the
/// mask marks every assistant span plus its EOS. Without it, the final
/// assistant text (if present) is dropped and the sequence ends after the
/// `ASSISTANT: ` cue, ready for generation.
pub fn render_conversation(sample: &ConversationSample, for_training: bool) -> Result<RenderedSample> {
    sample.validate()?;
    if for_training && sample.turns.len() % 2 != 0 {
        return Err(Error::Schema(format!(
            "sample {}: training sample must end with an assistant turn",
            sample.id
        )));
    }

    let mut ids = vec![VocabLayout::BOS];
    let mut mask = vec![false];
    let mut image_slot = None;

    let push = |ids: &mut Vec<TokenId>, mask: &mut Vec<bool>, tokens: Vec<TokenId>, supervised: bool| {
        mask.extend(std::iter::repeat(supervised).take(tokens.len()));
        ids.extend(tokens);
    };

    // Pairs; a trailing user turn (generation) is handled after the loop.
    let full_pairs = sample.turns.len() / 2;
    let keep_pairs = if for_training { full_pairs } else { full_pairs.saturating_sub(if sample.turns.len() % 2 == 0 { 1 } else { 0 }) };

    let render_user = |ids: &mut Vec<TokenId>, mask: &mut Vec<bool>, index: usize, text: &str, slot: &mut Option<usize>| {
        push(ids, mask, encode(USER_PREFIX), false);
        if index == 0 && sample.image.is_some() {
            *slot = Some(ids.len());
            ids.push(VocabLayout::IMG);
            mask.push(false);
        }
        push(ids, mask, encode(text), false);
        push(ids, mask, encode(USER_SUFFIX), false);
    };

    for pair in 0..keep_pairs {
        let user = &sample.turns[pair * 2];
        let assistant = &sample.turns[pair * 2 + 1];
        render_user(&mut ids, &mut mask, pair, &user.text, &mut image_slot);
        push(&mut ids, &mut mask, encode(ASSISTANT_PREFIX), false);
        push(&mut ids, &mut mask, encode(&assistant.text), true);
        ids.push(VocabLayout::EOS);
        mask.push(true);
    }

    if !for_training {
        // Remaining user turn (odd count) or the user half of the dropped
        // final pair; either way the prompt ends with the assistant cue.
        let last_user_index = if sample.turns.len() % 2 == 1 {
            sample.turns.len() - 1
        } else {
            sample.turns.len() - 2
        };
        render_user(
            &mut ids,
            &mut mask,
            last_user_index / 2,
            &sample.turns[last_user_index].text,
            &mut image_slot,
        );
        push(&mut ids, &mut mask, encode(ASSISTANT_PREFIX), false);
    }

    Ok(RenderedSample {
        ids,
        loss_mask: mask,
        image_slot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Color, ImageRef, Shape, ShapeSpec, Turn};
    use proptest::prelude::*;

    fn image() -> ImageRef {
        ImageRef::Spec(ShapeSpec {
            shape: Shape::Circle,
            color: Color::Red,
            row: 0,
            col: 0,
        })
    }

    fn sample(image: Option<ImageRef>, turns: Vec<Turn>) -> ConversationSample {
        ConversationSample {
            id: "t".into(),
            language: "en".into(),
            image,
            turns,
        }
    }

    #[test]
    fn encode_maps_bytes_past_specials() {
        assert_eq!(encode(""), Vec::<TokenId>::new());
        assert_eq!(encode("ab"), vec![101, 102]);
    }

    #[test]
    fn decode_inverts_encode() {
        assert_eq!(decode(&[]).unwrap(), "");
        assert_eq!(decode(&[101, 102]).unwrap(), "ab");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(matches!(
            decode(&[260]),
            Err(Error::Vocabulary { id: 260, vocab: 260 })
        ));
    }

    #[test]
    fn decode_replaces_invalid_utf8() {
        // A lone continuation byte is not valid UTF-8.
        let ids = vec![0x80 + VocabLayout::BYTE_OFFSET];
        assert_eq!(decode(&ids).unwrap(), "\u{FFFD}");
    }

    proptest! {
        #[test]
        fn round_trip_holds_for_unicode(text in "\\PC{0,32}") {
            prop_assert_eq!(decode(&encode(&text)).unwrap(), text);
        }
    }

    #[test]
    fn round_trip_holds_for_indic_scripts() {
        for text in ["नमस्ते दुनिया", "বাংলা লিপি", "தமிழ் எழுத்து"] {
            assert_eq!(decode(&encode(text)).unwrap(), text);
        }
    }

    /// Hand-rendered single-turn caption: BOS + "USER: " + IMG + prompt +
    /// "\n" + "ASSISTANT: " + caption + EOS, mask only on caption + EOS.
    #[test]
    fn single_turn_caption_layout_and_mask() {
        let s = sample(Some(image()), vec![Turn::user("look"), Turn::assistant("a red dot")]);
        let r = render_conversation(&s, true).unwrap();

        let mut expected = vec![VocabLayout::BOS];
        expected.extend(encode("USER: "));
        let slot = expected.len();
        expected.push(VocabLayout::IMG);
        expected.extend(encode("look"));
        expected.extend(encode("\n"));
        expected.extend(encode("ASSISTANT: "));
        let caption_start = expected.len();
        expected.extend(encode("a red dot"));
        expected.push(VocabLayout::EOS);

        assert_eq!(r.ids, expected);
        assert_eq!(r.image_slot, Some(slot));
        for (i, &m) in r.loss_mask.iter().enumerate() {
            assert_eq!(m, i >= caption_start, "position {i}");
        }
        // 9 caption bytes + EOS supervised.
        assert_eq!(r.loss_mask.iter().filter(|&&m| m).count(), 10);
    }

    #[test]
    fn text_only_sample_has_no_image_slot() {
        let s = sample(None, vec![Turn::user("hi"), Turn::assistant("there")]);
        let r = render_conversation(&s, true).unwrap();
        assert_eq!(r.image_slot, None);
        assert!(!r.ids.contains(&VocabLayout::IMG));
        assert_eq!(r.loss_mask.iter().filter(|&&m| m).count(), "there".len() + 1);
    }

    /// Hand-rendered two-turn dialog: two masked spans with unmasked
    /// scaffolding between them.
    #[test]
    fn two_turn_dialog_has_two_masked_spans() {
        let s = sample(
            Some(image()),
            vec![
                Turn::user("what"),
                Turn::assistant("a dot"),
                Turn::user("color?"),
                Turn::assistant("red"),
            ],
        );
        let r = render_conversation(&s, true).unwrap();
        let spans: Vec<(usize, usize)> = {
            let mut spans = Vec::new();
            let mut start = None;
            for (i, &m) in r.loss_mask.iter().enumerate() {
                match (m, start) {
                    (true, None) => start = Some(i),
                    (false, Some(s0)) => {
                        spans.push((s0, i));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s0) = start {
                spans.push((s0, r.loss_mask.len()));
            }
            spans
        };
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].1 - spans[0].0, "a dot".len() + 1);
        assert_eq!(spans[1].1 - spans[1].0, "red".len() + 1);
        // IMG only in the first user turn.
        assert_eq!(r.ids.iter().filter(|&&id| id == VocabLayout::IMG).count(), 1);
    }

    #[test]
    fn generation_prompt_omits_final_assistant_span() {
        let s = sample(Some(image()), vec![Turn::user("look"), Turn::assistant("a red dot")]);
        let r = render_conversation(&s, false).unwrap();
        let mut expected = vec![VocabLayout::BOS];
        expected.extend(encode("USER: "));
        expected.push(VocabLayout::IMG);
        expected.extend(encode("look"));
        expected.extend(encode("\n"));
        expected.extend(encode("ASSISTANT: "));
        assert_eq!(r.ids, expected);
        assert!(r.loss_mask.iter().all(|&m| !m));

        // A user-only sample renders to the same prompt.
        let s2 = sample(Some(image()), vec![Turn::user("look")]);
        assert_eq!(render_conversation(&s2, false).unwrap().ids, expected);
    }

    #[test]
    fn malformed_turn_order_is_schema_error() {
        let s = sample(None, vec![Turn::assistant("hello")]);
        assert!(matches!(render_conversation(&s, true), Err(Error::Schema(_))));
        let s2 = sample(None, vec![Turn::user("a"), Turn::user("b")]);
        assert!(matches!(render_conversation(&s2, true), Err(Error::Schema(_))));
        let s3 = sample(None, vec![Turn::user("a")]);
        assert!(matches!(render_conversation(&s3, true), Err(Error::Schema(_))));
    }

    proptest! {
        /// The mask marks exactly the assistant spans: decoding each masked
        /// span (minus EOS) recovers the assistant text, and no user text
        /// or scaffolding is ever supervised.
        #[test]
        fn mask_covers_exactly_assistant_spans(
            n_pairs in 1usize..4,
            texts in prop::collection::vec("[a-z ]{0,12}", 8),
            with_image in any::<bool>(),
            lang_idx in 0usize..3,
        ) {
            let mut turns = Vec::new();
            for p in 0..n_pairs {
                turns.push(Turn::user(texts[p * 2].clone()));
                turns.push(Turn::assistant(texts[p * 2 + 1].clone()));
            }
            let language = ["en", "l1", "l2"][lang_idx];
            let s = ConversationSample {
                id: "p".into(),
                language: language.into(),
                image: if with_image { Some(image()) } else { None },
                turns: turns.clone(),
            };
            let r = render_conversation(&s, true).unwrap();
            prop_assert_eq!(r.ids.len(), r.loss_mask.len());

            // Collect masked spans.
            let mut spans: Vec<Vec<TokenId>> = Vec::new();
            let mut current: Option<Vec<TokenId>> = None;
            for (i, &m) in r.loss_mask.iter().enumerate() {
                if m {
                    current.get_or_insert_with(Vec::new).push(r.ids[i]);
                } else if let Some(span) = current.take() {
                    spans.push(span);
                }
            }
            if let Some(span) = current.take() {
                spans.push(span);
            }
            prop_assert_eq!(spans.len(), n_pairs);
            for (p, span) in spans.iter().enumerate() {
                prop_assert_eq!(*span.last().unwrap(), VocabLayout::EOS);
                let text = decode(&span[..span.len() - 1]).unwrap();
                prop_assert_eq!(&text, &turns[p * 2 + 1].text);
            }

            // Rendering ignores the language tag.
            let mut s_en = s.clone();
            s_en.language = "en".into();
            prop_assert_eq!(render_conversation(&s_en, true).unwrap(), r);
        }
    }
}

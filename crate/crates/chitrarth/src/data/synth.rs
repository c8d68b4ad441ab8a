//! Procedural image/caption generator: colored shapes on a 3×3 grid with
//! exact English captions, the verifiable grounding corpus for training
//! and evaluation fixtures.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{cipher, stable_hash, Color, ConversationSample, ImageRef, Shape, ShapeSpec, Turn};
use crate::error::{Error, Result};

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];

/// Instruction phrases a caption sample's user turn is drawn from. All
/// generated text is lowercase so cipher translation round-trips through
/// answer normalization without case handling.
pub const INSTRUCTION_POOL: [&str; 4] = [
    "describe the image.",
    "what is in the image?",
    "what do you see?",
    "give a short caption.",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub spec: ShapeSpec,
    pub caption: String,
}

/// The caption always names the rendered color, shape, and grid position.
pub fn caption_for(spec: &ShapeSpec) -> String {
    format!(
        "a {} {} in the {} {}",
        spec.color, spec.shape, ROW_WORDS[spec.row as usize], COL_WORDS[spec.col as usize]
    )
}

/// Deterministic corpus of `n` image/caption pairs. Shape-color classes
/// cycle so any `n` divisible by 9 covers them uniformly; positions are
/// drawn from the seeded stream.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<SynthItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % 9;
            let spec = ShapeSpec {
                shape: SHAPES[class / 3],
                color: COLORS[class % 3],
                row: rng.random_range(0..3u8),
                col: rng.random_range(0..3u8),
            };
            SynthItem {
                id: format!("synth-{seed}-{i}"),
                spec,
                caption: caption_for(&spec),
            }
        })
        .collect()
}

/// Renders the spec as an RGB8 raster (`size`×`size`, row-major, white
/// background).
pub fn render_shape(spec: &ShapeSpec, size: usize) -> Vec<u8> {
    let rgb: [u8; 3] = match spec.color {
        Color::Red => [255, 0, 0],
        Color::Green => [0, 200, 0],
        Color::Blue => [0, 0, 255],
    };
    let cell = size as f64 / 3.0;
    let cx = (spec.col as f64 + 0.5) * cell;
    let cy = (spec.row as f64 + 0.5) * cell;
    let r = cell * 0.38;
    let mut pixels = vec![255u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match spec.shape {
                Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
                Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
                Shape::Triangle => {
                    py >= cy - r && py <= cy + r && (px - cx).abs() <= (py - cy + r) / 2.0
                }
            };
            if inside {
                let at = (y * size + x) * 3;
                pixels[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
    pixels
}

/// Follow-up question used by two-turn dialog samples.
pub const COLOR_QUESTION: &str = "what color is it?";

/// Yes/no object-presence question over a shape-color class.
pub fn yesno_question(shape: Shape, color: Color) -> String {
    format!("is there a {color} {shape} in the image?")
}

/// Text-only English pairs standing in for the instruction-tuning slice
/// that has no images.
pub const TEXT_ONLY_POOL: [(&str, &str); 4] = [
    ("say hello.", "hello there."),
    ("name a primary color.", "red is a primary color."),
    ("how many corners does a triangle have?", "a triangle has three corners."),
    ("name a shape with four equal sides.", "a square has four equal sides."),
];

/// Instruction-tuning corpus: captions, yes/no grounding questions,
/// two-turn dialogs, and (English only) text-only pairs, cycled by index.
/// For cipher languages every turn is translated; the text-only slice is
/// replaced by captions since that data is English-only.
pub fn stage2_corpus(n: usize, seed: u64, language: &str) -> Result<Vec<ConversationSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = synth_corpus(n, seed ^ 0x5f37_59df);
    let ciphered = cipher::is_cipher_language(language);
    let translate = |text: &str| -> Result<String> {
        if ciphered {
            cipher::cipher_translate(text, language)
        } else {
            Ok(text.to_string())
        }
    };

    let mut samples = Vec::with_capacity(n);
    for (i, item) in items.into_iter().enumerate() {
        let id = format!("it-{language}-{seed}-{i}");
        let image = ImageRef::Spec(item.spec);
        let kind = i % 10;
        let sample = match kind {
            0..=4 => {
                let caption = translate(&item.caption)?;
                caption_to_single_turn(image, &caption, language, &id)?
            }
            5 | 6 => {
                let positive = rng.random_bool(0.5);
                let (shape, color) = if positive {
                    (item.spec.shape, item.spec.color)
                } else {
                    // Any class other than the rendered one.
                    let mut pick = (
                        SHAPES[rng.random_range(0..3usize)],
                        COLORS[rng.random_range(0..3usize)],
                    );
                    while pick == (item.spec.shape, item.spec.color) {
                        pick = (
                            SHAPES[rng.random_range(0..3usize)],
                            COLORS[rng.random_range(0..3usize)],
                        );
                    }
                    pick
                };
                let question = translate(&yesno_question(shape, color))?;
                let reply = translate(if positive { "yes" } else { "no" })?;
                ConversationSample {
                    id,
                    language: language.to_string(),
                    image: Some(image),
                    turns: vec![Turn::user(question), Turn::assistant(reply)],
                }
            }
            7 | 8 => {
                let mut sample = {
                    let caption = translate(&item.caption)?;
                    caption_to_single_turn(image, &caption, language, &id)?
                };
                sample.turns.push(Turn::user(translate(COLOR_QUESTION)?));
                sample
                    .turns
                    .push(Turn::assistant(translate(&item.spec.color.to_string())?));
                sample
            }
            _ => {
                if ciphered {
                    let caption = translate(&item.caption)?;
                    caption_to_single_turn(image, &caption, language, &id)?
                } else {
                    let (q, a) = TEXT_ONLY_POOL[(stable_hash(&id) % TEXT_ONLY_POOL.len() as u64) as usize];
                    ConversationSample {
                        id,
                        language: language.to_string(),
                        image: None,
                        turns: vec![Turn::user(q), Turn::assistant(a)],
                    }
                }
            }
        };
        samples.push(sample);
    }
    Ok(samples)
}

/// Wraps an image/caption pair as a single-turn conversation: the user turn
/// is an instruction phrase chosen deterministically from the pool (hashed
/// sample id), translated when the language is a registered cipher.
pub fn caption_to_single_turn(
    image: ImageRef,
    caption: &str,
    language: &str,
    id: &str,
) -> Result<ConversationSample> {
    if caption.is_empty() {
        return Err(Error::Schema(format!("sample {id}: empty caption")));
    }
    let phrase = INSTRUCTION_POOL[(stable_hash(id) % INSTRUCTION_POOL.len() as u64) as usize];
    let instruction = if cipher::is_cipher_language(language) {
        cipher::cipher_translate(phrase, language)?
    } else {
        phrase.to_string()
    };
    Ok(ConversationSample {
        id: id.to_string(),
        language: language.to_string(),
        image: Some(image),
        turns: vec![Turn::user(instruction), Turn::assistant(caption)],
    })
}

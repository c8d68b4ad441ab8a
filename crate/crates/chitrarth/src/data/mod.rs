//! Conversation records, manifest IO, and the dataset builders.
//!
//! Manifest format: one UTF-8 JSON object per line with fields
//! `{id, language, image?, turns: [{role, text}]}`. An image is either a
//! path to a binary PPM (P6) file, relative to the manifest, or an inline
//! procedural spec `{shape, color, row, col}`.

pub mod cipher;
pub mod mix;
pub mod synth;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        })
    }
}

/// Procedural image: one colored shape in a 3×3 position grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: Color,
    pub row: u8,
    pub col: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Spec(ShapeSpec),
}

/// One training/eval conversation: optional image, language tag, and
/// alternating user/assistant turns starting with user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub turns: Vec<Turn>,
}

impl ConversationSample {
    /// Checks turn alternation (user first) and a present language tag.
    pub fn validate(&self) -> Result<()> {
        if self.language.is_empty() {
            return Err(Error::Schema(format!("sample {}: missing language tag", self.id)));
        }
        if self.turns.is_empty() {
            return Err(Error::Schema(format!("sample {}: no turns", self.id)));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(Error::Schema(format!(
                    "sample {}: turn {} must be {:?}, turns alternate starting with user",
                    self.id, i, expected
                )));
            }
        }
        Ok(())
    }
}

/// Loads and validates a line-oriented manifest. Image paths are resolved
/// relative to the manifest and must exist; malformed lines are reported
/// with their 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ConversationSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::schema_at(line_no, format!("invalid JSON: {e}")))?;
        if value.get("image").map(|v| v.is_array()) == Some(true) {
            return Err(Error::UnsupportedModality(format!(
                "line {line_no}: at most one image per sample"
            )));
        }
        let mut sample: ConversationSample = serde_json::from_value(value)
            .map_err(|e| Error::schema_at(line_no, e))?;
        sample
            .validate()
            .map_err(|e| Error::schema_at(line_no, e))?;
        if let Some(ImageRef::Path(p)) = &sample.image {
            let resolved = base.join(p);
            if !resolved.is_file() {
                return Err(Error::schema_at(
                    line_no,
                    format!("image path does not resolve: {}", resolved.display()),
                ));
            }
            sample.image = Some(ImageRef::Path(resolved.to_string_lossy().into_owned()));
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_manifest(path: &Path, samples: &[ConversationSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Stable FNV-1a hash used wherever a deterministic id-derived choice is
/// needed (instruction selection, per-language RNG streams).
pub fn stable_hash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

//! Template captions: `a render of a [size] [color] [shape] with a [accent] top`.
//! Every bracketed item is optional in the grammar; when generating, the
//! shape is always kept and the others are dropped independently.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::vocab::{AttributeVocab, Shape, Size};
use crate::error::{Error, Result};
use crate::seed;

pub const PREFIX: &str = "a render of a";

/// Attributes mentioned by a caption; `None` means not mentioned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Option<Shape>,
    pub color: Option<String>,
    pub size: Option<Size>,
    pub accent: Option<String>,
}

impl Attributes {
    pub fn full(spec: &SceneSpec) -> Self {
        Self {
            shape: Some(spec.shape),
            color: Some(spec.color.clone()),
            size: Some(spec.size),
            accent: Some(spec.accent.clone()),
        }
    }

    pub fn count(&self) -> usize {
        self.shape.is_some() as usize
            + self.color.is_some() as usize
            + self.size.is_some() as usize
            + self.accent.is_some() as usize
    }

    pub fn to_caption(&self) -> String {
        let mut s = String::from(PREFIX);
        if let Some(size) = self.size {
            s.push(' ');
            s.push_str(size.name());
        }
        if let Some(c) = &self.color {
            s.push(' ');
            s.push_str(c);
        }
        if let Some(shape) = self.shape {
            s.push(' ');
            s.push_str(shape.name());
        }
        if let Some(a) = &self.accent {
            s.push_str(" with a ");
            s.push_str(a);
            s.push_str(" top");
        }
        s
    }
}

/// Fills the template from `spec`, dropping size, color and the accent clause
/// independently with probability `drop_rate`.
pub fn make_caption(spec: &SceneSpec, seed: u64, drop_rate: f64) -> String {
    let mut rng = seed::rng(seed, "caption", 0);
    let mut keep = || !rng.random_bool(drop_rate.clamp(0.0, 1.0));
    let size = keep().then_some(spec.size);
    let color = keep().then(|| spec.color.clone());
    let accent = keep().then(|| spec.accent.clone());
    Attributes {
        shape: Some(spec.shape),
        color,
        size,
        accent,
    }
    .to_caption()
}

/// Parses a caption against the template grammar and `vocab`.
pub fn parse_caption(text: &str, vocab: &AttributeVocab) -> Result<Attributes> {
    let bad = |why: &str| Error::InvalidArgument(format!("caption {text:?} does not parse: {why}"));
    let rest = text.strip_prefix(PREFIX).ok_or_else(|| bad("missing prefix"))?;
    let mut words: Vec<&str> = rest.split_whitespace().collect();
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(bad("missing space after prefix"));
    }
    let mut out = Attributes::default();
    // trailing "with a <color> top"
    if words.len() >= 4 && words[words.len() - 4..words.len() - 2] == ["with", "a"] && words[words.len() - 1] == "top" {
        let accent = words[words.len() - 2];
        if vocab.color_index(accent).is_none() {
            return Err(bad("unknown accent color"));
        }
        out.accent = Some(accent.to_string());
        words.truncate(words.len() - 4);
    }
    let mut it = words.into_iter().peekable();
    if let Some(size) = it.peek().and_then(|w| Size::parse(w)).filter(|s| vocab.size_index(*s).is_some()) {
        out.size = Some(size);
        it.next();
    }
    if let Some(c) = it.peek().filter(|w| vocab.color_index(w).is_some()) {
        out.color = Some(c.to_string());
        it.next();
    }
    if let Some(shape) = it.peek().and_then(|w| Shape::parse(w)).filter(|s| vocab.shape_index(*s).is_some()) {
        out.shape = Some(shape);
        it.next();
    }
    if let Some(w) = it.next() {
        return Err(bad(&format!("unexpected word {w:?}")));
    }
    Ok(out)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed albedo table; vocabularies choose a subset of these names.
pub const COLOR_TABLE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("orange", [0.95, 0.50, 0.05]),
    ("yellow", [0.95, 0.88, 0.10]),
    ("green", [0.10, 0.65, 0.15]),
    ("cyan", [0.10, 0.75, 0.85]),
    ("blue", [0.10, 0.20, 0.85]),
    ("purple", [0.50, 0.12, 0.70]),
    ("pink", [0.98, 0.55, 0.75]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Cube, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 0.35,
            Size::Large => 0.6,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLOR_TABLE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Closed answer sets for every attribute. Accent colors share the color list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeVocab {
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    pub sizes: Vec<Size>,
}

impl Default for AttributeVocab {
    fn default() -> Self {
        Self {
            shapes: Shape::ALL.to_vec(),
            colors: COLOR_TABLE.iter().map(|(n, _)| n.to_string()).collect(),
            sizes: Size::ALL.to_vec(),
        }
    }
}

impl AttributeVocab {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.sizes.is_empty() {
            return Err(Error::Config("vocabulary lists must be non-empty".into()));
        }
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown color {c:?}")));
            }
        }
        let unique = |n: usize, names: Vec<&str>| {
            let mut v = names;
            v.sort_unstable();
            v.dedup();
            v.len() == n
        };
        if !unique(self.shapes.len(), self.shapes.iter().map(|s| s.name()).collect())
            || !unique(self.colors.len(), self.colors.iter().map(String::as_str).collect())
            || !unique(self.sizes.len(), self.sizes.iter().map(|s| s.name()).collect())
        {
            return Err(Error::Config("vocabulary names must be unique".into()));
        }
        Ok(())
    }

    pub fn color_index(&self, name: &str) -> Option<usize> {
        self.colors.iter().position(|c| c == name)
    }

    pub fn shape_index(&self, s: Shape) -> Option<usize> {
        self.shapes.iter().position(|&v| v == s)
    }

    pub fn size_index(&self, s: Size) -> Option<usize> {
        self.sizes.iter().position(|&v| v == s)
    }

    /// Number of answers per question: (shape, color, size, accent).
    pub fn head_sizes(&self) -> [usize; 4] {
        [self.shapes.len(), self.colors.len(), self.sizes.len(), self.colors.len()]
    }

    /// Every word a caption can contain, in a fixed order.
    pub fn tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = ["a", "render", "of", "with", "top"].iter().map(|s| s.to_string()).collect();
        t.extend(self.sizes.iter().map(|s| s.name().to_string()));
        t.extend(self.colors.iter().cloned());
        t.extend(self.shapes.iter().map(|s| s.name().to_string()));
        t
    }
}

//! Synthetic composed-retrieval corpus.
//!
//! Scenes are small sets of attributed objects over a background. A triplet
//! pairs a reference scene with an edit script; the target is whatever
//! [`apply_edits`] produces, so ground truth is known analytically. Candidates
//! are grouped into subsets of six scenes that share their shape multiset and
//! include scenes where only part of an edit script was applied.

mod caption;
mod edits;
mod generate;
mod io;
mod render;

pub use caption::{caption_tokens, parse_caption, tokens, MAX_CAPTION_LEN};
pub use edits::apply_edits;
pub use generate::{gen_corpus, CorpusConfig};
pub use io::{read_corpus, write_corpus};
pub use render::{RenderConfig, Renderer, PATCHES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SHAPES: u8 = 8;
pub const N_COLORS: u8 = 8;
pub const N_SIZES: u8 = 3;
pub const N_BACKGROUNDS: u8 = 4;
pub const MAX_OBJECTS: usize = 4;
pub const SUBSET_SIZE: usize = 6;
pub const MAX_SCRIPT_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
}

impl Object {
    pub fn new(shape: u8, color: u8, size: u8) -> Self {
        Self { shape, color, size }
    }

    pub fn is_valid(&self) -> bool {
        self.shape < N_SHAPES && self.color < N_COLORS && self.size < N_SIZES
    }

    pub fn get(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::Shape => self.shape,
            Attribute::Color => self.color,
            Attribute::Size => self.size,
        }
    }

    pub fn with(mut self, attr: Attribute, value: u8) -> Self {
        match attr {
            Attribute::Shape => self.shape = value,
            Attribute::Color => self.color = value,
            Attribute::Size => self.size = value,
        }
        self
    }
}

/// Scene with objects kept in canonical `(shape, color, size)` order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SceneRepr")]
pub struct Scene {
    objects: Vec<Object>,
    background: u8,
}

#[derive(Deserialize)]
struct SceneRepr {
    objects: Vec<Object>,
    background: u8,
}

impl TryFrom<SceneRepr> for Scene {
    type Error = Error;

    fn try_from(r: SceneRepr) -> Result<Self> {
        Scene::new(r.objects, r.background)
    }
}

impl Scene {
    pub fn new(mut objects: Vec<Object>, background: u8) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::InvalidScene("scene has no objects".into()));
        }
        if objects.len() > MAX_OBJECTS {
            return Err(Error::CapacityExceeded(objects.len()));
        }
        if let Some(o) = objects.iter().find(|o| !o.is_valid()) {
            return Err(Error::InvalidScene(format!("object out of range: {o:?}")));
        }
        if background >= N_BACKGROUNDS {
            return Err(Error::InvalidScene(format!("background {background} out of range")));
        }
        objects.sort();
        Ok(Self {
            objects,
            background,
        })
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn background(&self) -> u8 {
        self.background
    }

    /// Sorted shape ids (the multiset shared inside a subset).
    pub fn shape_multiset(&self) -> Vec<u8> {
        self.objects.iter().map(|o| o.shape).collect()
    }

    pub fn has_duplicate_objects(&self) -> bool {
        self.objects.windows(2).any(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Color,
    Size,
}

impl Attribute {
    pub fn cardinality(self) -> u8 {
        match self {
            Attribute::Shape => N_SHAPES,
            Attribute::Color => N_COLORS,
            Attribute::Size => N_SIZES,
        }
    }
}

/// Attribute pattern; matches objects agreeing on every specified field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u8>,
}

impl Selector {
    /// Selector naming every attribute of `o`.
    pub fn exact(o: Object) -> Self {
        Self {
            shape: Some(o.shape),
            color: Some(o.color),
            size: Some(o.size),
        }
    }

    pub fn matches(&self, o: &Object) -> bool {
        self.shape.is_none_or(|s| s == o.shape)
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|z| z == o.size)
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_none() && self.color.is_none() && self.size.is_none()
    }

    fn in_range(&self) -> bool {
        self.shape.is_none_or(|s| s < N_SHAPES)
            && self.color.is_none_or(|c| c < N_COLORS)
            && self.size.is_none_or(|z| z < N_SIZES)
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let field = |v: Option<u8>| v.map_or("*".to_string(), |x| x.to_string());
        write!(
            f,
            "(shape {}, color {}, size {})",
            field(self.shape),
            field(self.color),
            field(self.size)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Add {
        object: Object,
    },
    Remove {
        selector: Selector,
    },
    Replace {
        selector: Selector,
        object: Object,
    },
    Modify {
        selector: Selector,
        attribute: Attribute,
        value: u8,
    },
    ChangeBackground {
        background: u8,
    },
}

impl Edit {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScript(msg));
        match self {
            Edit::Add { object } if !object.is_valid() => bad(format!("ADD object {object:?} out of range")),
            Edit::Remove { selector } | Edit::Replace { selector, .. } | Edit::Modify { selector, .. }
                if selector.is_empty() || !selector.in_range() =>
            {
                bad(format!("selector {selector} is empty or out of range"))
            }
            Edit::Replace { object, .. } if !object.is_valid() => {
                bad(format!("REPLACE object {object:?} out of range"))
            }
            Edit::Modify {
                attribute, value, ..
            } if *value >= attribute.cardinality() => bad(format!("MODIFY value {value} out of range")),
            Edit::ChangeBackground { background } if *background >= N_BACKGROUNDS => {
                bad(format!("background {background} out of range"))
            }
            _ => Ok(()),
        }
    }

    /// True when applying this edit can change the scene's shape multiset.
    pub fn changes_shapes(&self) -> bool {
        match self {
            Edit::Add { .. } | Edit::Remove { .. } => true,
            Edit::Replace { selector, object } => selector.shape != Some(object.shape),
            Edit::Modify { attribute, .. } => *attribute == Attribute::Shape,
            Edit::ChangeBackground { .. } => false,
        }
    }
}

/// Validated edit script: 1 to 4 in-range edits whose caption fits in 24 tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Edit>", into = "Vec<Edit>")]
pub struct EditScript(Vec<Edit>);

impl EditScript {
    pub fn new(edits: Vec<Edit>) -> Result<Self> {
        if edits.is_empty() || edits.len() > MAX_SCRIPT_LEN {
            return Err(Error::InvalidScript(format!(
                "script length {} outside [1, {MAX_SCRIPT_LEN}]",
                edits.len()
            )));
        }
        for e in &edits {
            e.validate()?;
        }
        let len = caption::encoded_len(&edits);
        if len > MAX_CAPTION_LEN {
            return Err(Error::InvalidScript(format!(
                "caption of {len} tokens exceeds {MAX_CAPTION_LEN}"
            )));
        }
        Ok(Self(edits))
    }

    pub fn edits(&self) -> &[Edit] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<Edit>> for EditScript {
    type Error = Error;

    fn try_from(v: Vec<Edit>) -> Result<Self> {
        EditScript::new(v)
    }
}

impl From<EditScript> for Vec<Edit> {
    fn from(s: EditScript) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub reference: Scene,
    pub edits: EditScript,
    pub target_id: usize,
    /// Render nonce of the reference image.
    pub nonce: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub candidates: Vec<Scene>,
    pub subsets: Vec<Vec<usize>>,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Subset index for every candidate id.
    pub fn subset_of(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.candidates.len()];
        for (s, members) in self.subsets.iter().enumerate() {
            for &m in members {
                map[m] = s;
            }
        }
        map
    }

    /// Render nonce of candidate `id`.
    pub fn candidate_nonce(id: usize) -> u64 {
        id as u64
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(self.seed, self.config.render)
    }
}

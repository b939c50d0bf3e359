//! Domain types shared across the model, data and evaluation modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConnaError, Result};

pub type UserId = usize;
pub type ItemId = usize;
pub type SloganId = usize;
pub type TemplateId = usize;

/// Object types, in the column order of the type-embedding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectType {
    User,
    Item,
    Slogan,
    Template,
}

impl ObjectType {
    pub const ALL: [ObjectType; 4] = [Self::User, Self::Item, Self::Slogan, Self::Template];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::User => "user",
            Self::Item => "item",
            Self::Slogan => "slogan",
            Self::Template => "template",
        }
    }
}

/// Vocabulary sizes per object type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub slogans: usize,
    pub templates: usize,
}

impl Vocab {
    pub fn size(&self, t: ObjectType) -> usize {
        match t {
            ObjectType::User => self.users,
            ObjectType::Item => self.items,
            ObjectType::Slogan => self.slogans,
            ObjectType::Template => self.templates,
        }
    }

    pub fn check(&self, t: ObjectType, id: usize) -> Result<()> {
        let size = self.size(t);
        if id < size {
            Ok(())
        } else {
            Err(ConnaError::Vocabulary {
                kind: t.name(),
                id,
                size,
            })
        }
    }
}

/// Number of items (`I`) and slogans (`S`) per creative; there is always
/// exactly one template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreativeShape {
    pub items: usize,
    pub slogans: usize,
}

impl CreativeShape {
    /// `B = I + S + 1`.
    pub fn slots(&self) -> usize {
        self.items + self.slogans + 1
    }
}

/// `I` items, `S` slogans and one template.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BundleCreative {
    pub items: Vec<ItemId>,
    pub slogans: Vec<SloganId>,
    pub template: TemplateId,
}

impl BundleCreative {
    pub fn validate(&self, shape: CreativeShape, vocab: &Vocab) -> Result<()> {
        if self.items.len() != shape.items || self.slogans.len() != shape.slogans {
            return Err(ConnaError::Shape(format!(
                "creative has {} items and {} slogans, expected {} and {}",
                self.items.len(),
                self.slogans.len(),
                shape.items,
                shape.slogans
            )));
        }
        for &i in &self.items {
            vocab.check(ObjectType::Item, i)?;
        }
        for &s in &self.slogans {
            vocab.check(ObjectType::Slogan, s)?;
        }
        vocab.check(ObjectType::Template, self.template)
    }

    /// Ids of the given type, in slot order.
    pub fn ids(&self, t: ObjectType) -> Vec<usize> {
        match t {
            ObjectType::Item => self.items.clone(),
            ObjectType::Slogan => self.slogans.clone(),
            ObjectType::Template => vec![self.template],
            ObjectType::User => Vec::new(),
        }
    }
}

impl fmt::Display for BundleCreative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "{}\t{}\t{}",
            join(&self.items),
            join(&self.slogans),
            self.template
        )
    }
}

/// Everything the encoder sees for one generation request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateContext {
    pub user: UserId,
    /// Historical clicked items; shorter histories are padded by the encoder.
    pub history: Vec<ItemId>,
    pub candidate_slogans: Vec<SloganId>,
    pub candidate_templates: Vec<TemplateId>,
}

impl CandidateContext {
    pub fn validate(&self, vocab: &Vocab, history_len: usize) -> Result<()> {
        vocab.check(ObjectType::User, self.user)?;
        if self.history.len() > history_len {
            return Err(ConnaError::Shape(format!(
                "history has {} items, limit is {history_len}",
                self.history.len()
            )));
        }
        if self.candidate_slogans.is_empty() || self.candidate_templates.is_empty() {
            return Err(ConnaError::Data(
                "candidate slogan and template sets must be non-empty".into(),
            ));
        }
        for &i in &self.history {
            vocab.check(ObjectType::Item, i)?;
        }
        for &s in &self.candidate_slogans {
            vocab.check(ObjectType::Slogan, s)?;
        }
        for &t in &self.candidate_templates {
            vocab.check(ObjectType::Template, t)?;
        }
        Ok(())
    }
}

/// Type schedule of the autoregressive baseline (a permutation of the three
/// generated types).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TypeOrdering(pub [ObjectType; 3]);

impl TypeOrdering {
    pub const ITEMS_SLOGANS_TEMPLATE: Self =
        Self([ObjectType::Item, ObjectType::Slogan, ObjectType::Template]);

    pub fn all() -> Vec<Self> {
        use ObjectType::*;
        [
            [Item, Slogan, Template],
            [Item, Template, Slogan],
            [Slogan, Item, Template],
            [Slogan, Template, Item],
            [Template, Item, Slogan],
            [Template, Slogan, Item],
        ]
        .into_iter()
        .map(Self)
        .collect()
    }

    /// `(type, within-type rank)` for each generation step.
    pub fn schedule(&self, shape: CreativeShape) -> Vec<(ObjectType, usize)> {
        self.0
            .iter()
            .flat_map(|&t| {
                let n = match t {
                    ObjectType::Item => shape.items,
                    ObjectType::Slogan => shape.slogans,
                    _ => 1,
                };
                (0..n).map(move |r| (t, r))
            })
            .collect()
    }
}

impl Default for TypeOrdering {
    fn default() -> Self {
        Self::ITEMS_SLOGANS_TEMPLATE
    }
}

impl fmt::Display for TypeOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plural = |t: ObjectType| match t {
            ObjectType::Item => "items",
            ObjectType::Slogan => "slogans",
            _ => "template",
        };
        write!(
            f,
            "{}-{}-{}",
            plural(self.0[0]),
            plural(self.0[1]),
            plural(self.0[2])
        )
    }
}

impl FromStr for TypeOrdering {
    type Err = ConnaError;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| match p {
            "items" | "item" | "i" => Ok(ObjectType::Item),
            "slogans" | "slogan" | "s" => Ok(ObjectType::Slogan),
            "template" | "templates" | "t" => Ok(ObjectType::Template),
            other => Err(ConnaError::config(
                "ar_ordering",
                format!("unknown object type `{other}`"),
            )),
        };
        let parts = s
            .split(['-', ',', '>'])
            .map(parse)
            .collect::<Result<Vec<_>>>()?;
        match parts.as_slice() {
            [a, b, c] if a != b && b != c && a != c => Ok(Self([*a, *b, *c])),
            _ => Err(ConnaError::config(
                "ar_ordering",
                format!("`{s}` is not a permutation of items, slogans, template"),
            )),
        }
    }
}

impl Serialize for TypeOrdering {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TypeOrdering {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

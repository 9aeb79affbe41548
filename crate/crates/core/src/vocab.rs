//! Token vocabulary shared by the synthetic environments.
//!
//! Ids are laid out as `[structural tags][noun tokens][numeric tokens 0..=max]`.
//! The structural block is absent for vocabularies built with
//! [`Vocabulary::numeric_only`].

use std::fmt;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    BraceOpen,
    BraceClose,
    AnswerClose,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::ThinkOpen,
        Tag::ThinkClose,
        Tag::AnswerOpen,
        Tag::BraceOpen,
        Tag::BraceClose,
        Tag::AnswerClose,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn text(self) -> &'static str {
        match self {
            Tag::ThinkOpen => "<think>",
            Tag::ThinkClose => "</think>",
            Tag::AnswerOpen => "<answer>",
            Tag::BraceOpen => "{",
            Tag::BraceClose => "}",
            Tag::AnswerClose => "</answer>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenClass {
    Structural,
    Noun,
    Numeric,
}

impl TokenClass {
    pub const ALL: [TokenClass; 3] = [TokenClass::Structural, TokenClass::Noun, TokenClass::Numeric];

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Structural => "structural",
            TokenClass::Noun => "noun",
            TokenClass::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Tag(Tag),
    Noun(usize),
    Number(u32),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Tag(t) => f.write_str(t.text()),
            Token::Noun(i) => write!(f, "noun_{i}"),
            Token::Number(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tags: bool,
    nouns: usize,
    max_numeric: u32,
}

impl Vocabulary {
    /// Tags, `nouns` noun tokens and numeric tokens `0..=max_numeric`.
    pub fn new(nouns: usize, max_numeric: u32) -> Self {
        Self {
            tags: true,
            nouns,
            max_numeric,
        }
    }

    pub fn numeric_only(max_numeric: u32) -> Self {
        Self {
            tags: false,
            nouns: 0,
            max_numeric,
        }
    }

    fn tag_count(&self) -> usize {
        if self.tags {
            Tag::ALL.len()
        } else {
            0
        }
    }

    fn numeric_offset(&self) -> usize {
        self.tag_count() + self.nouns
    }

    pub fn len(&self) -> usize {
        self.numeric_offset() + self.max_numeric as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nouns(&self) -> usize {
        self.nouns
    }

    pub fn max_numeric(&self) -> u32 {
        self.max_numeric
    }

    pub fn has_tags(&self) -> bool {
        self.tags
    }

    /// # Panics
    /// If the vocabulary was built without structural tags.
    pub fn tag(&self, tag: Tag) -> TokenId {
        assert!(self.tags, "vocabulary has no structural tags");
        tag.index()
    }

    pub fn noun(&self, i: usize) -> TokenId {
        assert!(i < self.nouns, "noun index {i} out of range");
        self.tag_count() + i
    }

    pub fn number(&self, v: u32) -> TokenId {
        assert!(v <= self.max_numeric, "numeric token {v} out of range");
        self.numeric_offset() + v as usize
    }

    pub fn decode(&self, id: TokenId) -> Option<Token> {
        let tags = self.tag_count();
        if id < tags {
            Some(Token::Tag(Tag::ALL[id]))
        } else if id < self.numeric_offset() {
            Some(Token::Noun(id - tags))
        } else if id < self.len() {
            Some(Token::Number((id - self.numeric_offset()) as u32))
        } else {
            None
        }
    }

    pub fn class(&self, id: TokenId) -> Option<TokenClass> {
        self.decode(id).map(|t| match t {
            Token::Tag(_) => TokenClass::Structural,
            Token::Noun(_) => TokenClass::Noun,
            Token::Number(_) => TokenClass::Numeric,
        })
    }

    pub fn numeric_value(&self, id: TokenId) -> Option<u32> {
        match self.decode(id) {
            Some(Token::Number(v)) => Some(v),
            _ => None,
        }
    }

    pub fn is_tag(&self, id: TokenId, tag: Tag) -> bool {
        self.tags && id == tag.index()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&id| self.decode(id).map_or_else(|| format!("<unk:{id}>"), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

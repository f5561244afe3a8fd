//! Caption vocabulary: a fixed set of function words followed by one token per
//! object class.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Dense object class index, `0..C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

pub const EOS: TokenId = 0;
pub const YES: TokenId = 1;
pub const NO: TokenId = 2;
pub const COMMA: TokenId = 3;
pub const PERIOD: TokenId = 4;
pub const AND: TokenId = 5;
pub const DET: TokenId = 6;
pub const DESCRIBE: TokenId = 7;
pub const THE: TokenId = 8;
pub const IMAGE: TokenId = 9;
pub const IS: TokenId = 10;
pub const THERE: TokenId = 11;
pub const IN: TokenId = 12;
pub const QMARK: TokenId = 13;
pub const MASK_NAME: TokenId = 14;

const FUNCTION_WORDS: [&str; 15] = [
    "<eos>", "yes", "no", ",", ".", "and", "a", "describe", "the", "image", "is", "there", "in",
    "?", "mask",
];

/// First token id used for object classes.
pub const CLASS_OFFSET: TokenId = FUNCTION_WORDS.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    class_count: usize,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(class_names: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for name in class_names {
            let name = name.as_ref();
            if name.is_empty() || name.split_whitespace().count() != 1 {
                return Err(Error::Config(format!("class name {name:?} is not a single token")));
            }
            if index.insert(name.to_string(), tokens.len()).is_some() {
                return Err(Error::Config(format!("class name {name:?} collides with another token")));
            }
            tokens.push(name.to_string());
        }
        Ok(Self { tokens, index, class_count: class_names.len() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_token(&self, class: ClassId) -> TokenId {
        CLASS_OFFSET + class.0
    }

    pub fn token_class(&self, token: TokenId) -> Option<ClassId> {
        (token >= CLASS_OFFSET && token < CLASS_OFFSET + self.class_count)
            .then(|| ClassId(token - CLASS_OFFSET))
    }

    pub fn class_name(&self, class: ClassId) -> &str {
        &self.tokens[self.class_token(class)]
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.index.get(name).and_then(|&t| self.token_class(t))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Whitespace tokenization; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn caption_instruction(&self) -> Vec<TokenId> {
        vec![DESCRIBE, THE, IMAGE]
    }

    /// "in the image is there a <object>"; the object comes last.
    pub fn question(&self, class: ClassId) -> Vec<TokenId> {
        vec![IN, THE, IMAGE, IS, THERE, DET, self.class_token(class)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_tokens_follow_function_words() {
        let v = Vocab::new(&["tv", "remote"]).unwrap();
        assert_eq!(v.len(), CLASS_OFFSET + 2);
        assert_eq!(v.class_token(ClassId(1)), CLASS_OFFSET + 1);
        assert_eq!(v.token_class(CLASS_OFFSET + 1), Some(ClassId(1)));
        assert_eq!(v.token_class(YES), None);
        assert_eq!(v.class_by_name("remote"), Some(ClassId(1)));
        assert_eq!(v.class_by_name("yes"), None);
    }

    #[test]
    fn rejects_duplicate_and_reserved_names() {
        assert!(Vocab::new(&["tv", "tv"]).is_err());
        assert!(Vocab::new(&["yes"]).is_err());
        assert!(Vocab::new(&["two words"]).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::new(&["dog"]).unwrap();
        let q = v.question(ClassId(0));
        assert_eq!(v.decode(&q), "in the image is there a dog");
        assert_eq!(v.encode("in the image is there a dog").unwrap(), q);
        assert!(v.encode("a cat").is_err());
    }
}

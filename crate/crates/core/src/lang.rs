use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language codes the bundled pipeline knows about.
pub const SUPPORTED: [&str; 8] = ["en", "de", "es", "fr", "hi", "tr", "ja", "zh"];

/// An ISO-639-1 language tag.
///
/// Parsing accepts the supported set; anything else must be declared with
/// [`Lang::custom`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lang(String);

impl Lang {
    pub fn parse(code: &str) -> Result<Self> {
        let code = code.trim();
        if SUPPORTED.contains(&code) {
            Ok(Lang(code.to_string()))
        } else {
            Err(Error::UnknownLang(code.to_string()))
        }
    }

    /// Declares a language outside the supported set. The code must be two
    /// or three lowercase ASCII letters.
    pub fn custom(code: &str) -> Result<Self> {
        let ok = (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase());
        if ok {
            Ok(Lang(code.to_string()))
        } else {
            Err(Error::UnknownLang(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Chinese and Japanese: word pairs go through the reading/pinyin
    /// predicates instead of the edit-distance filter.
    pub fn is_cjk(&self) -> bool {
        matches!(self.0.as_str(), "ja" | "zh")
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Lang::parse(s)
    }
}

// Deserialized tags may be custom; validation of the shape still applies.
impl TryFrom<String> for Lang {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Lang::parse(&s).or_else(|_| Lang::custom(&s))
    }
}

impl From<Lang> for String {
    fn from(l: Lang) -> String {
        l.0
    }
}

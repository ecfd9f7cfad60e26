//! Prompt vocabulary and the closed prompt grammar.
//!
//! Every prompt the system accepts is one of four shapes:
//!
//! ```text
//! painting of <content>                 (plain painting)
//! painting of <content> by <artist>     (style concept)
//! cartoon of <content>                  (plain cartoon)
//! cartoon of <content> with <character> (character concept)
//! ```
//!
//! Artists and characters are invented concept names; contents are simple
//! glyph nouns. The `<uncond>` token marks unconditional denoising.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::util::sha256_hex;

/// Token that represents "no conditioning".
pub const UNCOND: &str = "<uncond>";

/// Structural words of the grammar.
pub const STRUCTURE: [&str; 5] = ["painting", "of", "by", "cartoon", "with"];

/// Contents used to build training corpora.
pub const TRAIN_CONTENTS: [&str; 10] = [
    "circle", "square", "triangle", "star", "cross", "ring", "arrow", "diamond", "crescent", "bolt",
];

/// Held-out contents used for evaluation prompts.
pub const EVAL_CONTENTS: [&str; 10] = [
    "hexagon", "spiral", "wave", "ladder", "anchor", "comet", "gate", "fork", "shell", "knot",
];

/// Invented style-concept names (grammar role: artist).
pub const ARTISTS: [&str; 3] = ["umbra", "viridian", "coralline"];

/// Invented character-concept names.
pub const CHARACTERS: [&str; 2] = ["blimp", "quill"];

/// Whether a concept behaves as a global style or an added character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptClass {
    Style,
    Character,
}

/// A concept eligible for plug-in creation/extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    /// Concept token, e.g. "umbra".
    pub id: String,
    pub class: ConceptClass,
}

impl ConceptSpec {
    pub fn style(id: &str) -> Self {
        ConceptSpec { id: id.to_string(), class: ConceptClass::Style }
    }
    pub fn character(id: &str) -> Self {
        ConceptSpec { id: id.to_string(), class: ConceptClass::Character }
    }

    /// Target prompt (concept present) for one content.
    pub fn target_prompt(&self, content: &str) -> String {
        match self.class {
            ConceptClass::Style => format!("painting of {} by {}", content, self.id),
            ConceptClass::Character => format!("cartoon of {} with {}", content, self.id),
        }
    }

    /// Surrounding prompt (same structure, concept absent).
    pub fn surrounding_prompt(&self, content: &str) -> String {
        match self.class {
            ConceptClass::Style => format!("painting of {content}"),
            ConceptClass::Character => format!("cartoon of {content}"),
        }
    }
}

/// The concept roster the default corpora are built from.
pub fn default_concepts() -> Vec<ConceptSpec> {
    let mut v: Vec<ConceptSpec> = ARTISTS.iter().map(|a| ConceptSpec::style(a)).collect();
    v.extend(CHARACTERS.iter().map(|c| ConceptSpec::character(c)));
    v
}

/// Medium of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    Painting,
    Cartoon,
}

/// A prompt decomposed by the grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrompt {
    pub medium: Medium,
    pub content: String,
    /// Present iff the prompt names a concept (artist or character).
    pub concept: Option<String>,
}

impl ParsedPrompt {
    /// Renders back to canonical text (inverse of [`Vocabulary::parse`]).
    pub fn render(&self) -> String {
        match (self.medium, &self.concept) {
            (Medium::Painting, None) => format!("painting of {}", self.content),
            (Medium::Painting, Some(a)) => format!("painting of {} by {}", self.content, a),
            (Medium::Cartoon, None) => format!("cartoon of {}", self.content),
            (Medium::Cartoon, Some(c)) => format!("cartoon of {} with {}", self.content, c),
        }
    }
}

/// A validated, tokenized prompt bound to a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub ids: Vec<usize>,
    pub vocab_hash: String,
}

/// Fixed token inventory. The hash of the ordered token list is stamped
/// into model weights so prompts and models cannot be mixed across
/// incompatible vocabularies.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    hash: String,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The standard vocabulary: structural words, all contents (train and
    /// eval), all concept names, and the `<uncond>` token.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = vec![UNCOND.to_string()];
        tokens.extend(STRUCTURE.iter().map(|s| s.to_string()));
        tokens.extend(TRAIN_CONTENTS.iter().map(|s| s.to_string()));
        tokens.extend(EVAL_CONTENTS.iter().map(|s| s.to_string()));
        tokens.extend(ARTISTS.iter().map(|s| s.to_string()));
        tokens.extend(CHARACTERS.iter().map(|s| s.to_string()));
        let hash = sha256_hex(tokens.join("\n").as_bytes());
        Vocabulary { tokens, hash }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| CoreError::UnknownToken(token.to_string()))
    }

    /// Id of the `<uncond>` token.
    pub fn uncond_id(&self) -> usize {
        0
    }

    /// The unconditional prompt.
    pub fn uncond_prompt(&self) -> Prompt {
        Prompt { text: UNCOND.to_string(), ids: vec![0], vocab_hash: self.hash.clone() }
    }

    /// Parses prompt text against the grammar.
    pub fn parse(&self, text: &str) -> Result<ParsedPrompt> {
        let words: Vec<&str> = text.split_whitespace().collect();
        for w in &words {
            if self.tokens.iter().all(|t| t != w) {
                return Err(CoreError::UnknownToken(w.to_string()));
            }
        }
        let is_content =
            |w: &str| TRAIN_CONTENTS.contains(&w) || EVAL_CONTENTS.contains(&w);
        match words.as_slice() {
            ["painting", "of", content] if is_content(content) => Ok(ParsedPrompt {
                medium: Medium::Painting,
                content: content.to_string(),
                concept: None,
            }),
            ["painting", "of", content, "by", artist]
                if is_content(content) && ARTISTS.contains(artist) =>
            {
                Ok(ParsedPrompt {
                    medium: Medium::Painting,
                    content: content.to_string(),
                    concept: Some(artist.to_string()),
                })
            }
            ["cartoon", "of", content] if is_content(content) => Ok(ParsedPrompt {
                medium: Medium::Cartoon,
                content: content.to_string(),
                concept: None,
            }),
            ["cartoon", "of", content, "with", character]
                if is_content(content) && CHARACTERS.contains(character) =>
            {
                Ok(ParsedPrompt {
                    medium: Medium::Cartoon,
                    content: content.to_string(),
                    concept: Some(character.to_string()),
                })
            }
            _ => Err(CoreError::MalformedPrompt(text.to_string())),
        }
    }

    /// Validates and tokenizes a prompt. `<uncond>` is accepted verbatim;
    /// everything else must satisfy the grammar.
    pub fn encode(&self, text: &str) -> Result<Prompt> {
        if text.trim() == UNCOND {
            return Ok(self.uncond_prompt());
        }
        let parsed = self.parse(text)?;
        let canonical = parsed.render();
        let ids = canonical
            .split_whitespace()
            .map(|w| self.token_id(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prompt { text: canonical, ids, vocab_hash: self.hash.clone() })
    }

    /// Looks up the concept spec for a concept token.
    pub fn concept_spec(&self, concept: &str) -> Result<ConceptSpec> {
        if ARTISTS.contains(&concept) {
            Ok(ConceptSpec::style(concept))
        } else if CHARACTERS.contains(&concept) {
            Ok(ConceptSpec::character(concept))
        } else {
            Err(CoreError::UnknownToken(concept.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_extracts_concept_and_surrounding_structure() {
        let v = Vocabulary::standard();
        let p = v.parse("painting of circle by umbra").unwrap();
        assert_eq!(p.medium, Medium::Painting);
        assert_eq!(p.content, "circle");
        assert_eq!(p.concept.as_deref(), Some("umbra"));

        let s = v.parse("cartoon of star").unwrap();
        assert_eq!(s.medium, Medium::Cartoon);
        assert_eq!(s.concept, None);
    }

    #[test]
    fn parse_rejects_non_grammatical_text() {
        let v = Vocabulary::standard();
        // Unknown word.
        assert!(matches!(
            v.parse("painting of dragon"),
            Err(CoreError::UnknownToken(_))
        ));
        // Known words, wrong shape: artist in character slot.
        assert!(matches!(
            v.parse("cartoon of star with umbra"),
            Err(CoreError::MalformedPrompt(_))
        ));
        // Concept name used as content.
        assert!(matches!(
            v.parse("painting of umbra"),
            Err(CoreError::MalformedPrompt(_))
        ));
        assert!(matches!(v.parse(""), Err(CoreError::MalformedPrompt(_))));
    }

    #[test]
    fn encode_is_stable_and_binds_vocab_hash() {
        let v = Vocabulary::standard();
        let p = v.encode("painting  of   circle by umbra").unwrap();
        assert_eq!(p.text, "painting of circle by umbra");
        assert_eq!(p.ids.len(), 5);
        assert_eq!(p.vocab_hash, v.hash());
        let u = v.encode(UNCOND).unwrap();
        assert_eq!(u.ids, vec![0]);
    }

    #[test]
    fn concept_prompts_follow_class_patterns() {
        let style = ConceptSpec::style("viridian");
        assert_eq!(style.target_prompt("ring"), "painting of ring by viridian");
        assert_eq!(style.surrounding_prompt("ring"), "painting of ring");
        let ch = ConceptSpec::character("quill");
        assert_eq!(ch.target_prompt("ring"), "cartoon of ring with quill");
        assert_eq!(ch.surrounding_prompt("ring"), "cartoon of ring");
    }

    fn arb_parsed() -> impl Strategy<Value = ParsedPrompt> {
        let contents: Vec<&'static str> =
            TRAIN_CONTENTS.iter().chain(EVAL_CONTENTS.iter()).copied().collect();
        let content = proptest::sample::select(contents);
        let artist = proptest::sample::select(ARTISTS.to_vec());
        let character = proptest::sample::select(CHARACTERS.to_vec());
        prop_oneof![
            content.clone().prop_map(|c| ParsedPrompt {
                medium: Medium::Painting,
                content: c.to_string(),
                concept: None
            }),
            (content.clone(), artist).prop_map(|(c, a)| ParsedPrompt {
                medium: Medium::Painting,
                content: c.to_string(),
                concept: Some(a.to_string())
            }),
            content.clone().prop_map(|c| ParsedPrompt {
                medium: Medium::Cartoon,
                content: c.to_string(),
                concept: None
            }),
            (content, character).prop_map(|(c, ch)| ParsedPrompt {
                medium: Medium::Cartoon,
                content: c.to_string(),
                concept: Some(ch.to_string())
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        /// render ∘ parse is the identity on the full grammar.
        #[test]
        fn grammar_roundtrip(p in arb_parsed()) {
            let v = Vocabulary::standard();
            let text = p.render();
            let back = v.parse(&text).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}

//! Rule-based referring-expression parsing: head phrase, spatial relations
//! with anchor phrases, position cues, and size cues.
//!
//! The disambiguation rule between relations and position cues: a direction
//! keyword followed by `of`/`to`/`from` and a noun phrase relates two objects
//! ("left of the man"); otherwise it modifies the head alone ("the left dog").

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven-relation vocabulary used by the guidance stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationType {
    Left,
    Right,
    Top,
    Bottom,
    Within,
    Smaller,
    Bigger,
}

impl std::str::FromStr for RelationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "within" => Ok(Self::Within),
            "smaller" => Ok(Self::Smaller),
            "bigger" => Ok(Self::Bigger),
            other => Err(Error::UnknownRelation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionCue {
    Top,
    Bottom,
    Left,
    Right,
    Middle,
}

impl std::str::FromStr for PositionCue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "middle" => Ok(Self::Middle),
            other => Err(Error::UnknownPositionCue(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCue {
    #[default]
    None,
    Big,
    Small,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub relation: RelationType,
    pub anchor: String,
}

/// Structured decomposition of a referring expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub head_phrase: String,
    pub relations: Vec<RelationEntry>,
    pub position_cues: BTreeSet<PositionCue>,
    pub size_cue: SizeCue,
    pub raw_text: String,
}

#[derive(Debug, Clone)]
struct Token {
    lower: String,
    start: usize,
    end: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            tokens.push(Token {
                lower: text[s..i].to_lowercase(),
                start: s,
                end: i,
            });
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            lower: text[s..].to_lowercase(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

/// Direction adjectives: need `of`/`to`/`from` to become a relation.
fn direction_word(w: &str) -> Option<(RelationType, PositionCue)> {
    match w {
        "left" | "leftmost" => Some((RelationType::Left, PositionCue::Left)),
        "right" | "rightmost" => Some((RelationType::Right, PositionCue::Right)),
        "top" | "upper" => Some((RelationType::Top, PositionCue::Top)),
        "bottom" | "lower" => Some((RelationType::Bottom, PositionCue::Bottom)),
        _ => None,
    }
}

/// Prepositions that take a direct noun-phrase anchor.
fn preposition_relation(w: &str) -> Option<RelationType> {
    match w {
        "above" | "over" => Some(RelationType::Top),
        "below" | "under" | "beneath" | "underneath" => Some(RelationType::Bottom),
        "in" | "inside" | "within" => Some(RelationType::Within),
        _ => None,
    }
}

fn middle_word(w: &str) -> bool {
    matches!(w, "middle" | "center" | "centre")
}

fn size_word(w: &str) -> Option<SizeCue> {
    match w {
        "big" | "large" | "huge" | "bigger" | "larger" => Some(SizeCue::Big),
        "small" | "little" | "tiny" | "smaller" => Some(SizeCue::Small),
        _ => None,
    }
}

fn is_article(w: &str) -> bool {
    matches!(w, "the" | "a" | "an")
}

fn is_connective_prep(w: &str) -> bool {
    matches!(w, "on" | "to" | "at" | "in")
}

/// Phrase from token i to token j (inclusive), as it appears in the source.
fn phrase(text: &str, tokens: &[Token], i: usize, j: usize) -> String {
    text[tokens[i].start..tokens[j].end].to_string()
}

/// Where an anchor noun phrase ends: before `and`, before the next relation
/// construction, or at the end of the text.
fn anchor_end(tokens: &[Token], from: usize) -> usize {
    let mut j = from;
    while j < tokens.len() {
        let w = tokens[j].lower.as_str();
        if w == "and" {
            break;
        }
        if direction_word(w).is_some() && j + 1 < tokens.len() {
            let mut next = j + 1;
            if next < tokens.len() && matches!(tokens[next].lower.as_str(), "side" | "hand") {
                next += 1;
            }
            if next < tokens.len() && matches!(tokens[next].lower.as_str(), "of" | "to" | "from") {
                break;
            }
        }
        if preposition_relation(w).is_some() && j > from && j + 1 < tokens.len() {
            break;
        }
        if matches!(w, "smaller" | "bigger" | "larger")
            && j + 1 < tokens.len()
            && tokens[j + 1].lower == "than"
        {
            break;
        }
        j += 1;
    }
    j
}

/// Deterministic, total parse of a non-empty referring expression.
pub fn parse_expression(text: &str) -> Result<ParsedExpression> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }

    let mut relations = Vec::new();
    let mut position_cues = BTreeSet::new();
    let mut size_cue = SizeCue::None;
    // start of the earliest trailing construction; the head ends there
    let mut head_cut: Option<usize> = None;

    let mark_construction = |cut: &mut Option<usize>, tokens: &[Token], kw_idx: usize| {
        // extend the cut backwards over `the`/`a`/`an` and a preposition
        let mut s = kw_idx;
        if s > 0 && is_article(&tokens[s - 1].lower) {
            s -= 1;
        }
        if s > 0 && is_connective_prep(&tokens[s - 1].lower) {
            s -= 1;
        }
        *cut = Some(cut.map_or(s, |c: usize| c.min(s)));
    };

    let mut i = 0;
    while i < tokens.len() {
        let w = tokens[i].lower.as_str();

        // direction adjective: relation when followed by of/to/from, else cue
        if let Some((rel, cue)) = direction_word(w) {
            let mut conn = i + 1;
            if conn < tokens.len() && matches!(tokens[conn].lower.as_str(), "side" | "hand") {
                conn += 1;
            }
            if conn < tokens.len()
                && matches!(tokens[conn].lower.as_str(), "of" | "to" | "from")
                && conn + 1 < tokens.len()
            {
                let a_start = conn + 1;
                let a_end = anchor_end(&tokens, a_start);
                if a_end > a_start {
                    relations.push(RelationEntry {
                        relation: rel,
                        anchor: phrase(text, &tokens, a_start, a_end - 1),
                    });
                    mark_construction(&mut head_cut, &tokens, i);
                    i = a_end;
                    continue;
                }
            }
            position_cues.insert(cue);
            // trailing "on the left" style constructions are cut from the
            // head; attributive uses ("the left dog") stay in it
            let preceded_by_prep = i >= 2
                && is_article(&tokens[i - 1].lower)
                && is_connective_prep(&tokens[i - 2].lower)
                || (i >= 1 && is_connective_prep(&tokens[i - 1].lower));
            if preceded_by_prep {
                mark_construction(&mut head_cut, &tokens, i);
            }
            i += 1;
            continue;
        }

        // "middle"/"center": position cue only, never a relation
        if middle_word(w) {
            position_cues.insert(PositionCue::Middle);
            let preceded_by_prep = i >= 2
                && is_article(&tokens[i - 1].lower)
                && is_connective_prep(&tokens[i - 2].lower)
                || (i >= 1 && is_connective_prep(&tokens[i - 1].lower));
            if preceded_by_prep {
                mark_construction(&mut head_cut, &tokens, i);
            }
            // swallow an "of the image"-style tail
            if i + 2 < tokens.len() && tokens[i + 1].lower == "of" {
                i = anchor_end(&tokens, i + 2);
                continue;
            }
            i += 1;
            continue;
        }

        // comparative with an anchor: "smaller than the box"
        if matches!(w, "smaller" | "bigger" | "larger")
            && i + 2 < tokens.len()
            && tokens[i + 1].lower == "than"
        {
            let rel = if w == "smaller" {
                RelationType::Smaller
            } else {
                RelationType::Bigger
            };
            let a_start = i + 2;
            let a_end = anchor_end(&tokens, a_start);
            relations.push(RelationEntry {
                relation: rel,
                anchor: phrase(text, &tokens, a_start, a_end - 1),
            });
            mark_construction(&mut head_cut, &tokens, i);
            i = a_end;
            continue;
        }

        // size cue (first occurrence wins)
        if let Some(cue) = size_word(w) {
            if size_cue == SizeCue::None {
                size_cue = cue;
            }
            i += 1;
            continue;
        }

        // preposition with a direct anchor: "above the man", "inside the bowl"
        if let Some(rel) = preposition_relation(w) {
            if i + 1 < tokens.len() {
                let a_start = i + 1;
                // "in the middle", "in the center": position construction
                let mut peek = a_start;
                if peek < tokens.len() && is_article(&tokens[peek].lower) {
                    peek += 1;
                }
                if peek < tokens.len()
                    && (middle_word(&tokens[peek].lower)
                        || direction_word(&tokens[peek].lower).is_some())
                {
                    // re-scan from the position word itself
                    mark_construction(&mut head_cut, &tokens, i);
                    i = peek;
                    continue;
                }
                if i > 0 {
                    let a_end = anchor_end(&tokens, a_start);
                    relations.push(RelationEntry {
                        relation: rel,
                        anchor: phrase(text, &tokens, a_start, a_end - 1),
                    });
                    mark_construction(&mut head_cut, &tokens, i);
                    i = a_end;
                    continue;
                }
            }
        }

        i += 1;
    }

    // head phrase: everything before the first trailing construction
    let head_phrase = match head_cut {
        Some(cut) if cut > 0 => phrase(text, &tokens, 0, cut - 1).trim().to_string(),
        _ => text.trim().to_string(),
    };
    let head_phrase = if head_phrase.is_empty() {
        text.trim().to_string()
    } else {
        head_phrase
    };

    Ok(ParsedExpression {
        head_phrase,
        relations,
        position_cues,
        size_cue,
        raw_text: text.to_string(),
    })
}

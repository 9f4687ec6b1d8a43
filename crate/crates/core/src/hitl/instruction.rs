//! Slot grammar for planning instructions:
//! `<attribute phrase> <level word> [and <attribute phrase> <level word>]...`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::spatial::{Attribute, Instruction};

pub const LEVEL_WORDS: [&str; 5] = ["very low", "low", "medium", "high", "very high"];

const PHRASES: [(&str, Attribute); 4] = [
    ("green rate", Attribute::GreenRate),
    ("green spaces", Attribute::GreenRate),
    ("commercial density", Attribute::CommercialDensity),
    ("residential density", Attribute::ResidentialDensity),
];

fn canonical_phrase(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::GreenRate => "green rate",
        Attribute::CommercialDensity => "commercial density",
        Attribute::ResidentialDensity => "residential density",
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Closest attribute phrases to the start of `clause`, best first.
fn suggestions(clause: &str) -> Vec<String> {
    let head: String = clause.split(' ').take(2).collect::<Vec<_>>().join(" ");
    let mut scored: Vec<(usize, &str)> = PHRASES.iter().map(|(p, _)| (strsim::levenshtein(&head, p), *p)).collect();
    scored.sort();
    scored.into_iter().map(|(_, p)| format!("{p} <{}>", LEVEL_WORDS.join("|"))).collect()
}

fn level_suggestions(phrase: &str, rest: &str) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = LEVEL_WORDS.iter().map(|w| (strsim::levenshtein(rest, w), *w)).collect();
    scored.sort();
    scored.into_iter().map(|(_, w)| format!("{phrase} {w}")).collect()
}

fn parse_clause(clause: &str, original: &str) -> Result<(Attribute, usize)> {
    let unparsable = |suggestions| Error::UnparsableInstruction { text: original.to_string(), suggestions };
    let (phrase, attribute) = PHRASES
        .iter()
        .find(|(p, _)| clause.starts_with(p) && clause[p.len()..].starts_with(' '))
        .ok_or_else(|| unparsable(suggestions(clause)))?;
    let rest = clause[phrase.len()..].trim();
    let level = LEVEL_WORDS.iter().position(|w| *w == rest).ok_or_else(|| unparsable(level_suggestions(phrase, rest)))?;
    Ok((*attribute, level))
}

/// Parses an instruction over the five level words; later clauses override
/// earlier ones for the same attribute.
pub fn parse_instruction(text: &str) -> Result<Instruction> {
    let normalized = normalize(text);
    if normalized.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut slots = BTreeMap::new();
    for clause in normalized.split(" and ") {
        let (attribute, level) = parse_clause(clause.trim(), text)?;
        slots.insert(attribute, level);
    }
    Instruction::new(slots, LEVEL_WORDS.len())
}

/// Canonical text for an instruction over the five level words.
pub fn render_instruction(instruction: &Instruction) -> Result<String> {
    if instruction.levels != LEVEL_WORDS.len() {
        return Err(Error::InvalidArgument(format!("the grammar has {} levels, not {}", LEVEL_WORDS.len(), instruction.levels)));
    }
    Ok(instruction
        .slots
        .iter()
        .map(|(&a, &l)| format!("{} {}", canonical_phrase(a), LEVEL_WORDS[l]))
        .collect::<Vec<_>>()
        .join(" and "))
}

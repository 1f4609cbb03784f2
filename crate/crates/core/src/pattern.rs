//! Glob-style name patterns for tensor eligibility filters.
//!
//! Supports `*` (any substring), `?` (any single character) and `[...]`
//! character sets with `!` negation. Tensor names are flat identifiers,
//! so `*` matches across `.` separators.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Literal(char),
    AnyChar,
    AnyRun,
    Set { negated: bool, chars: Vec<char> },
}

/// A compiled glob pattern.
#[derive(Debug, Clone)]
pub struct Pattern {
    source: String,
    tokens: Vec<Token>,
}

impl Pattern {
    pub fn compile(source: &str) -> Result<Pattern> {
        let mut tokens = Vec::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '*' => {
                    // Collapse runs of consecutive stars.
                    if tokens.last() != Some(&Token::AnyRun) {
                        tokens.push(Token::AnyRun);
                    }
                }
                '?' => tokens.push(Token::AnyChar),
                '[' => {
                    let negated = chars.peek() == Some(&'!');
                    if negated {
                        chars.next();
                    }
                    let mut set = Vec::new();
                    let mut closed = false;
                    for c in chars.by_ref() {
                        if c == ']' && !set.is_empty() {
                            closed = true;
                            break;
                        }
                        set.push(c);
                    }
                    if !closed {
                        return Err(Error::MalformedPattern {
                            pattern: source.to_string(),
                            reason: "unclosed character set".to_string(),
                        });
                    }
                    tokens.push(Token::Set {
                        negated,
                        chars: set,
                    });
                }
                other => tokens.push(Token::Literal(other)),
            }
        }
        Ok(Pattern {
            source: source.to_string(),
            tokens,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, name: &str) -> bool {
        let chars: Vec<char> = name.chars().collect();
        matches_at(&self.tokens, &chars)
    }
}

fn matches_at(tokens: &[Token], chars: &[char]) -> bool {
    match tokens.first() {
        None => chars.is_empty(),
        Some(Token::AnyRun) => (0..=chars.len()).any(|skip| matches_at(&tokens[1..], &chars[skip..])),
        Some(token) => match chars.first() {
            None => false,
            Some(&c) => {
                let hit = match token {
                    Token::Literal(l) => *l == c,
                    Token::AnyChar => true,
                    Token::Set { negated, chars: set } => set.contains(&c) != *negated,
                    Token::AnyRun => unreachable!(),
                };
                hit && matches_at(&tokens[1..], &chars[1..])
            }
        },
    }
}

/// Include/exclude filter over tensor names. An empty include list
/// matches everything.
#[derive(Debug, Clone, Default)]
pub struct PatternFilter {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl PatternFilter {
    pub fn new(include: &[String], exclude: &[String]) -> Result<PatternFilter> {
        Ok(PatternFilter {
            include: include
                .iter()
                .map(|p| Pattern::compile(p))
                .collect::<Result<_>>()?,
            exclude: exclude
                .iter()
                .map(|p| Pattern::compile(p))
                .collect::<Result<_>>()?,
        })
    }

    /// Filter that admits every name.
    pub fn all() -> PatternFilter {
        PatternFilter::default()
    }

    pub fn matches(&self, name: &str) -> bool {
        let included =
            self.include.is_empty() || self.include.iter().any(|p| p.matches(name));
        included && !self.exclude.iter().any(|p| p.matches(name))
    }
}

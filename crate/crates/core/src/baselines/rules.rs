use std::fmt;

use thiserror::Error;

use crate::corpus::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    Replace { pattern: Vec<String>, replacement: Vec<String> },
    Delete { pattern: Vec<String> },
}

impl Rule {
    pub fn pattern(&self) -> &[String] {
        match self {
            Rule::Replace { pattern, .. } | Rule::Delete { pattern } => pattern,
        }
    }

    fn output(&self) -> &[String] {
        match self {
            Rule::Replace { replacement, .. } => replacement,
            Rule::Delete { .. } => &[],
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Replace { pattern, replacement } => write!(f, "REPLACE {} -> {}", pattern.join(" "), replacement.join(" ")),
            Rule::Delete { pattern } => write!(f, "DELETE {}", pattern.join(" ")),
        }
    }
}

/// Ordered token rewrite rules. Patterns and replacements are stored tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub case_insensitive: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self { rules: Vec::new(), case_insensitive: true }
    }
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules, ..Self::default() }
    }

    /// Parses `REPLACE <pattern> -> <replacement>` and `DELETE <pattern>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| RuleError::Parse { line: i + 1, reason: reason.to_string() };
            let (verb, rest) = line.split_once(char::is_whitespace).ok_or_else(|| err("missing pattern"))?;
            let rule = match verb.to_ascii_uppercase().as_str() {
                "REPLACE" => {
                    let (p, r) = rest.split_once("->").ok_or_else(|| err("REPLACE needs `->`"))?;
                    let replacement = tokenize(r);
                    if replacement.is_empty() {
                        return Err(err("empty replacement; use DELETE"));
                    }
                    Rule::Replace { pattern: tokenize(p), replacement }
                }
                "DELETE" => Rule::Delete { pattern: tokenize(rest) },
                other => return Err(err(&format!("unknown verb {other:?}"))),
            };
            if rule.pattern().is_empty() {
                return Err(err("empty pattern"));
            }
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    /// Built-in rule files: `gender`, `nationality` or `genre`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "gender" => include_str!("../../rules/gender.rules"),
            "nationality" => include_str!("../../rules/nationality.rules"),
            "genre" => include_str!("../../rules/genre.rules"),
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in rules parse"))
    }

    fn matches(&self, tokens: &[String], at: usize, pattern: &[String]) -> bool {
        let window = match tokens.get(at..at + pattern.len()) {
            Some(w) => w,
            None => return false,
        };
        window.iter().zip(pattern).all(|(a, b)| if self.case_insensitive { a.to_lowercase() == b.to_lowercase() } else { a == b })
    }

    /// Single left-to-right pass. At each position the longest matching pattern wins, earlier rules
    /// break ties, and the output of a rule is never matched again.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            let best = self
                .rules
                .iter()
                .filter(|r| self.matches(tokens, i, r.pattern()))
                .fold(None::<&Rule>, |best, r| match best {
                    Some(b) if b.pattern().len() >= r.pattern().len() => Some(b),
                    _ => Some(r),
                });
            match best {
                Some(rule) => {
                    out.extend(rule.output().iter().cloned());
                    i += rule.pattern().len();
                }
                None => {
                    out.push(tokens[i].clone());
                    i += 1;
                }
            }
        }
        out
    }
}

/// Rewrites one tokenized sentence.
pub fn rule_rewrite(rules: &RuleSet, sentence: &[String]) -> Vec<String> {
    rules.apply(sentence)
}

/// Lowercases and splits on whitespace; every non-alphanumeric character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' && !word.is_empty() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Inverse of [`tokenize`] up to normalisation: tokens joined by single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

pub fn is_terminal(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Splits a token stream after each terminal punctuation token.
pub fn split_sentences(tokens: Vec<String>) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        let end = is_terminal(&t);
        cur.push(t);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn punctuation_is_kept() {
        assert_eq!(tokenize("Mr. Smith, PhD!"), ["mr", ".", "smith", ",", "phd", "!"]);
        assert_eq!(tokenize("first-year  student"), ["first", "-", "year", "student"]);
    }

    #[test]
    fn sentences_split_on_terminals() {
        let s = split_sentences(tokenize("A b. C d! e"));
        assert_eq!(s, vec![vec!["a", "b", "."], vec!["c", "d", "!"], vec!["e"]]);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_is_stable(text in "[a-zA-Z .,!?-]{0,40}") {
            let toks = tokenize(&text);
            let norm = detokenize(&toks);
            prop_assert_eq!(tokenize(&norm), toks);
        }
    }
}

/// Lowercase and split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(tokenize("What is 2+2?"), ["what", "is", "2", "2"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn folds_case() {
        assert_eq!(tokenize("Hello HELLO hello"), ["hello", "hello", "hello"]);
    }

    #[test]
    fn unicode_letters_are_kept() {
        assert_eq!(tokenize("Größe—naïve café"), ["größe", "naïve", "café"]);
    }
}

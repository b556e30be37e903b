pub const PLACEHOLDER: &str = "{query}";

/// A template must contain the placeholder exactly once.
pub fn validate_template(template: &str) -> Result<(), String> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        0 => Err(format!(
            "template {template:?} has no {PLACEHOLDER} placeholder"
        )),
        n => Err(format!(
            "template {template:?} has {n} {PLACEHOLDER} placeholders"
        )),
    }
}

/// Substitute the query verbatim.
pub fn render_prompt(template: &str, query: &str) -> Result<String, String> {
    validate_template(template)?;
    Ok(template.replacen(PLACEHOLDER, query, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_the_placeholder() {
        assert_eq!(render_prompt("Q: {query}\nA:", "hi").unwrap(), "Q: hi\nA:");
        assert_eq!(render_prompt("{query}", "as is {x}").unwrap(), "as is {x}");
    }

    #[test]
    fn query_text_containing_the_placeholder_is_not_expanded() {
        assert_eq!(render_prompt("<{query}>", "{query}").unwrap(), "<{query}>");
    }

    #[test]
    fn placeholder_count_must_be_one() {
        assert!(render_prompt("no slot", "x").is_err());
        assert!(validate_template("{query} {query}")
            .unwrap_err()
            .contains("2"));
    }
}

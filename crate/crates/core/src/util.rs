//! Small shared text helpers.

/// Content of the last `boxed{...}` (or `\boxed{...}`) span in `text`,
/// whitespace-trimmed. `None` when no span is present.
pub fn last_boxed_span(text: &str) -> Option<String> {
    let mut result = None;
    let mut rest = text;
    while let Some(pos) = rest.find("boxed{") {
        let after = &rest[pos + "boxed{".len()..];
        if let Some(end) = after.find('}') {
            result = Some(after[..end].trim().to_string());
            rest = &after[end + 1..];
        } else {
            break;
        }
    }
    result
}

/// Fill `{slot}` placeholders in a template. Unknown placeholders are left
/// untouched so template errors surface in the rendered prompt.
pub fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_boxed_takes_final_span() {
        assert_eq!(last_boxed_span("boxed{1} then boxed{2}"), Some("2".into()));
        assert_eq!(last_boxed_span(r"the answer is \boxed{42 km}"), Some("42 km".into()));
        assert_eq!(last_boxed_span("no span"), None);
        assert_eq!(last_boxed_span("boxed{unclosed"), None);
    }

    #[test]
    fn fill_replaces_slots() {
        assert_eq!(
            fill_template("q={question} gt={ground truth}", &[("question", "Q"), ("ground truth", "G")]),
            "q=Q gt=G"
        );
    }
}

use std::collections::BTreeMap;

use super::PromptError;

/// Text with `<<NAME>>` placeholders, each required placeholder occurring exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
    placeholders: Vec<&'static str>,
}

/// Byte ranges of every `<<NAME>>` marker (NAME = uppercase letters, digits, underscores).
fn markers(text: &str) -> Vec<(usize, usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'<' && bytes[i + 1] == b'<' {
            let start = i;
            let mut j = i + 2;
            while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start + 2 && j + 1 < bytes.len() + 1 && bytes.get(j) == Some(&b'>') && bytes.get(j + 1) == Some(&b'>') {
                out.push((start, j + 2, &text[start + 2..j]));
                i = j + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl Template {
    pub fn new(text: impl Into<String>, required: &[&'static str]) -> Result<Self, PromptError> {
        let text = text.into();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, _, name) in markers(&text) {
            *counts.entry(name).or_default() += 1;
        }
        for name in required {
            match counts.get(name).copied().unwrap_or(0) {
                1 => {}
                0 => return Err(PromptError::TemplateInvalid(format!("missing placeholder <<{name}>>"))),
                n => return Err(PromptError::TemplateInvalid(format!("placeholder <<{name}>> occurs {n} times"))),
            }
        }
        if let Some(extra) = counts.keys().find(|k| !required.contains(k)) {
            return Err(PromptError::TemplateInvalid(format!("unknown placeholder <<{extra}>>")));
        }
        Ok(Self {
            text,
            placeholders: required.to_vec(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitutes every placeholder in a single pass; substituted values are
    /// never scanned again, so user text that happens to contain `<<X>>` is left alone.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut last = 0;
        for (start, end, name) in markers(&self.text) {
            out.push_str(&self.text[last..start]);
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| panic!("no value supplied for placeholder <<{name}>>"));
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.text[last..]);
        out
    }

    pub fn placeholders(&self) -> &[&'static str] {
        &self.placeholders
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_markers() {
        let m = markers("a <<TASK>> b <<x>> <<HEADER>><<CODE_2>> << >>");
        let names: Vec<_> = m.iter().map(|(_, _, n)| *n).collect();
        assert_eq!(names, ["TASK", "HEADER", "CODE_2"]);
    }

    #[test]
    fn rejects_missing_duplicate_and_unknown() {
        assert!(Template::new("<<TASK>>", &["TASK", "CODE"]).is_err());
        assert!(Template::new("<<TASK>> <<TASK>>", &["TASK"]).is_err());
        assert!(Template::new("<<TASK>> <<OTHER>>", &["TASK"]).is_err());
        assert!(Template::new("<<TASK>>", &["TASK"]).is_ok());
    }

    #[test]
    fn render_is_single_pass() {
        let t = Template::new("[<<A>>|<<B>>]", &["A", "B"]).unwrap();
        assert_eq!(t.render(&[("A", "<<B>>"), ("B", "x")]), "[<<B>>|x]");
    }
}

//! Minimal lexical scanning of Python-like text: string literals and bracket
//! nesting. Enough to split argument lists and find headers, nothing more.

/// Calls `f(byte_index, char, depth)` for every character outside string
/// literals, where `depth` is the bracket nesting before the character.
/// Returns `None` if a string is unterminated or brackets do not balance.
pub(crate) fn walk(s: &str, mut f: impl FnMut(usize, char, usize) -> bool) -> Option<()> {
    let mut depth: usize = 0;
    let mut chars = s.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '\'' | '"' => {
                let triple = s[i..].starts_with(&format!("{c}{c}{c}"));
                let close: String = if triple { [c; 3].iter().collect() } else { c.to_string() };
                if triple {
                    chars.next();
                    chars.next();
                }
                let mut closed = false;
                while let Some((j, d)) = chars.next() {
                    if d == '\\' {
                        chars.next();
                        continue;
                    }
                    if !triple && d == '\n' {
                        return None;
                    }
                    if s[j..].starts_with(&close) {
                        for _ in 1..close.len() {
                            chars.next();
                        }
                        closed = true;
                        break;
                    }
                }
                if !closed {
                    return None;
                }
            }
            '(' | '[' | '{' => {
                if !f(i, c, depth) {
                    return Some(());
                }
                depth += 1;
            }
            ')' | ']' | '}' => {
                depth = depth.checked_sub(1)?;
                if !f(i, c, depth) {
                    return Some(());
                }
            }
            _ => {
                if !f(i, c, depth) {
                    return Some(());
                }
            }
        }
    }
    (depth == 0).then_some(())
}

pub(crate) fn balanced(s: &str) -> bool {
    walk(s, |_, _, _| true).is_some()
}

/// Index of the bracket closing the one at `open` (which must be `(`, `[` or `{`).
pub(crate) fn matching_close(s: &str, open: usize) -> Option<usize> {
    let mut found = None;
    let _ = walk(&s[open..], |i, c, depth| {
        if depth == 0 && matches!(c, ')' | ']' | '}') {
            found = Some(open + i);
            return false;
        }
        true
    });
    found
}

/// Splits on `sep` at bracket depth zero. `None` if the text is unbalanced.
pub(crate) fn split_top_level(s: &str, sep: char) -> Option<Vec<&str>> {
    let mut parts = Vec::new();
    let mut last = 0;
    walk(s, |i, c, depth| {
        if c == sep && depth == 0 {
            parts.push(&s[last..i]);
            last = i + c.len_utf8();
        }
        true
    })?;
    parts.push(&s[last..]);
    Some(parts)
}

/// Removes whitespace outside string literals, for duplicate detection.
pub(crate) fn squash_whitespace(s: &str) -> String {
    let mut keep = vec![true; s.len()];
    let ok = walk(s, |i, c, _| {
        if c.is_whitespace() {
            keep[i] = false;
        }
        true
    });
    if ok.is_none() {
        return s.split_whitespace().collect();
    }
    s.char_indices().filter(|(i, _)| keep[*i]).map(|(_, c)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_respects_strings_and_brackets() {
        let parts = split_top_level("1, 'a,b', [2, 3], f(4, 5)", ',').unwrap();
        assert_eq!(parts, ["1", " 'a,b'", " [2, 3]", " f(4, 5)"]);
        assert!(split_top_level("(1, 2", ',').is_none());
        assert!(split_top_level("'abc", ',').is_none());
    }

    #[test]
    fn matching_close_skips_nested_and_quoted() {
        let s = "x = [(1, ']'), [2]] tail";
        let open = s.find('[').unwrap();
        assert_eq!(matching_close(s, open), Some(s.find(" tail").unwrap() - 1));
        assert_eq!(matching_close("[1, 2", 0), None);
    }

    #[test]
    fn squash_keeps_string_contents() {
        assert_eq!(squash_whitespace("( 1 ,  'a b' )"), "(1,'a b')");
    }

    #[test]
    fn triple_quotes_and_escapes() {
        assert!(balanced("'''a ' b''' + \"c\\\"d\""));
        assert!(!balanced("'''abc"));
    }
}

//! Backslash escaping shared by every tab-separated format in the crate.

/// Escapes `\`, tab, newline and carriage return so a field never breaks a
/// TSV row.
pub fn escape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape`]. Returns `None` on a dangling or unknown escape.
pub fn unescape(field: &str) -> Option<String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

/// Splits an escaped row into unescaped fields.
pub fn split_row(line: &str) -> Option<Vec<String>> {
    line.split('\t').map(unescape).collect()
}

pub fn join_row<S: AsRef<str>>(fields: &[S]) -> String {
    fields
        .iter()
        .map(|f| escape(f.as_ref()))
        .collect::<Vec<_>>()
        .join("\t")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_escapes() {
        assert_eq!(unescape("a\\"), None);
        assert_eq!(unescape("a\\x"), None);
        assert_eq!(unescape("a\\tb").as_deref(), Some("a\tb"));
    }

    proptest! {
        #[test]
        fn row_round_trip(fields in proptest::collection::vec(".*", 1..5)) {
            let row = join_row(&fields);
            prop_assert!(!row.contains('\n'));
            prop_assert_eq!(split_row(&row).unwrap(), fields);
        }
    }
}

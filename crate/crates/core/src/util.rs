use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives a child seed from a parent seed and a path of labels. Stable across
/// platforms and releases, so per-task randomness does not depend on the order
/// in which tasks are scheduled.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// Lowercase ASCII slug: runs of non-alphanumerics collapse to a single `-`.
pub fn slugify(text: &str) -> String {
    let mut slug = String::with_capacity(text.len());
    let mut pending_dash = false;
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_dash && !slug.is_empty() {
                slug.push('-');
            }
            pending_dash = false;
            slug.push(ch.to_ascii_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if slug.is_empty() {
        slug.push_str("task");
    }
    slug.truncate(64);
    while slug.ends_with('-') {
        slug.pop();
    }
    slug
}

/// Renders a list of strings the way Python's `repr(list)` does.
pub fn py_list_repr<S: AsRef<str>>(items: &[S]) -> String {
    let inner: Vec<String> = items.iter().map(|s| py_str_repr(s.as_ref())).collect();
    format!("[{}]", inner.join(", "))
}

fn py_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn py_repr_matches_python() {
        assert_eq!(py_list_repr::<&str>(&[]), "[]");
        assert_eq!(py_list_repr(&["a", "b"]), "['a', 'b']");
        assert_eq!(py_list_repr(&["it's"]), "[\"it's\"]");
        assert_eq!(py_list_repr(&["a'b\"c"]), "['a\\'b\"c']");
    }

    #[test]
    fn slugs() {
        assert_eq!(slugify("Corrupt ELF headers!"), "corrupt-elf-headers");
        assert_eq!(slugify("  --  "), "task");
        assert_eq!(slugify("Locale/Numeric_Tamper"), "locale-numeric-tamper");
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_eq!(derive_seed(7, &["a", "1"]), derive_seed(7, &["a", "1"]));
        assert_ne!(derive_seed(7, &["a", "1"]), derive_seed(7, &["a1"]));
        assert_ne!(derive_seed(7, &["a"]), derive_seed(8, &["a"]));
    }
}

//! Logical-line handling for container build files.
//!
//! A logical line is one directive. Directives continued with a trailing
//! backslash keep their physical lines joined by `\n`, so emitting a logical
//! line verbatim reproduces the original multi-line formatting.

/// Result of ingesting an agent-written build file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IngestedDockerfile {
    pub lines: Vec<String>,
    /// Directives dropped at ingest (`FROM` lines: the base is fixed by the gold image).
    pub dropped: Vec<String>,
}

fn is_continued(physical: &str) -> bool {
    physical.trim_end().ends_with('\\')
}

fn is_skippable(physical: &str) -> bool {
    let t = physical.trim();
    t.is_empty() || t.starts_with('#')
}

/// Splits build-file text into logical lines. Comment and blank lines are
/// dropped, including inside continuations. A dangling continuation at end of
/// input loses its trailing backslash.
pub fn logical_lines(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for raw in text.split('\n') {
        let physical = raw.strip_suffix('\r').unwrap_or(raw);
        if is_skippable(physical) {
            continue;
        }
        current.push(physical);
        if !is_continued(physical) {
            out.push(current.join("\n"));
            current.clear();
        }
    }
    if !current.is_empty() {
        let last = current.pop().unwrap_or_default();
        let trimmed = last.trim_end();
        let stripped = trimmed[..trimmed.len() - 1].trim_end();
        if !stripped.trim().is_empty() {
            current.push(stripped);
        }
        if !current.is_empty() {
            out.push(current.join("\n"));
        }
    }
    out
}

/// The instruction keyword of a logical line, uppercased.
pub fn instruction(line: &str) -> String {
    line.split_whitespace().next().unwrap_or_default().to_ascii_uppercase()
}

/// Ingests text an agent wrote as its summary of performed operations.
pub fn ingest(text: &str) -> IngestedDockerfile {
    let mut result = IngestedDockerfile::default();
    for line in logical_lines(text) {
        if instruction(&line) == "FROM" {
            result.dropped.push(line);
        } else {
            result.lines.push(line);
        }
    }
    result
}

/// Checks the logical-line shape invariant; returns a reason on violation.
pub fn check_logical_line(line: &str) -> Result<(), String> {
    if line.trim().is_empty() {
        return Err("empty directive".into());
    }
    let physical: Vec<&str> = line.split('\n').collect();
    let last = physical.len() - 1;
    for (i, p) in physical.iter().enumerate() {
        if p.contains('\r') {
            return Err("carriage return in directive".into());
        }
        if is_skippable(p) {
            return Err(format!("blank or comment physical line in directive: {line:?}"));
        }
        if i < last && !is_continued(p) {
            return Err(format!("embedded newline without continuation: {line:?}"));
        }
        if i == last && is_continued(p) {
            return Err(format!("dangling continuation: {line:?}"));
        }
    }
    if instruction(line) == "FROM" {
        return Err("FROM directives are not allowed in a delta".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_continuations_into_one_logical_line() {
        let text =
            "RUN mkdir -p /tmp/corrupted\nRUN dd if=/dev/zero of=/tmp/x \\\n       bs=1 count=24 seek=8 conv=notrunc\n";
        let lines = logical_lines(text);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "RUN dd if=/dev/zero of=/tmp/x \\\n       bs=1 count=24 seek=8 conv=notrunc");
        assert!(check_logical_line(&lines[1]).is_ok());
    }

    #[test]
    fn drops_comments_blanks_and_from() {
        let text = "FROM task-pandas:latest  # gold\n\n# Corrupt\nRUN a \\\n  # inner comment\n  b\n\nRUN c\n";
        let ingested = ingest(text);
        assert_eq!(ingested.lines, vec!["RUN a \\\n  b".to_string(), "RUN c".to_string()]);
        assert_eq!(ingested.dropped.len(), 1);
    }

    #[test]
    fn dangling_backslash_is_trimmed() {
        assert_eq!(logical_lines("RUN a \\"), vec!["RUN a".to_string()]);
        assert!(logical_lines("\\").is_empty());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(check_logical_line("   ").is_err());
        assert!(check_logical_line("RUN a\nRUN b").is_err());
        assert!(check_logical_line("RUN a \\").is_err());
        assert!(check_logical_line("FROM x").is_err());
        assert!(check_logical_line("RUN a \\\n\n b").is_err());
    }
}

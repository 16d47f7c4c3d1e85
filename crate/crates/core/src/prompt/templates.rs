//! Embedded prompt and instruction templates plus the placeholder filler.

pub const DEGRADATION_PROMPT_INITIAL: &str = include_str!("../../templates/degradation_prompt_initial.txt");
pub const DEGRADATION_PROMPT_REFINE: &str = include_str!("../../templates/degradation_prompt_refine.txt");
pub const DEGRADATION_INSTRUCTION: &str = include_str!("../../templates/degradation_instruction.yaml");
pub const REPAIR_PROMPT_STRONG: &str = include_str!("../../templates/repair_prompt_strong.txt");
pub const REPAIR_PROMPT_WEAK: &str = include_str!("../../templates/repair_prompt_weak.txt");
pub const REPAIR_PROMPT_BALANCED: &str = include_str!("../../templates/repair_prompt_balanced.txt");
pub const REPAIR_INSTRUCTION: &str = include_str!("../../templates/repair_instruction.yaml");

pub const P_CANDIDATES: &str = "{candidate_uts_list}";
pub const P_DIRECTIONS: &str = "{directions}";
pub const P_MORE_EXAMPLES: &str = "{more examples}";
pub const P_PREVIOUS_TITLES: &str = "{os.listdir(dataset_path)}";
pub const P_TARGET_UTS: &str = "{extract_result['selected_uts']}";
pub const P_DRAFT: &str = "{extract_result}";
pub const P_DEGRADATION_ISSUE: &str = "{degradaton_issue}";
pub const P_UTS: &str = "{UTs}";
pub const P_TASK_DESCRIPTION: &str = "{data[\"task_description\"]}";
pub const P_SYMPTOMS: &str = "{symptoms_UTs}";
pub const P_PROBLEM_STATEMENT: &str = "{problem_statement}";

/// Every embedded template with the file name `dump-templates` writes it under.
pub const ALL: &[(&str, &str)] = &[
    ("degradation_prompt_initial.txt", DEGRADATION_PROMPT_INITIAL),
    ("degradation_prompt_refine.txt", DEGRADATION_PROMPT_REFINE),
    ("degradation_instruction.yaml", DEGRADATION_INSTRUCTION),
    ("repair_prompt_strong.txt", REPAIR_PROMPT_STRONG),
    ("repair_prompt_weak.txt", REPAIR_PROMPT_WEAK),
    ("repair_prompt_balanced.txt", REPAIR_PROMPT_BALANCED),
    ("repair_instruction.yaml", REPAIR_INSTRUCTION),
    ("run-tests.sh", crate::testrun::RUN_TESTS_TEMPLATE),
];

/// How continuation lines of a multi-line value are indented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Indent {
    /// Inserted verbatim.
    None,
    /// Continuation lines take the indentation of the placeholder's line.
    Hanging,
}

/// Substitutes each placeholder in a single pass over the template, so text
/// inside substituted values is never rescanned. Each placeholder must occur
/// exactly once.
pub fn fill(template: &str, values: &[(&str, &str)], indent: Indent) -> String {
    let mut spans: Vec<(usize, &str, &str)> = values
        .iter()
        .map(|(p, v)| {
            let at = template.find(p).unwrap_or_else(|| panic!("template lacks placeholder {p}"));
            (at, *p, *v)
        })
        .collect();
    spans.sort_by_key(|s| s.0);

    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut pos = 0;
    for (at, placeholder, value) in spans {
        out.push_str(&template[pos..at]);
        match indent {
            Indent::None => out.push_str(value),
            Indent::Hanging => {
                let line_start = template[..at].rfind('\n').map_or(0, |i| i + 1);
                let prefix: String = template[line_start..at].chars().take_while(|c| *c == ' ').collect();
                push_hanging(&mut out, value, &prefix);
            }
        }
        pos = at + placeholder.len();
    }
    out.push_str(&template[pos..]);
    out
}

fn push_hanging(out: &mut String, value: &str, prefix: &str) {
    for (i, line) in value.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
            if !line.is_empty() {
                out.push_str(prefix);
            }
        }
        out.push_str(line);
    }
}

/// Indents every non-empty line by `width` spaces.
pub fn indent_block(text: &str, width: usize) -> String {
    let pad = " ".repeat(width);
    text.split('\n')
        .map(|l| if l.is_empty() { String::new() } else { format!("{pad}{l}") })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_placeholder_occurs_once() {
        let expect: &[(&str, &[&str])] = &[
            (DEGRADATION_PROMPT_INITIAL, &[P_CANDIDATES, P_DIRECTIONS, P_MORE_EXAMPLES, P_PREVIOUS_TITLES]),
            (DEGRADATION_PROMPT_REFINE, &[P_TARGET_UTS, P_DRAFT]),
            (DEGRADATION_INSTRUCTION, &[P_DEGRADATION_ISSUE, P_UTS]),
            (REPAIR_PROMPT_STRONG, &[P_TASK_DESCRIPTION, P_SYMPTOMS]),
            (REPAIR_PROMPT_WEAK, &[P_TASK_DESCRIPTION, P_SYMPTOMS]),
            (REPAIR_PROMPT_BALANCED, &[P_TASK_DESCRIPTION, P_SYMPTOMS]),
            (REPAIR_INSTRUCTION, &[P_PROBLEM_STATEMENT]),
        ];
        for (template, placeholders) in expect {
            for p in *placeholders {
                assert_eq!(template.matches(p).count(), 1, "{p}");
            }
        }
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = fill("a {x} b {y}", &[("{x}", "{y}"), ("{y}", "Y")], Indent::None);
        assert_eq!(out, "a {y} b Y");
    }

    #[test]
    fn hanging_indent_follows_placeholder_column() {
        let out = fill("k: |\n    {v}\nend", &[("{v}", "one\ntwo\n\nthree")], Indent::Hanging);
        assert_eq!(out, "k: |\n    one\n    two\n\n    three\nend");
    }
}

use crate::state::TestId;

use super::TestRunError;

pub const RUN_TESTS_TEMPLATE: &str = include_str!("../../templates/run-tests.sh");
pub const UTS_PLACEHOLDER: &str = "{UTs}";

/// Renders `run-tests.sh` for the selected tests, space-joined in input order.
pub fn render_run_script(selected: &[TestId]) -> Result<String, TestRunError> {
    if selected.is_empty() {
        return Err(TestRunError::EmptySelection);
    }
    let ids: Vec<String> = selected.iter().map(|t| t.to_string()).collect();
    Ok(RUN_TESTS_TEMPLATE.replacen(UTS_PLACEHOLDER, &ids.join(" "), 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_test_lands_after_verbose_flag() {
        let script = render_run_script(&["tests/a.py::t1".parse().unwrap()]).unwrap();
        assert!(script.contains("pytest --disable-warnings --color=no --tb=no --verbose tests/a.py::t1'"));
        assert!(!script.contains(UTS_PLACEHOLDER));
    }

    #[test]
    fn empty_selection() {
        assert_eq!(render_run_script(&[]), Err(TestRunError::EmptySelection));
    }

    #[test]
    fn template_has_one_placeholder() {
        assert_eq!(RUN_TESTS_TEMPLATE.matches(UTS_PLACEHOLDER).count(), 1);
    }
}

//! Dataset statistics over a directory of task bundles.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::packager::{bundle_dirs, load_and_validate, TaskInstance};
use crate::prompt::strip_hint;
use crate::util::word_count;

/// Token counts written next to the bundles by generation runs.
pub const TOKEN_LEDGER: &str = "token_ledger.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instance_count: usize,
    pub image_count: usize,
    pub mean_issue_words: f64,
    pub mean_dockerfile_lines: f64,
    pub mean_f2p: f64,
    pub mean_p2p: f64,
    pub total_tokens_spent: u64,
}

/// Full-scale figures reported for the original dataset, shown for comparison.
pub const REFERENCE_STATS: DatasetStats = DatasetStats {
    instance_count: 1655,
    image_count: 29,
    mean_issue_words: 159.1,
    mean_dockerfile_lines: 6.8,
    mean_f2p: 20.4,
    mean_p2p: 29.6,
    total_tokens_spent: 2_300_000_000,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub stats: DatasetStats,
    /// Bundles that failed validation, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Arithmetic mean maintained one sample at a time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMean {
    count: u64,
    mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenLedger {
    pub total_tokens: u64,
}

impl TokenLedger {
    pub fn read(root: &Path) -> u64 {
        std::fs::read_to_string(root.join(TOKEN_LEDGER))
            .ok()
            .and_then(|t| serde_json::from_str::<TokenLedger>(&t).ok())
            .map_or(0, |l| l.total_tokens)
    }

    /// Adds `tokens` to the ledger under `root`.
    pub fn add(root: &Path, tokens: u64) -> std::io::Result<u64> {
        let total = Self::read(root) + tokens;
        std::fs::create_dir_all(root)?;
        let text = serde_json::to_string_pretty(&TokenLedger { total_tokens: total }).expect("ledger serializes");
        std::fs::write(root.join(TOKEN_LEDGER), text + "\n")?;
        Ok(total)
    }
}

/// Words in the issue body with any hint removed.
pub fn issue_words(instance: &TaskInstance) -> usize {
    word_count(&strip_hint(&instance.problem_statement).0)
}

/// Means over the given instances. Line counts cover delta directives only.
pub fn stats_of(instances: &[TaskInstance]) -> DatasetStats {
    let n = instances.len();
    if n == 0 {
        return DatasetStats::default();
    }
    let mean = |f: &dyn Fn(&TaskInstance) -> usize| instances.iter().map(f).sum::<usize>() as f64 / n as f64;
    let images: BTreeSet<_> = instances.iter().map(|x| &x.base).collect();
    DatasetStats {
        instance_count: n,
        image_count: images.len(),
        mean_issue_words: mean(&issue_words),
        mean_dockerfile_lines: mean(&|x| x.delta.dockerfile_lines().len()),
        mean_f2p: mean(&|x| x.fail_to_pass.len()),
        mean_p2p: mean(&|x| x.pass_to_pass.len()),
        total_tokens_spent: 0,
    }
}

/// Scans every bundle under `root`; invalid ones are reported and skipped.
pub fn compute_stats(root: &Path) -> StatsReport {
    let dirs = match bundle_dirs(root) {
        Ok(d) => d,
        Err(e) => {
            return StatsReport { stats: DatasetStats::default(), skipped: vec![(root.to_path_buf(), e.to_string())] }
        }
    };
    let loaded: Vec<_> = dirs.par_iter().map(|d| (d.clone(), load_and_validate(d))).collect();
    let mut instances = Vec::new();
    let mut skipped = Vec::new();
    for (dir, r) in loaded {
        match r {
            Ok(x) => instances.push(x),
            Err(e) => skipped.push((dir, e.to_string())),
        }
    }
    let mut stats = stats_of(&instances);
    stats.total_tokens_spent = TokenLedger::read(root);
    StatsReport { stats, skipped }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &REFERENCE_STATS;
        writeln!(f, "{:<24} {:>12} {:>14}", "metric", "this run", "full-scale")?;
        writeln!(f, "{:<24} {:>12} {:>14}", "instances", self.instance_count, r.instance_count)?;
        writeln!(f, "{:<24} {:>12} {:>14}", "images", self.image_count, r.image_count)?;
        writeln!(f, "{:<24} {:>12.1} {:>14.1}", "issue length (words)", self.mean_issue_words, r.mean_issue_words)?;
        writeln!(
            f,
            "{:<24} {:>12.1} {:>14.1}",
            "dockerfile lines", self.mean_dockerfile_lines, r.mean_dockerfile_lines
        )?;
        writeln!(f, "{:<24} {:>12.1} {:>14.1}", "fail-to-pass tests", self.mean_f2p, r.mean_f2p)?;
        writeln!(f, "{:<24} {:>12.1} {:>14.1}", "pass-to-pass tests", self.mean_p2p, r.mean_p2p)?;
        write!(f, "{:<24} {:>12} {:>14}", "tokens spent", self.total_tokens_spent, r.total_tokens_spent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_root_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(compute_stats(dir.path()), StatsReport::default());
        assert_eq!(compute_stats(&dir.path().join("missing")).stats, DatasetStats::default());
    }

    #[test]
    fn running_mean_tracks_recomputation() {
        let xs = [3.0, 1e6, 7.5, -2.0, 11.0, 0.25];
        let mut m = RunningMean::default();
        for (i, x) in xs.iter().enumerate() {
            m.push(*x);
            let scratch = xs[..=i].iter().sum::<f64>() / (i + 1) as f64;
            assert!((m.mean() - scratch).abs() <= 1e-12 * scratch.abs().max(1.0));
        }
        assert_eq!(m.count(), 6);
    }

    #[test]
    fn ledger_accumulates() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(TokenLedger::read(dir.path()), 0);
        TokenLedger::add(dir.path(), 40).unwrap();
        assert_eq!(TokenLedger::add(dir.path(), 2).unwrap(), 42);
    }
}

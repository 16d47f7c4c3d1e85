//! A self-contained desk-scale setup: two simulated repositories, an offline
//! generator script, and agents that need no model. Used by `generate --demo`
//! and the end-to-end tests.

use std::path::{Path, PathBuf};

use crate::agent::AgentSpec;
use crate::config::{PipelineConfig, ProviderKind};
use crate::llm::{MockRule, MockScript, ReplySelection};
use crate::prompt::{render_task_spec, InversionTaskSpec};
use crate::sandbox::{BackendKind, SimScenario};

pub const MINIZIP_SCENARIO: &str = include_str!("../demo/minizip.json");
pub const TABKIT_SCENARIO: &str = include_str!("../demo/tabkit.json");

struct Variant {
    repo: &'static str,
    title: &'static str,
    category: &'static str,
    tests: &'static [&'static str],
    /// Phrase unique to this variant's description; keys its issue replies.
    marker: &'static str,
    description: &'static str,
    expected: &'static str,
    recovery: &'static str,
    issues: &'static [&'static str],
}

const VARIANTS: &[Variant] = &[
    Variant {
        repo: "minizip",
        title: "Truncated zlib runtime",
        category: "System",
        tests: &[
            "tests/test_compress.py::test_roundtrip",
            "tests/test_compress.py::test_levels[1]",
            "tests/test_compress.py::test_levels[9]",
            "tests/test_archive.py::test_read_sample",
            "tests/test_numeric.py::test_crc_table",
        ],
        marker: "zlib shared object",
        description: "Damage the zlib shared object the interpreter links against so that compression can no longer be loaded. Use `corrupt_lib zlib` and then clear the package cache with `rm -rf /opt/miniconda3/pkgs`.",
        expected: "zlib.error: invalid ELF header when importing the compression module",
        recovery: "Reinstall the zlib runtime library.",
        issues: &[
            "Several of my compression tests started failing: tests/test_compress.py::test_roundtrip and the level tests no longer pass, and reading the sample archive breaks as well. Can you help me figure out why and tell me how to fix it?\nhint:\nThe native library behind compression looks damaged; try `restore_lib zlib`.",
            "I can't compress or read archives anymore. The roundtrip test and tests/test_archive.py::test_read_sample fail with import errors. Could you help me fix it?\nHint:\nSomething below Python is broken. Running `restore_lib zlib` should bring it back.",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Locale variable removal",
        category: "Locale",
        tests: &["tests/test_archive.py::test_unicode_names", "tests/test_cli.py::test_help"],
        marker: "LANG variable",
        description: "Remove the LANG variable from the environment so file names are decoded with the wrong codec. Run `env_unset LANG`.",
        expected: "UnicodeDecodeError when listing archive members",
        recovery: "Set LANG back to C.UTF-8.",
        issues: &[
            "Archives with non-ASCII member names fail to open; tests/test_archive.py::test_unicode_names fails with a decode error. Can you help me figure out why?\nhint:\nCheck the locale settings of the process, for example with `env_set LANG=C.UTF-8`.",
            "Unicode file names in archives stopped working and test_unicode_names fails. I have no idea what changed. Can you help me fix it?",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Silent default level change",
        category: "Code",
        tests: &["tests/test_compress.py::test_default_level", "tests/test_compress.py::test_roundtrip"],
        marker: "default compression level",
        description: "Change the default compression level in the library so archives are stored uncompressed. Run `patch_file /testbed/minizip/core.py level=6 level=0`.",
        expected: "AssertionError: compressed size equals input size",
        recovery: "Restore level=6 as the default.",
        issues: &[
            "tests/test_compress.py::test_default_level fails because compressed output is as large as the input. Can you help me understand why and fix it?\nhint:\nLook at the defaults in minizip/core.py; `patch_file /testbed/minizip/core.py level=0 level=6` restores them.",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Unreadable CA bundle",
        category: "Permissions",
        tests: &["tests/test_crypto.py::test_tls_context", "tests/test_crypto.py::test_aes_roundtrip"],
        marker: "trust anchors",
        description: "Make the system CA bundle unreadable so TLS contexts cannot load trust anchors. Run `chmod_deny /etc/ssl/certs/ca-certificates.crt`.",
        expected: "PermissionError while creating the default TLS context",
        recovery: "Restore read permission on the certificate bundle.",
        issues: &[
            "Creating a TLS context fails in tests/test_crypto.py::test_tls_context with a permission error. Can you help me fix it?\nhint:\nThe trust store may not be readable; try `chmod_allow /etc/ssl/certs/ca-certificates.crt`.",
            "My TLS test fails with PermissionError while encryption itself works. Can you tell me how to fix it?\nhint:\nSomething is wrong with certificate file permissions. `chmod_allow /etc/ssl/certs/ca-certificates.crt` is worth a try.",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Interpreter directory dropped from PATH",
        category: "Shell",
        tests: &["tests/test_cli.py::test_help", "tests/test_numeric.py::test_crc_table"],
        marker: "testbed interpreter",
        description: "Drop the testbed interpreter directory from the search path so the test runner cannot be found. Run `break_path /opt/miniconda3/envs/testbed/bin`.",
        expected: "bash: pytest: command not found",
        recovery: "Put the testbed bin directory back on PATH.",
        issues: &[
            "I cannot run any tests at all: the test command is not found, so tests/test_cli.py::test_help and tests/test_numeric.py::test_crc_table both fail. Can you help?\nhint:\nThe shell no longer finds the environment's executables; `add_path /opt/miniconda3/envs/testbed/bin` fixes the lookup.",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Missing BLAS kernel",
        category: "Dependency",
        tests: &["tests/test_numeric.py::test_checksum_vectorized", "tests/test_numeric.py::test_crc_table"],
        marker: "OpenBLAS kernel",
        description: "Delete the OpenBLAS kernel that numpy loads at import time. Run `rm -f /opt/miniconda3/envs/testbed/lib/libopenblas.so.0`.",
        expected: "ImportError: libopenblas.so.0: cannot open shared object file",
        recovery: "Reinstall openblas.",
        issues: &[
            "tests/test_numeric.py::test_checksum_vectorized fails because numpy cannot be imported. Can you help me fix it?\nhint:\nA linear algebra library numpy depends on is missing; run `ls /opt/miniconda3/pkgs/` to check the cache, then `restore_lib openblas`.",
            "numpy import fails and the vectorized checksum test breaks. Can you help me figure out why?\nhint:\nOne of numpy's native dependencies is gone. Look for a cached copy with `ls /opt/miniconda3/pkgs/` and run `restore_lib openblas`.",
        ],
    },
    Variant {
        repo: "minizip",
        title: "Harmless notes file",
        category: "Docs",
        tests: &["tests/test_cli.py::test_help"],
        marker: "short notes",
        description: "Add a short notes file next to the library. Run `write_file /testbed/minizip/NOTES.txt tuned`.",
        expected: "Nothing should break",
        recovery: "None needed.",
        issues: &["Nothing is failing.\nhint:\nNothing to do."],
    },
    Variant {
        repo: "tabkit",
        title: "Corrupted Arrow core",
        category: "System",
        tests: &[
            "tabkit/tests/io/test_parquet.py::test_read",
            "tabkit/tests/io/test_parquet.py::test_write",
            "tabkit/tests/test_frame.py::test_ops[int64]",
        ],
        marker: "Arrow core library",
        description: "Corrupt the Arrow core library that pyarrow wraps so parquet IO fails at import. Run `corrupt_lib libarrow`.",
        expected: "ImportError: libarrow.so.1500: invalid ELF header",
        recovery: "Reinstall libarrow.",
        issues: &[
            "Reading and writing parquet files fails: tabkit/tests/io/test_parquet.py::test_read errors out and test_write fails. Can you help me fix it?\nhint:\nThe columnar engine's native library looks broken; try `restore_lib libarrow`.",
            "All parquet tests broke overnight with import errors. Could you help me find out why?\nhint:\n`restore_lib libarrow` reinstalls the native part of pyarrow.",
        ],
    },
    Variant {
        repo: "tabkit",
        title: "Deleted UTC zone file",
        category: "Time",
        tests: &[
            "tabkit/tests/test_time.py::test_localize",
            "tabkit/tests/test_time.py::test_convert_utc",
            "tabkit/tests/test_frame.py::test_ops[float64]",
        ],
        marker: "zoneinfo database",
        description: "Delete the UTC zone file from the system zoneinfo database. Run `rm -f /usr/share/zoneinfo/UTC`.",
        expected: "ZoneInfoNotFoundError: 'No time zone found with key UTC'",
        recovery: "Reinstall tzdata.",
        issues: &[
            "Timezone handling is broken: tabkit/tests/test_time.py::test_localize and test_convert_utc fail. Can you help me fix it?\nhint:\nThe zone database seems incomplete; `restore_lib tzdata` reinstalls it.",
        ],
    },
    Variant {
        repo: "tabkit",
        title: "CSV delimiter swap",
        category: "Code",
        tests: &[
            "tabkit/tests/io/test_csv.py::test_read_basic",
            "tabkit/tests/io/test_csv.py::test_read_quoted",
            "tabkit/tests/test_frame.py::test_ops[object]",
        ],
        marker: "comma-separated files",
        description: "Change the default CSV delimiter so comma-separated files parse as a single column. Run `patch_file /testbed/tabkit/io/csv.py \"DELIMITER = ','\" \"DELIMITER = ';'\"`.",
        expected: "AssertionError: expected 3 columns, got 1",
        recovery: "Restore the comma delimiter.",
        issues: &[
            "CSV reading returns a single column: tabkit/tests/io/test_csv.py::test_read_basic and test_read_quoted fail. Can you help me figure out why?\nhint:\nCheck the parser defaults against `git show HEAD:tabkit/io/csv.py`; `patch_file /testbed/tabkit/io/csv.py \"DELIMITER = ';'\" \"DELIMITER = ','\"` puts them back.",
            "My CSV tests fail because every row ends up in one column. Can you fix it?\nhint:\nCompare with history via `git log -p tabkit/io/csv.py`, then `patch_file /testbed/tabkit/io/csv.py \"DELIMITER = ';'\" \"DELIMITER = ','\"`.",
        ],
    },
    Variant {
        repo: "tabkit",
        title: "Cache directory variable unset",
        category: "Environment",
        tests: &["tabkit/tests/test_cache.py::test_cache_dir", "tabkit/tests/test_frame.py::test_ops[object]"],
        marker: "reads at startup",
        description: "Unset the cache directory variable tabkit reads at startup. Run `env_unset TABKIT_CACHE_DIR`.",
        expected: "KeyError: 'TABKIT_CACHE_DIR'",
        recovery: "Export TABKIT_CACHE_DIR=/root/.cache/tabkit.",
        issues: &[
            "tabkit/tests/test_cache.py::test_cache_dir fails with a KeyError. Can you help me fix it?\nhint:\nThe library expects a configured cache location, e.g. `env_set TABKIT_CACHE_DIR=/root/.cache/tabkit`.",
        ],
    },
    Variant {
        repo: "tabkit",
        title: "Locked SQLite library",
        category: "Permissions",
        tests: &[
            "tabkit/tests/test_sql.py::test_query",
            "tabkit/tests/test_sql.py::test_schema",
            "tabkit/tests/test_frame.py::test_ops[int64]",
        ],
        marker: "SQLite shared library",
        description: "Remove read permission from the SQLite shared library so the sqlite3 module cannot load. Run `chmod_deny /usr/lib/x86_64-linux-gnu/libsqlite3.so.0`.",
        expected: "ImportError: libsqlite3.so.0: cannot open shared object file: Permission denied",
        recovery: "Restore read permission on libsqlite3.",
        issues: &[
            "SQL queries fail: tabkit/tests/test_sql.py::test_query and test_schema cannot import sqlite3. Can you help me fix it?\nhint:\nA system library is present but not loadable; `chmod_allow /usr/lib/x86_64-linux-gnu/libsqlite3.so.0`.",
            "The sqlite3 module refuses to load with a permission error. Can you help me figure out why?",
        ],
    },
    Variant {
        repo: "tabkit",
        title: "Shifted process timezone",
        category: "Time",
        tests: &["tabkit/tests/test_time.py::test_convert_utc", "tabkit/tests/test_time.py::test_localize"],
        marker: "silently drift",
        description: "Shift the process timezone away from UTC so conversions silently drift. Run `env_set TZ=Europe/Berlin`.",
        expected: "AssertionError: timestamps off by one hour",
        recovery: "Set TZ back to UTC.",
        issues: &[
            "tabkit/tests/test_time.py::test_convert_utc fails with timestamps off by an hour. Can you help me fix it?\nhint:\nCheck the timezone the process runs in; `env_set TZ=UTC`.",
        ],
    },
];

fn spec_of(v: &Variant, refined: bool) -> InversionTaskSpec {
    let mut description = v.description.to_string();
    if refined {
        description.push_str(" Run the target Unit Tests to confirm the failure.");
    }
    InversionTaskSpec {
        task_name: v.title.to_string(),
        category: v.category.to_string(),
        selected_uts: v.tests.iter().map(|t| t.parse().expect("demo test id")).collect(),
        task_description: description,
        expected_result: v.expected.to_string(),
        recovery_strategy: v.recovery.to_string(),
    }
}

/// Generator replies for the demo: refinement keyed on the draft title, issues
/// keyed on a phrase of the task description, initial tasks keyed on the
/// repository's tests. Replies are picked by prompt hash, so the script is
/// independent of call order.
pub fn mock_script() -> MockScript {
    let hash = |contains: String, replies: Vec<String>| MockRule {
        contains: Some(contains),
        replies,
        select: ReplySelection::Hash,
    };
    let mut rules = Vec::new();
    for v in VARIANTS {
        rules.push(hash(format!("**Task Name**: {}\n", v.title), vec![render_task_spec(&spec_of(v, true))]));
    }
    for v in VARIANTS {
        rules.push(hash(v.marker.to_string(), v.issues.iter().map(|s| s.to_string()).collect()));
    }
    for (repo, probe) in
        [("minizip", "tests/test_cli.py::test_help"), ("tabkit", "tabkit/tests/test_sql.py::test_query")]
    {
        let replies = VARIANTS
            .iter()
            .filter(|v| v.repo == repo)
            .map(|v| format!("Here is the task.\n\n{}\n", render_task_spec(&spec_of(v, false))))
            .collect();
        rules.push(hash(probe.to_string(), replies));
    }
    MockScript { rules }
}

pub fn scenarios() -> Vec<SimScenario> {
    [MINIZIP_SCENARIO, TABKIT_SCENARIO].iter().map(|s| SimScenario::parse(s).expect("demo scenario")).collect()
}

/// Read-only exploration a solver does before acting on the issue.
pub fn solver_warmup() -> Vec<String> {
    [
        "ls /",
        "ls /testbed",
        "ls /usr/lib/x86_64-linux-gnu",
        "ls /opt/miniconda3/envs/testbed/lib",
        "ls /etc/ssl/certs",
        "ls /usr/share/zoneinfo",
        "cat /testbed/minizip/core.py",
        "cat /testbed/tabkit/io/csv.py",
        "echo checking environment",
        "ls /opt/miniconda3/envs/testbed/bin",
        "cat /testbed/minizip/config.toml",
        "ls /testbed/tests",
        "ls /testbed/tabkit",
        "echo inspecting libraries",
        "ls /opt/miniconda3/envs/testbed/lib/python3.11/site-packages",
        "echo reproducing failure",
        "pytest --disable-warnings --color=no --tb=no --verbose",
        "echo applying fix",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed, ..Default::default() };
    cfg.llm.provider = ProviderKind::Mock;
    cfg.sandbox.backend = BackendKind::Simulated;
    cfg.generation.tasks_per_gold = 14;
    cfg.generation.refine_probability = 0.3;
    cfg.degradation_agent = AgentSpec::InstructionFollowing { warmup: vec!["ls /testbed".into()] };
    cfg.solver_agent = AgentSpec::InstructionFollowing { warmup: solver_warmup() };
    cfg
}

/// Writes scenarios, the generator script, and `config.toml` into `dir`;
/// returns the config path.
pub fn write_demo(dir: &Path, seed: u64) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("minizip.json"), MINIZIP_SCENARIO)?;
    std::fs::write(dir.join("tabkit.json"), TABKIT_SCENARIO)?;
    let script = serde_json::to_string_pretty(&mock_script()).expect("script serializes");
    std::fs::write(dir.join("generator-replies.json"), script + "\n")?;
    let mut cfg = config(seed);
    cfg.golds = vec!["minizip.json".into(), "tabkit.json".into()];
    cfg.sandbox.scenarios = cfg.golds.clone();
    cfg.llm.mock_script = Some("generator-replies.json".into());
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::SimBackend;

    #[test]
    fn scenarios_are_healthy_golds() {
        for s in scenarios() {
            assert!(s.failing_in_gold().is_empty(), "{}", s.repo);
            crate::harness::verify_gold(&s.gold_instance(), &SimBackend::new(scenarios())).unwrap();
        }
    }

    #[test]
    fn variant_tests_exist_and_markers_are_unique() {
        let all: Vec<String> = scenarios().iter().flat_map(|s| s.tests.iter().map(|t| t.id.to_string())).collect();
        for v in VARIANTS {
            for t in v.tests {
                assert!(all.contains(&t.to_string()), "{t}");
            }
            let holders = VARIANTS.iter().filter(|w| w.description.contains(v.marker)).count();
            assert_eq!(holders, 1, "{}", v.marker);
        }
    }

    #[test]
    fn markers_stay_out_of_initial_prompts() {
        let catalog = crate::prompt::DEFAULT_CATALOG;
        for v in VARIANTS {
            assert!(!catalog.contains(v.marker), "{}", v.marker);
            assert!(VARIANTS.iter().all(|w| !w.title.contains(v.marker)), "{}", v.marker);
            assert!(!crate::prompt::templates::DEGRADATION_PROMPT_INITIAL.contains(v.marker));
        }
    }
}

//! Fixtures shared by the criterion benchmarks.

use specexit_core::suite::{verbose_suite, SuiteConfig, VerboseSuite};

/// A small verbose suite sized for benchmarking.
pub fn bench_suite(tasks: usize, paragraph_len: usize) -> VerboseSuite {
    verbose_suite(&SuiteConfig {
        tasks,
        paragraph_len,
        ..SuiteConfig::default()
    })
    .expect("benchmark suite configuration is valid")
}

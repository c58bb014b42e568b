//! Built-in verification suites (runnable via the CLI `verify` command).

pub mod oracle;

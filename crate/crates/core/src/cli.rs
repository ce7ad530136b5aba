//! Command-line entry point. Subcommands are wired in as the modules land.

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    eprintln!("not yet wired");
    2
}

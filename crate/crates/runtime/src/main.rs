use std::error::Error;

use clap::Parser;
use machstate_runtime::cli::{run, Cli};

/// True when any error in the chain is a closed stdout, e.g. piping into `head`.
fn broken_pipe(e: &(dyn Error + 'static)) -> bool {
    let pipe = |io: &std::io::Error| io.kind() == std::io::ErrorKind::BrokenPipe;
    let csv_pipe = |c: &csv::Error| matches!(c.kind(), csv::ErrorKind::Io(io) if pipe(io));
    let mut cur = Some(e);
    while let Some(err) = cur {
        let hit = err.downcast_ref::<std::io::Error>().is_some_and(pipe)
            || err.downcast_ref::<csv::Error>().is_some_and(csv_pipe)
            || match err.downcast_ref::<machstate_core::Error>() {
                Some(machstate_core::Error::Io(io)) => pipe(io),
                Some(machstate_core::Error::Csv(c)) => csv_pipe(c),
                _ => false,
            };
        if hit {
            return true;
        }
        cur = err.source();
    }
    false
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        if broken_pipe(e.as_ref()) {
            return;
        }
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

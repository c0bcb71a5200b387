//! Stub runner executable: one JSON request on stdin, one JSON verdict on stdout.

use std::io::{Read, Write};

fn main() {
    let mut input = String::new();
    let verdict = match std::io::stdin().read_to_string(&mut input) {
        Ok(_) => persd_core::stub::handle_raw(&input),
        Err(e) => persd_core::exec::protocol::RunnerVerdict::harness_error(format!("cannot read stdin: {e}")),
    };
    let line = serde_json::to_string(&verdict).expect("verdict serializes");
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

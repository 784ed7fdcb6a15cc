//! Writes a synthetic demo dataset: `<root>/train`, `<root>/val`,
//! `<root>/test` PNG folders.
//!
//! Usage: cargo run --release --example make_dataset -- <root> [side] [n_train] [n_val] [n_test] [seed]

use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = PathBuf::from(args.first().map(String::as_str).unwrap_or("data"));
    let get = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let side = get(1, 64);
    let n_train = get(2, 200);
    let n_val = get(3, 20);
    let n_test = get(4, 40);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1);

    stegokey::synth::write_synth_dataset(&root.join("train"), seed, n_train, side).unwrap();
    stegokey::synth::write_synth_dataset(&root.join("val"), seed ^ 0xA5A5, n_val, side).unwrap();
    stegokey::synth::write_synth_dataset(&root.join("test"), seed ^ 0x5A5A, n_test, side).unwrap();
    println!(
        "wrote {n_train}/{n_val}/{n_test} images at {side}x{side} under {}",
        root.display()
    );
}

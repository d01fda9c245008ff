//! Generate the synthetic demo fixture into a directory:
//! `cargo run --example gen_fixture -- <dir> [seed]`

use flusion::synthetic::{generate, write_fixture, SyntheticSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "fixture".to_string());
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(7);
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let fixture = generate(&spec);
    write_fixture(&fixture, std::path::Path::new(&dir)).expect("write fixture");
    println!(
        "wrote fixture with {} NHSN observations to {dir}",
        fixture.nhsn.len()
    );
}

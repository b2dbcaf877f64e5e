//! Writes the packaged synthetic ABPM dataset.
//!
//! Usage: `cargo run -p smoothhooi --example make_dataset -- [OUT] [N] [SEED]`

use std::path::PathBuf;

use smoothhooi::io::write_long_csv;
use smoothhooi::sim::synthetic_abpm_records;

fn main() -> smoothhooi::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(
        args.next()
            .unwrap_or_else(|| "data/synthetic_abpm.csv".into()),
    );
    let n: usize = args
        .next()
        .map_or(100, |s| s.parse().expect("N must be an integer"));
    let seed: u64 = args
        .next()
        .map_or(2024, |s| s.parse().expect("SEED must be an integer"));
    let records = synthetic_abpm_records(n, 0.5, 20, seed)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_long_csv(std::fs::File::create(&out)?, &records)?;
    eprintln!(
        "wrote {} rows for {n} subjects to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

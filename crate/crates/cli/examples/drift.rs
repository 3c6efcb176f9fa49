//! Desk-scale drift comparison.
//!
//! cargo run --release -p pkmlab-cli --example drift -- <out-root> [steps] [seed...]

use std::path::PathBuf;

use pkmlab_cli::experiment::{drift, DriftSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "drift-out".into()));
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let mut seeds: Vec<u64> = args.map(|s| s.parse()).collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        seeds.push(1);
    }
    for seed in seeds {
        let r = drift(&root, &DriftSpec::desk(steps, seed), true)?;
        println!(
            "seed {seed}: ppl trunk {:.3}/{:.3} pkm {:.3} resm {:.3} | MU_top1 pkm {:.4} resm {:.4} | last bucket pkm {} resm {}",
            r.trunk_ppl_at_steps, r.trunk_ppl_at_total, r.pkm_ppl, r.resm_ppl, r.pkm_mu_top1, r.resm_mu_top1, r.pkm_last_bucket, r.resm_last_bucket
        );
    }
    Ok(())
}

//! Microbenchmark the two-product low-rank route against materializing the
//! dense update matrix first. Includes a break-even row (r = d) where the
//! low-rank form stops paying.

use cea_kit::harness::bench::{cmd_bench, render_table};

fn main() {
    let grid = [(4096, 64, 8), (4096, 256, 8), (1024, 128, 32), (512, 64, 64)];
    let report = cmd_bench(&grid, 10, 100).unwrap();
    print!("{}", render_table(&report));
}

//! Finite-difference check of every differentiable op, then a deliberately
//! corrupted run to show the harness catching it.

use ppotd::run::{check_op, gradcheck_csv, run_gradcheck};

fn main() -> ppotd::Result<()> {
    print!("{}", gradcheck_csv(&run_gradcheck(None)?));
    let bad = check_op("layer_norm", true)?;
    println!(
        "corrupted layer_norm: max relative error {:.3e}, passed {}",
        bad.report.max_rel_error,
        bad.passed()
    );
    Ok(())
}

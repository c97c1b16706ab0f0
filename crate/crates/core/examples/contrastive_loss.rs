//! The phrase-object contrastive loss computed three ways, and how it
//! reacts as scores move toward the targets.

use ppotd::matching::{pocl, pocl_col_form, pocl_row_form};
use ppotd::numcore::{Tape, Tensor};

fn main() -> ppotd::Result<()> {
    // Two phrases, four object tokens; phrase 1 is plural.
    let target = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]])?;
    for blend in [0.0, 0.5, 0.9, 0.99] {
        let g = target.map(|t| 0.5 + blend * (t - 0.5));
        let mut tape = Tape::new();
        let v = tape.constant(g.clone());
        let l = pocl(&mut tape, v, &target)?;
        println!(
            "blend {blend:<4}: mean {:.6}  row form {:.6}  column form {:.6}",
            tape.value(l).item(),
            pocl_row_form(&g, &target)?,
            pocl_col_form(&g, &target)?
        );
    }
    Ok(())
}

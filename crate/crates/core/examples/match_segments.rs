//! Bipartite matching of object tokens to segments, checked against
//! exhaustive search.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ppotd::matching::{brute_force_assignment, hungarian};
use ppotd::numcore::Tensor;

fn main() -> ppotd::Result<()> {
    let cost = Tensor::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0], vec![0.5, 4.0, 4.0]])?;
    let a = hungarian(&cost)?;
    println!(
        "4 tokens x 3 segments: pairs {:?}, unmatched tokens {:?}, cost {}",
        a.pairs, a.unmatched, a.cost
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [3, 5, 7] {
        let c = Tensor::randn(&[n + 2, n], 1.0, &mut rng);
        let fast = hungarian(&c)?;
        let slow = brute_force_assignment(&c)?;
        println!(
            "{}x{n}: hungarian {:.6}, brute force {:.6}, same pairs: {}",
            n + 2,
            fast.cost,
            slow.cost,
            fast.pairs == slow.pairs
        );
    }
    Ok(())
}

//! Saves a model checkpoint and configuration, reloads both and confirms
//! the parameters come back bit for bit.

use ppotd::run::{checkpoint, init_model, RunConfig};

fn main() -> ppotd::Result<()> {
    let dir = std::env::temp_dir().join("ppotd_checkpoint_example");
    std::fs::create_dir_all(&dir).expect("create example directory");
    let cfg = RunConfig {
        seed: 5,
        ..RunConfig::default()
    };
    let (_, store) = init_model(&cfg)?;
    checkpoint::save(&store, &dir.join("model.ckpt"))?;
    cfg.save(&dir.join("config.txt"))?;

    let loaded_cfg = RunConfig::load(&dir.join("config.txt"))?;
    let (_, mut restored) = init_model(&RunConfig {
        seed: 6,
        ..loaded_cfg.clone()
    })?;
    checkpoint::load_into(&mut restored, &dir.join("model.ckpt"))?;
    let identical = store
        .values()
        .iter()
        .zip(restored.values())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!(
        "{} tensors, {} scalars, config equal: {}, parameters identical: {identical}",
        store.len(),
        store.num_scalars(),
        loaded_cfg == cfg
    );
    println!("files in {}", dir.display());
    Ok(())
}

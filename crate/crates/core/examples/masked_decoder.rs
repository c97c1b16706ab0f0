//! One forward pass of the untrained model on a generated scene, showing
//! per-layer attention scales and how many keys each layer masks.

use ppotd::numcore::kernels::MASKED;
use ppotd::numcore::Tape;
use ppotd::run::{init_model, RunConfig};
use ppotd::scene::generate_scene;

fn main() -> ppotd::Result<()> {
    let cfg = RunConfig {
        num_layers: 6,
        ..RunConfig::default()
    };
    let (model, store) = init_model(&cfg)?;
    let (scene, phrases) = generate_scene(3, &cfg.scene())?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let out = model.forward(&mut tape, &p, &scene, &phrases)?;
    println!(
        "{} phrases, {} object tokens, masks on {:?}",
        out.num_phrases, cfg.num_tokens, out.mask_extents
    );
    for (l, layer) in out.layers.iter().enumerate().skip(1) {
        let rec = layer.attention.as_ref().expect("decoder layers record attention");
        let masked = rec.mask.data().iter().filter(|&&m| m == MASKED).count();
        let on_masked = rec
            .probs
            .iter()
            .flat_map(|h| h.data().iter().zip(rec.mask.data()))
            .filter(|(_, &m)| m == MASKED)
            .fold(0.0f64, |a, (w, _)| a.max(*w));
        println!(
            "layer {l}: scale {}, {} of {} query-key pairs masked, largest weight on a masked key {on_masked}",
            rec.scale,
            masked,
            rec.mask.len()
        );
    }
    Ok(())
}

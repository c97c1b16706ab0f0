//! Generates a few synthetic scenes, writes them to disk and lists their
//! phrases.
//!
//! Usage: `cargo run --example generate_scenes -- [out_dir] [count]`

use ppotd::scene::{generate_scene, read_scene, write_scene, SceneConfig};

fn main() -> ppotd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::path::PathBuf::from(args.first().map(String::as_str).unwrap_or("scenes"));
    let count: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = SceneConfig::default();
    for seed in 0..count {
        let (scene, phrases) = generate_scene(seed, &cfg)?;
        let dir = out.join(format!("scene{seed}"));
        write_scene(&dir, &scene, &phrases)?;
        let stored = read_scene(&dir)?;
        println!(
            "scene {seed}: {}x{}, {} segments -> {}",
            scene.height(),
            scene.width(),
            scene.segments.len(),
            dir.display()
        );
        for p in &stored.phrases {
            let kind = if p.is_thing { "thing" } else { "stuff" };
            let number = if p.is_plural { "plural" } else { "singular" };
            println!(
                "  phrase {}: class {} ({kind}, {number}) -> segments {:?}",
                p.id, p.class, p.segment_ids
            );
        }
    }
    Ok(())
}

//! Write a synthetic dataset in the canonical format (PNG + JSON sidecar).
//!
//! Usage: make_dataset <out_dir> [count] [min_points] [max_points] [size] [seed]

use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args
        .next()
        .unwrap_or_else(|| "synthdata".to_string())
        .into();
    let mut num =
        |default: usize| -> usize { args.next().and_then(|s| s.parse().ok()).unwrap_or(default) };
    let count = num(5);
    let min_points = num(3);
    let max_points = num(20);
    let size = num(128);
    let seed = num(77) as u64;
    let scenes = crowdpoint::data::synth_scenes(count, (min_points, max_points), size, seed)?;
    for scene in &scenes {
        crowdpoint::data::save_scene(scene, &out)?;
    }
    println!(
        "wrote {} scenes ({} px, {}-{} points, seed {seed}) to {}",
        scenes.len(),
        size,
        min_points,
        max_points,
        out.display()
    );
    Ok(())
}

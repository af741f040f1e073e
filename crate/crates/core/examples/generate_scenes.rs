//! Generates a few synthetic scenes, prints their ground-truth layout as
//! ASCII and writes a small eval split to disk.
//!
//! `cargo run --example generate_scenes -- [out_dir]`

use std::path::PathBuf;

use topdown_slots::data::{eval_split, mean_within_object_variance, read_split, write_split, SceneSpec, Split};

fn main() -> topdown_slots::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("topdown-scenes"), PathBuf::from);
    let spec = SceneSpec::default();
    let scenes = eval_split(&spec, 3)?;
    for s in &scenes {
        println!("scene seed {} objects {} categories {:?}", s.seed, s.num_objects(), s.categories);
        for r in 0..s.height {
            let row: String = (0..s.width)
                .map(|c| match s.gt_labels[r * s.width + c] {
                    0 => '.',
                    l => char::from_digit(l as u32, 36).unwrap_or('#'),
                })
                .collect();
            println!("  {row}");
        }
    }

    let paths = write_split(&out, &spec, Split::Eval, 32)?;
    let back = read_split(&out, Split::Eval)?;
    // the last path is the split's index file
    assert_eq!(back.len() + 1, paths.len());
    println!("wrote {} scenes to {}", back.len(), out.display());
    println!("mean within-object variance {:.5}", mean_within_object_variance(&back));
    Ok(())
}

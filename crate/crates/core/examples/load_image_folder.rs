//! Loads a `root/<class>/<image>.png` tree, resizing to 28×28 grayscale,
//! and prints per-class counts. Without an argument, writes a tiny demo
//! tree to a temporary directory first.
//!
//! `cargo run --release --example load_image_folder -- [root]`

use std::path::PathBuf;

use fewshot::data::{augment_rotations, load_image_dataset, split_classes, LoadOptions};
use fewshot::rng::{stream, Stream};

fn demo_tree() -> PathBuf {
    let root = std::env::temp_dir().join("fewshot_demo_images");
    for (c, name) in ["circle", "square", "stripe"].iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for k in 0..3u32 {
            let img = image::GrayImage::from_fn(40, 40, |x, y| {
                let on = match c {
                    0 => (x as i32 - 20).pow(2) + (y as i32 - 20).pow(2) < (80 + 20 * k as i32),
                    1 => (12..28).contains(&x) && (12..28).contains(&y),
                    _ => (x + k) % 8 < 3,
                };
                image::Luma([if on { 255 } else { 0 }])
            });
            img.save(dir.join(format!("{k}.png"))).unwrap();
        }
    }
    root
}

fn main() -> fewshot::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(demo_tree);
    let report = load_image_dataset(
        &root,
        &LoadOptions {
            target_size: 28,
            grayscale: true,
            invert: false,
        },
    )?;
    for path in &report.skipped {
        println!("skipped {}", path.display());
    }
    let ds = report.dataset;
    for class in &ds.classes {
        println!("{:<12} {} images", class.name, class.examples.len());
    }
    let n = ds.num_classes();
    let split = split_classes(ds, (n, 0, 0), &mut stream(0, Stream::Split))?;
    let rotated = augment_rotations(&split)?;
    println!("{} classes, {} after adding rotations", n, rotated.num_classes());
    Ok(())
}

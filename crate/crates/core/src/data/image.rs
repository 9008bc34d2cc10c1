//! Image-folder loading, bilinear resizing and quarter-turn rotation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

/// Resizes `[ch, h, w]` to `[ch, out_h, out_w]`.
///
/// Half-pixel-centre convention: destination index `d` samples source
/// coordinate `s = (d + 0.5) · (in / out) − 0.5`, clamped to
/// `[0, in − 1]`. With `s0 = floor(s)`, `s1 = min(s0 + 1, in − 1)` and
/// `f = s − s0` along each axis, the output is
/// `(1−fy)((1−fx)·p[y0,x0] + fx·p[y0,x1]) + fy((1−fx)·p[y1,x0] + fx·p[y1,x1])`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!("resize target {out_h}x{out_w}")));
    }
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("resize expects [ch, h, w], got {s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(ch * out_h * out_w);
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bottom = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Tensor::new(&[ch, out_h, out_w], out)
}

/// Quarter turn counter-clockwise of a square `[ch, n, n]` image:
/// `out[c, i, j] = in[c, j, n − 1 − i]`.
pub fn rotate90(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Shape(format!(
            "rotate90 expects square [ch, n, n], got {s:?}"
        )));
    }
    let (ch, n) = (s[0], s[1]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for c in 0..ch {
        let base = c * n * n;
        for i in 0..n {
            for j in 0..n {
                out[base + i * n + j] = src[base + j * n + (n - 1 - i)];
            }
        }
    }
    Tensor::new(s, out)
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Square output side.
    pub target_size: usize,
    /// Collapse colour to one luminance channel (0.299 R + 0.587 G + 0.114 B).
    pub grayscale: bool,
    /// Replace every pixel `v` by `1 − v`.
    pub invert: bool,
}

/// Outcome of a directory load.
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path, opts: &LoadOptions) -> std::result::Result<Tensor, String> {
    let img = ::image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = if opts.grayscale { 1 } else { 3 };
    let mut data = vec![0.0; channels * h * w];
    let already_gray = matches!(
        img.color(),
        ::image::ColorType::L8 | ::image::ColorType::L16 | ::image::ColorType::La8 | ::image::ColorType::La16
    );
    if opts.grayscale && already_gray {
        for (i, p) in img.to_luma8().pixels().enumerate() {
            data[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
            if opts.grayscale {
                data[i] = (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0);
            } else {
                data[i] = r;
                data[h * w + i] = g;
                data[2 * h * w + i] = b;
            }
        }
    }
    if opts.invert {
        data.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    let t = Tensor::new(&[channels, h, w], data).map_err(|e| e.to_string())?;
    if h == opts.target_size && w == opts.target_size {
        Ok(t)
    } else {
        resize_bilinear(&t, opts.target_size, opts.target_size).map_err(|e| e.to_string())
    }
}

/// Loads `root/<class>/<image>` into a dataset, one class per directory,
/// classes and files in lexicographic order. Undecodable files are
/// skipped with a warning; a class left empty is an error. All classes
/// start tagged meta-train.
pub fn load_image_dataset(root: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    if opts.target_size == 0 {
        return Err(Error::Parameter("target size must be positive".into()));
    }
    let channels = if opts.grayscale { 1 } else { 3 };
    let mut dataset = Dataset::new(
        channels,
        opts.target_size,
        opts.target_size,
        format!("images:{}", root.display()),
    );
    let mut skipped = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut examples = Vec::new();
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
            match decode(&file, opts) {
                Ok(t) => examples.push(t),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push(file);
                }
            }
        }
        if examples.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} has no decodable images",
                class_dir.display()
            )));
        }
        let flags = vec![false; examples.len()];
        dataset.push_class(name, examples, flags)?;
    }
    if dataset.num_classes() == 0 {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(LoadReport { dataset, skipped })
}

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use super::{DegradationTag, DegradedPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image to `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Write `[3, H, W]` (or `[1, 3, H, W]`) as an 8-bit PNG, rounding half up.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "save_image",
                format!("expected [3, H, W], got {:?}", img.shape()),
            ))
        }
    };
    let quantize = |v: f64| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| quantize(img.data()[c * h * w + p])))
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs from `root/degraded/*.png` and `root/clean/*.png`, matched by file
/// name. An optional `root/manifest.txt` (one path per line) restricts the set.
pub fn load_dir(root: &Path) -> Result<Vec<(String, DegradedPair)>> {
    let degraded_dir = root.join("degraded");
    let clean_dir = root.join("clean");
    let manifest = root.join("manifest.txt");
    let names = if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                PathBuf::from(l)
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| {
                        Error::Config(format!("{}: bad entry {l:?}", manifest.display()))
                    })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        png_names(&degraded_dir)?
    };
    if names.is_empty() {
        return Err(Error::Config(format!(
            "{}: no image pairs found",
            root.display()
        )));
    }
    names
        .into_iter()
        .map(|name| {
            let degraded = load_image(&degraded_dir.join(&name))?;
            let clean = load_image(&clean_dir.join(&name))?;
            Ok((
                name,
                DegradedPair {
                    degraded,
                    clean,
                    tag: DegradationTag::Recorded,
                    seed: 0,
                    clamped: false,
                },
            ))
        })
        .collect()
}

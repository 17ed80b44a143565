//! On-disk layout: `images/<id>.jpg` (or `.png`), per-category label planes
//! `labels/<id>/<id>_lbl00.png` .. `_lbl10.png`, and one id per line in
//! `exemplars.txt`, `tuning.txt`, `testing.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{LabelMap, Sample, Split};
use crate::labels::NUM_CATEGORIES;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Train / tuning / test sizes of the published split.
pub const STANDARD_SPLIT: [usize; 3] = [2000, 230, 100];

fn image_path(root: &Path, id: &str) -> Option<PathBuf> {
    ["jpg", "png"]
        .iter()
        .map(|ext| root.join("images").join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn label_path(root: &Path, id: &str, cat: usize) -> PathBuf {
    root.join("labels").join(id).join(format!("{id}_lbl{cat:02}.png"))
}

/// Ids listed in a split file, blank lines skipped.
pub fn split_ids(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = root.join(split.file_name());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Checks the three split files against [`STANDARD_SPLIT`].
pub fn validate_standard_split(root: &Path) -> Result<()> {
    for (split, want) in Split::ALL.iter().zip(STANDARD_SPLIT) {
        let got = split_ids(root, *split)?.len();
        if got != want {
            return Err(Error::Data {
                id: split.file_name().to_string(),
                detail: format!("expected {want} ids, found {got}"),
            });
        }
    }
    Ok(())
}

pub fn load_helen(root: &Path, split: Split) -> Result<Vec<Sample>> {
    split_ids(root, split)?
        .iter()
        .map(|id| {
            let mut s = load_sample(root, id)?;
            s.split = Some(split);
            Ok(s)
        })
        .collect()
}

/// Reads one sample. Label planes are binarized at 128; a pixel claimed by
/// several planes goes to the brightest one (lowest category on ties), and a
/// pixel claimed by none is background.
pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let path = image_path(root, id).ok_or_else(|| Error::Data {
        id: id.to_string(),
        detail: "image file not found".into(),
    })?;
    let rgb = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    let image = Tensor::from_vec(vec![3, h, w], data)?;

    let mut best = vec![(0u8, 0u8); plane];
    for cat in 0..NUM_CATEGORIES {
        let lp = label_path(root, id, cat);
        if !lp.is_file() {
            return Err(Error::Data {
                id: id.to_string(),
                detail: format!("missing label file {}", lp.display()),
            });
        }
        let gray = image::open(&lp).map_err(|source| Error::Image { path: lp.clone(), source })?.to_luma8();
        if gray.width() as usize != w || gray.height() as usize != h {
            return Err(Error::Data {
                id: id.to_string(),
                detail: format!("label plane {cat} is {}x{}, image is {w}x{h}", gray.width(), gray.height()),
            });
        }
        for (b, px) in best.iter_mut().zip(gray.pixels()) {
            let v = px[0];
            if v >= 128 && v > b.1 {
                *b = (cat as u8, v);
            }
        }
    }
    let labels = LabelMap::new(h, w, best.into_iter().map(|(c, _)| c).collect())?;
    Sample::new(id, image, labels)
}

/// Writes a sample in the dataset layout (image as PNG, planes as 0/255).
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let images = root.join("images");
    let labels = root.join("labels").join(&sample.id);
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let plane = h * w;
    let px = sample.image.data();
    let rgb: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (px[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    let path = images.join(format!("{}.png", sample.id));
    rgb.save(&path).map_err(|source| Error::Image { path, source })?;
    for cat in 0..NUM_CATEGORIES {
        let gray: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([if sample.labels.get(x as usize, y as usize) as usize == cat { 255 } else { 0 }])
        });
        let path = label_path(root, &sample.id, cat);
        gray.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

pub fn write_split(root: &Path, split: Split, ids: &[String]) -> Result<()> {
    let path = root.join(split.file_name());
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

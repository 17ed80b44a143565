//! Dataset ingestion, preprocessing, augmentation and synthetic faces.

mod augment;
mod helen;
mod preprocess;
mod synth;

pub use augment::{augment, AugOp, Augmented, NOISE_SIGMA};
pub use helen::{
    load_helen, load_sample, split_ids, validate_standard_split, write_sample, write_split, STANDARD_SPLIT,
};
pub use preprocess::{preprocess, resize_bilinear, resize_nearest, Preprocessed, COARSE_SIZE};
pub use synth::{synth_face, write_truth, read_truth, SynthFace, SynthSpec, SynthTruth, Ellipse, TRUTH_FILE};

use crate::labels::{category_to_class, NUM_CATEGORIES};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-pixel label indices; one index per pixel makes the per-category
/// masks one-hot by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("label map", format!("{height}x{width} with {} values", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Binary mask of the pixels whose label is in `labels`.
    pub fn mask_of(&self, labels: &[u8]) -> Vec<bool> {
        self.data.iter().map(|l| labels.contains(l)).collect()
    }

    /// `[channels, H, W]` one-hot encoding.
    pub fn one_hot(&self, channels: usize) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; channels * plane];
        for (i, &l) in self.data.iter().enumerate() {
            if (l as usize) < channels {
                out[l as usize * plane + i] = 1.0;
            }
        }
        Tensor::from_vec(vec![channels, self.height, self.width], out).expect("non-empty map")
    }

    pub fn map_labels(&self, f: impl Fn(u8) -> u8) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| f(l)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Tuning,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Tuning, Split::Test];

    /// Name of the id list inside a dataset root.
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "exemplars.txt",
            Split::Tuning => "tuning.txt",
            Split::Test => "testing.txt",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" | "exemplars" => Some(Split::Train),
            "tuning" | "val" => Some(Split::Tuning),
            "test" | "testing" => Some(Split::Test),
            _ => None,
        }
    }
}

/// An RGB image in `[0, 1]` with its annotated category map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    /// Category indices `0..11`.
    pub labels: LabelMap,
    pub split: Option<Split>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let id = id.into();
        match image.shape() {
            [3, h, w] if *h == labels.height() && *w == labels.width() => {}
            s => {
                return Err(Error::Data {
                    id,
                    detail: format!("image {s:?} vs labels {}x{}", labels.height(), labels.width()),
                })
            }
        }
        if labels.data().iter().any(|&l| l as usize >= NUM_CATEGORIES) {
            return Err(Error::Data {
                id,
                detail: "label index out of range".into(),
            });
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data {
                id,
                detail: "image values outside [0, 1]".into(),
            });
        }
        Ok(Sample {
            id,
            image,
            labels,
            split: None,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// The 11 per-category binary masks.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        (0..NUM_CATEGORIES as u8).map(|c| self.labels.mask_of(&[c])).collect()
    }

    /// Labels folded into the 9 working classes.
    pub fn class_labels(&self) -> LabelMap {
        self.labels.map_labels(category_to_class)
    }
}

/// Stable 64-bit mix of a seed with string and integer salts (FNV-1a then
/// splitmix finalization), used to derive per-sample, per-epoch streams.
pub fn derive_seed(seed: u64, id: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes().chain(salt.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_one_hot() {
        let labels = LabelMap::new(2, 2, vec![0, 4, 10, 4]).unwrap();
        let s = Sample::new("a", Tensor::full(vec![3, 2, 2], 0.5), labels).unwrap();
        let masks = s.masks();
        for p in 0..4 {
            assert_eq!(masks.iter().filter(|m| m[p]).count(), 1);
        }
        assert_eq!(s.class_labels().data(), &[0, 3, 0, 3]);
    }

    #[test]
    fn rejects_bad_samples() {
        let labels = LabelMap::new(2, 2, vec![0, 11, 0, 0]).unwrap();
        assert!(Sample::new("a", Tensor::full(vec![3, 2, 2], 0.5), labels).is_err());
        let labels = LabelMap::filled(2, 2, 0);
        assert!(Sample::new("a", Tensor::full(vec![3, 2, 2], 1.5), labels.clone()).is_err());
        assert!(Sample::new("a", Tensor::full(vec![3, 2, 3], 0.5), labels).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_eq!(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
    }
}

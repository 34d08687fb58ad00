//! Dataset index, train/test splitting, and image loading.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
    pub split: Split,
}

/// Index of one dataset on disk; serialized as `index.json` in its root.
/// The stored root is relative to the index file itself so generated
/// datasets are byte-identical wherever they land.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: String,
    pub seed: u64,
    pub entries: Vec<DatasetEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetIndex {
    pub fn new(root: &Path, seed: u64, entries: Vec<DatasetEntry>) -> DatasetIndex {
        DatasetIndex {
            root: ".".to_string(),
            seed,
            entries,
            base_dir: root.to_path_buf(),
        }
    }

    pub fn index_path(&self) -> PathBuf {
        self.base_dir.join("index.json")
    }

    pub fn image_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.base_dir.join(&entry.image)
    }

    pub fn mask_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.base_dir.join(&entry.mask)
    }

    pub fn save(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(self.index_path(), json)?;
        Ok(())
    }

    /// Load and validate: every referenced file must exist and decode.
    pub fn load(path: &Path) -> Result<DatasetIndex> {
        let text = std::fs::read_to_string(path)?;
        let mut index: DatasetIndex = serde_json::from_str(&text)?;
        index.base_dir = path
            .parent()
            .ok_or_else(|| invalid(format!("index path {} has no parent", path.display())))?
            .join(&index.root);
        if index.entries.is_empty() {
            return Err(invalid("dataset index has no entries"));
        }
        for entry in &index.entries {
            for p in [index.image_path(entry), index.mask_path(entry)] {
                image::open(&p)
                    .map_err(|e| invalid(format!("{} does not decode: {e}", p.display())))?;
            }
        }
        Ok(index)
    }

    pub fn entries_of(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Deterministic shuffled split: `round(ratio * n)` entries become train,
/// the rest test. Disjoint and exhaustive by construction.
pub fn split_dataset(index: &mut DatasetIndex, ratio: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("split ratio {ratio} must lie in [0, 1]")));
    }
    let n = index.entries.len();
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        index.entries[idx].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Ok(())
}

/// Load an RGB PNG as a `[1, 3, H, W]` tensor with values centred in
/// [-0.5, 0.5].
pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px.0[c] as f64 / 255.0 - 0.5;
        }
    }
    Ok(Tensor::new(&[1, 3, h, w], data)?)
}

/// Load a mask PNG as binary values (pixel > 127 is foreground).
pub fn load_mask_values(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img
        .pixels()
        .map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 })
        .collect();
    Ok((values, h, w))
}

/// Area-average 2x2 downsampling followed by a 0.5 threshold (ties to
/// foreground); used to bring masks to the decoded resolution.
pub fn downsample_mask_half(values: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!("mask {h}x{w} is not divisible by 2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut sum = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    sum += values[(2 * y + dy) * w + 2 * x + dx];
                }
            }
            out[y * ow + x] = if sum / 4.0 >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(Tensor::new(&[1, 1, oh, ow], out)?)
}

//! In-memory paired datasets with seeded, resumable batch order.

use std::path::{Path, PathBuf};

use rainforge_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::augment::Transform;
use super::image_io::{list_images, load_image};
use super::rain::{synth_rain_with, RainParams};
use super::scenes::procedural_scene;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub clean: Tensor<f32>,
    pub rainy: Tensor<f32>,
}

/// A stacked minibatch, both tensors `[N, 3, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: Tensor<f32>,
    pub rainy: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<Pair>,
    pub crop: usize,
    pub augment: bool,
    pub seed: u64,
}

/// Where training pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural scenes with synthetic rain.
    Synthetic { train: usize, val: usize, size: usize },
    /// Matching file names in `clean` and `rainy`.
    Paired { clean: PathBuf, rainy: PathBuf },
    /// Clean images only; rain is synthesized.
    CleanOnly { clean: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub crop: usize,
    pub batch_size: usize,
    pub augment: bool,
    /// Pairs held out for validation (the last ones in name order for
    /// directory sources).
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic { train: 256, val: 8, size: 48 },
            crop: 24,
            batch_size: 4,
            augment: true,
            val_count: 8,
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Synthesizes rain for one image with a stream derived from `(seed, index)`.
pub fn rain_for(clean: &Tensor<f32>, rain: &RainParams, index: u64) -> Result<Tensor<f32>> {
    Ok(synth_rain_with(clean, rain, &mut Rng::derive(rain.seed, &[index]))?.0)
}

/// `count` procedural pairs; item `i` uses scene stream `(seed, i)`.
pub fn synthetic_pairs(count: usize, size: usize, first: u64, scene_seed: u64, rain: &RainParams) -> Result<Vec<Pair>> {
    (0..count as u64)
        .map(|i| {
            let idx = first + i;
            let clean = procedural_scene(size, size, &mut Rng::derive(scene_seed, &[idx]));
            let rainy = rain_for(&clean, rain, idx)?;
            Ok(Pair { name: format!("scene_{idx:05}.png"), clean, rainy })
        })
        .collect()
}

pub fn load_paired_dirs(clean_dir: &Path, rainy_dir: &Path) -> Result<Vec<Pair>> {
    list_images(clean_dir)?
        .into_iter()
        .map(|path| {
            let name = stem(&path);
            let other = rainy_dir.join(&name);
            if !other.exists() {
                return Err(Error::Dataset(format!("{} has no rainy counterpart in {}", name, rainy_dir.display())));
            }
            Ok(Pair { clean: load_image(&path)?, rainy: load_image(&other)?, name })
        })
        .collect()
}

pub fn load_clean_dir(clean_dir: &Path, rain: &RainParams) -> Result<Vec<Pair>> {
    list_images(clean_dir)?
        .into_iter()
        .enumerate()
        .map(|(i, path)| {
            let clean = load_image(&path)?;
            let rainy = rain_for(&clean, rain, i as u64)?;
            Ok(Pair { name: stem(&path), clean, rainy })
        })
        .collect()
}

/// Builds the `(train, validation)` split described by `cfg`.
pub fn build_split(cfg: &DataConfig, rain: &RainParams, seed: u64) -> Result<(PairedDataset, Vec<Pair>)> {
    rain.validate()?;
    let (train, val) = match &cfg.source {
        DataSource::Synthetic { train, val, size } => {
            let t = synthetic_pairs(*train, *size, 0, seed, rain)?;
            let v = synthetic_pairs(*val, *size, *train as u64, seed, rain)?;
            (t, v)
        }
        DataSource::Paired { clean, rainy } => split_tail(load_paired_dirs(clean, rainy)?, cfg.val_count)?,
        DataSource::CleanOnly { clean } => split_tail(load_clean_dir(clean, rain)?, cfg.val_count)?,
    };
    Ok((PairedDataset::new(train, cfg.crop, cfg.augment, seed)?, val))
}

fn split_tail(mut pairs: Vec<Pair>, val: usize) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if val >= pairs.len() {
        return Err(Error::Dataset(format!("{} pairs cannot spare {val} for validation", pairs.len())));
    }
    let v = pairs.split_off(pairs.len() - val);
    Ok((pairs, v))
}

impl PairedDataset {
    pub fn new(pairs: Vec<Pair>, crop: usize, augment: bool, seed: u64) -> Result<Self> {
        for p in &pairs {
            if p.clean.shape() != p.rainy.shape() || p.clean.rank() != 3 {
                return Err(Error::Dataset(format!(
                    "{}: clean {:?} and rainy {:?} differ",
                    p.name,
                    p.clean.shape(),
                    p.rainy.shape()
                )));
            }
            let (h, w) = (p.clean.shape()[1], p.clean.shape()[2]);
            if crop == 0 || crop > h || crop > w {
                return Err(Error::Dataset(format!("{}: crop {crop} does not fit {h}x{w}", p.name)));
            }
        }
        Ok(PairedDataset { pairs, crop, augment, seed })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Item order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::derive(self.seed, &[epoch]).shuffle(&mut idx);
        idx
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        if batch_size == 0 {
            0
        } else {
            self.len() / batch_size
        }
    }

    /// Batch `index` of `epoch`; the final partial batch is never produced.
    pub fn batch(&self, epoch: u64, index: usize, batch_size: usize) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch(batch_size);
        if self.is_empty() || per_epoch == 0 {
            return Err(Error::Dataset(format!("{} items cannot fill a batch of {batch_size}", self.len())));
        }
        if index >= per_epoch {
            return Err(Error::Dataset(format!("batch {index} out of range ({per_epoch} per epoch)")));
        }
        let order = self.order(epoch);
        let s = self.crop;
        let mut clean = Vec::with_capacity(batch_size * 3 * s * s);
        let mut rainy = Vec::with_capacity(batch_size * 3 * s * s);
        for pos in index * batch_size..(index + 1) * batch_size {
            let pair = &self.pairs[order[pos]];
            let (h, w) = (pair.clean.shape()[1], pair.clean.shape()[2]);
            let t = if self.augment {
                Transform::draw(h, w, s, &mut Rng::derive(self.seed, &[epoch, pos as u64, 1]))?
            } else {
                Transform::center(h, w, s)?
            };
            clean.extend_from_slice(t.apply(&pair.clean)?.data());
            rainy.extend_from_slice(t.apply(&pair.rainy)?.data());
        }
        Ok(Batch {
            clean: Tensor::new([batch_size, 3, s, s], clean)?,
            rainy: Tensor::new([batch_size, 3, s, s], rainy)?,
        })
    }

    /// Batch `step` counting across epochs from the start of training.
    pub fn batch_at(&self, step: u64, batch_size: usize) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch(batch_size).max(1) as u64;
        self.batch(step / per_epoch, (step % per_epoch) as usize, batch_size)
    }

    pub fn batch_iter(&self, batch_size: usize, epoch: u64) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        if self.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        Ok((0..self.batches_per_epoch(batch_size)).map(move |i| self.batch(epoch, i, batch_size)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> PairedDataset {
        let pairs = synthetic_pairs(n, 12, 0, 4, &RainParams::default()).unwrap();
        PairedDataset::new(pairs, 8, true, 11).unwrap()
    }

    #[test]
    fn drop_last_and_determinism() {
        let ds = dataset(10);
        assert_eq!(ds.batch_iter(6, 0).unwrap().count(), 1);
        let a: Vec<Batch> = ds.batch_iter(3, 2).unwrap().map(|b| b.unwrap()).collect();
        let b: Vec<Batch> = ds.batch_iter(3, 2).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(a[0].clean.shape(), &[3, 3, 8, 8]);
    }

    #[test]
    fn epochs_reshuffle() {
        let ds = dataset(10);
        assert_ne!(ds.order(0), ds.order(1));
        let mut sorted = ds.order(3);
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_undersized() {
        let ds = PairedDataset::new(Vec::new(), 8, true, 0).unwrap();
        assert!(ds.batch_iter(2, 0).is_err());
        assert!(dataset(3).batch(0, 0, 4).is_err());
    }

    #[test]
    fn values_stay_in_unit_range() {
        let ds = dataset(4);
        let b = ds.batch_at(5, 2).unwrap();
        for t in [&b.clean, &b.rainy] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

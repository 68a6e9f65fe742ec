//! Training objectives: negated PSNR and the frequency-domain contrastive
//! regularizer computed in a frozen feature space.

use std::path::Path;

use rainforge_tensor::{io, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::dwt2_haar;
use crate::metrics::{MSE_FLOOR, PSNR_CLAMP_DB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Per-stage weights; uniform `1 / n` when absent.
    pub omega: Option<Vec<f64>>,
    /// Guard added to the negative-pair distance.
    pub eps_cr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, omega: None, eps_cr: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.eps_cr > 0.0) {
            return Err(Error::Config(format!("eps_cr must be positive, got {}", self.eps_cr)));
        }
        if let Some(w) = &self.omega {
            if w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config("omega entries must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self, stages: usize) -> Result<Vec<f64>> {
        match &self.omega {
            Some(w) if w.len() != stages => Err(Error::Config(format!(
                "omega has {} entries but the feature extractor has {stages} stages",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(vec![1.0 / stages as f64; stages]),
        }
    }
}

/// Mean absolute difference.
pub fn l1_distance<'t, T: Real>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.abs().mean())
}

/// Differentiable PSNR in dB for images on a `[0, 1]` scale.
pub fn psnr_var<'t, T: Real>(restored: &Var<'t, T>, clean: &Var<'t, T>) -> Result<Var<'t, T>> {
    if restored.shape() != clean.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", restored.shape(), clean.shape())));
    }
    let mse = restored.sub(clean)?.square().mean();
    if mse.value().item()?.as_f64() < MSE_FLOOR {
        return Ok(restored.constant(Tensor::scalar(T::of(PSNR_CLAMP_DB))));
    }
    Ok(mse.ln().scale(-10.0 / std::f64::consts::LN_10))
}

/// Frozen stack of stride-2 3x3 convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

impl<T: Real> FeatureExtractor<T> {
    /// Default extractor over four stacked RGB subbands.
    pub fn new(seed: u64) -> Self {
        Self::with_widths(12, &DEFAULT_WIDTHS, seed)
    }

    pub fn with_widths(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut c = in_channels;
        let stages = widths
            .iter()
            .map(|&out| {
                let w = Tensor::randn([out, c, 3, 3], (2.0 / (9 * c) as f64).sqrt(), &mut rng);
                c = out;
                (w, Tensor::zeros([out]))
            })
            .collect();
        FeatureExtractor { stages }
    }

    /// Builds from a tensor table with entries `stage{i}.weight` and
    /// `stage{i}.bias`, `i` counting from zero.
    pub fn from_table(entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let mut stages = Vec::new();
        while let Some(w) = find(&format!("stage{}.weight", stages.len())) {
            let i = stages.len();
            let b = find(&format!("stage{i}.bias")).unwrap_or_else(|| Tensor::zeros([w.shape()[0]]));
            if w.rank() != 4 || w.shape()[2..] != [3, 3] || b.shape() != [w.shape()[0]] {
                return Err(Error::Config(format!("feature stage {i} has weight {:?} and bias {:?}", w.shape(), b.shape())));
            }
            if let Some((prev, _)) = stages.last() {
                let prev: &Tensor<T> = prev;
                if prev.shape()[0] != w.shape()[1] {
                    return Err(Error::Config(format!("feature stage {i} expects {} inputs", w.shape()[1])));
                }
            }
            stages.push((w, b));
        }
        if stages.is_empty() {
            return Err(Error::Config("feature table contains no stage0.weight".into()));
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&io::load_table(path)?)
    }

    pub fn to_table(&self) -> Vec<(String, Tensor<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("stage{i}.weight"), w.clone()), (format!("stage{i}.bias"), b.clone())])
            .collect()
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].0.shape()[1]
    }

    pub fn features<'t>(&self, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels() {
            return Err(Error::shape(
                "feature_extractor",
                format!("input {:?} does not have {} channels", x.shape(), self.in_channels()),
            ));
        }
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            h = h.conv2d(&x.constant(w.clone()), Some(&x.constant(b.clone())), 2, 1)?.relu();
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Features of an image's stacked Haar subbands.
    pub fn subband_features<'t>(&self, img: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.features(&dwt2_haar(img)?)
    }

    /// Subband features computed off-tape, as plain tensors.
    pub fn detached_features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::inference();
        Ok(self
            .subband_features(&tape.constant(img.clone()))?
            .into_iter()
            .map(Var::into_value)
            .collect())
    }
}

/// `sum_i w_i * L1(G_i(clean), G_i(restored)) / (L1(G_i(rainy), G_i(restored)) + eps)`,
/// differentiable with respect to `restored` only.
pub fn contrastive_reg<'t, T: Real>(
    restored: &Var<'t, T>,
    clean: &Tensor<T>,
    rainy: &Tensor<T>,
    fx: &FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    if restored.shape() != clean.shape() || restored.shape() != rainy.shape() {
        return Err(Error::shape(
            "contrastive_reg",
            format!("restored {:?}, clean {:?}, rainy {:?}", restored.shape(), clean.shape(), rainy.shape()),
        ));
    }
    let weights = cfg.weights(fx.stages())?;
    let anchor = fx.subband_features(restored)?;
    let positive = fx.detached_features(clean)?;
    let negative = fx.detached_features(rainy)?;
    let mut total: Option<Var<'t, T>> = None;
    for (((a, p), n), w) in anchor.iter().zip(positive).zip(negative).zip(weights) {
        let num = l1_distance(&restored.constant(p), a)?;
        let den = l1_distance(&restored.constant(n), a)?.add_scalar(cfg.eps_cr);
        let term = num.div(&den)?.scale(w);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one stage"))
}

/// Loss value together with its logged components.
pub struct LossTerms<'t, T: Real> {
    pub total: Var<'t, T>,
    pub psnr: f64,
    /// `None` when the contrastive weight is zero and the term was skipped.
    pub contrastive: Option<f64>,
}

/// `-psnr(restored, clean) + lambda * contrastive_reg(...)`.
pub fn total_loss<'t, T: Real>(
    restored: &Var<'t, T>,
    clean: &Tensor<T>,
    rainy: &Tensor<T>,
    fx: &FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<LossTerms<'t, T>> {
    let psnr = psnr_var(restored, &restored.constant(clean.clone()))?;
    let psnr_db = psnr.value().item()?.as_f64();
    let mut total = psnr.neg();
    let mut contrastive = None;
    if cfg.lambda > 0.0 {
        let cr = contrastive_reg(restored, clean, rainy, fx, cfg)?;
        contrastive = Some(cr.value().item()?.as_f64());
        total = total.add(&cr.scale(cfg.lambda))?;
    }
    Ok(LossTerms { total, psnr: psnr_db, contrastive })
}

//! Teacher pseudo-labels, class-mix composition, patch masking and
//! rare-class sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::head::{semantic_aggregate, MaskPrediction, LOGIT_EPS};
use crate::image::{IdMap, Image, LabelMap, IGNORE};
use crate::numeric::Mat;
use crate::synthdata::oracle::split_components;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Argmax class per query, `K` meaning ∅.
    pub classes: Vec<usize>,
    /// Teacher mask probabilities on the image grid (`N_q × HW`).
    pub masks: Mat,
    /// ε-normalized aggregated class scores (`K × HW`).
    pub semantic: Mat,
    /// Per-pixel argmax of `semantic`.
    pub label: Vec<u8>,
    /// Fraction of pixels whose top normalized score reaches `τ`.
    pub confidence: f64,
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

pub fn pseudo_from_prediction(pred: &MaskPrediction, tau: f64) -> PseudoLabel {
    let probs = pred.class_probs();
    let masks = pred.mask_probs();
    let classes = (0..probs.rows())
        .map(|q| argmax(probs.row(q).iter().copied()))
        .collect();
    let mut semantic = semantic_aggregate(&probs, &masks);
    let (k, hw) = semantic.shape();
    let mut label = vec![0u8; hw];
    let mut confident = 0usize;
    for x in 0..hw {
        let z: f64 = (0..k).map(|c| semantic.get(c, x) + LOGIT_EPS).sum();
        for c in 0..k {
            semantic.set(c, x, (semantic.get(c, x) + LOGIT_EPS) / z);
        }
        let best = argmax((0..k).map(|c| semantic.get(c, x)));
        label[x] = best as u8;
        if semantic.get(best, x) >= tau {
            confident += 1;
        }
    }
    PseudoLabel {
        classes,
        masks,
        semantic,
        label,
        confidence: confident as f64 / hw as f64,
    }
}

/// A class-mixed training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub image: Image,
    pub label: Vec<u8>,
    pub weight: Vec<f64>,
    /// 1 where the pixel comes from the source image.
    pub mask: Vec<u8>,
}

/// Pastes the source pixels of `selected` classes onto the target image.
pub fn class_mix_with(
    x_s: &Image,
    y_s: &LabelMap,
    x_t: &Image,
    pseudo: &PseudoLabel,
    selected: &[u8],
) -> Result<Mix> {
    let hw = y_s.len();
    if x_s.height != x_t.height
        || x_s.width != x_t.width
        || x_s.height * x_s.width != hw
        || pseudo.label.len() != hw
    {
        return Err(Error::Shape("class mix inputs differ in size".into()));
    }
    let mask: Vec<u8> = y_s
        .data
        .iter()
        .map(|l| (*l != IGNORE && selected.contains(l)) as u8)
        .collect();
    let mut image = x_t.clone();
    let mut label = pseudo.label.clone();
    let mut weight = vec![pseudo.confidence; hw];
    for p in 0..hw {
        if mask[p] == 1 {
            image.data[p * 3..p * 3 + 3].copy_from_slice(&x_s.data[p * 3..p * 3 + 3]);
            label[p] = y_s.data[p];
            weight[p] = 1.0;
        }
    }
    Ok(Mix {
        image,
        label,
        weight,
        mask,
    })
}

/// Selects half of the source classes (rounded up) uniformly and mixes.
pub fn class_mix<R: Rng>(
    x_s: &Image,
    y_s: &LabelMap,
    x_t: &Image,
    pseudo: &PseudoLabel,
    rng: &mut R,
) -> Result<Mix> {
    let mut present: Vec<u8> = y_s.data.iter().copied().filter(|&l| l != IGNORE).collect();
    present.sort_unstable();
    present.dedup();
    let n = present.len().div_ceil(2);
    let selected: Vec<u8> = sample(rng, present.len(), n)
        .iter()
        .map(|i| present[i])
        .collect();
    class_mix_with(x_s, y_s, x_t, pseudo, &selected)
}

/// Region map of a mixed image: source regions where `mask` is 1, target
/// regions elsewhere, split into connected pieces.
pub fn mix_regions(source: &IdMap<u16>, target: &IdMap<u16>, mask: &[u8]) -> Result<IdMap<u16>> {
    if source.len() != target.len() || source.len() != mask.len() {
        return Err(Error::Shape(
            "region maps and mix mask differ in size".into(),
        ));
    }
    let offset = source.data.iter().copied().max().unwrap_or(0) as u32 + 1;
    let combined: Vec<u32> = (0..mask.len())
        .map(|p| {
            if mask[p] == 1 {
                source.data[p] as u32
            } else {
                offset + target.data[p] as u32
            }
        })
        .collect();
    if combined.iter().any(|&v| v >= u16::MAX as u32) {
        return Err(Error::InvalidInput("too many regions to combine".into()));
    }
    let ids = IdMap {
        height: source.height,
        width: source.width,
        data: combined.iter().map(|&v| v as u16).collect(),
    };
    Ok(split_components(&ids, None).0)
}

/// `⌊ratio·P⌋` of the `P` cells of side `cell` set to 0, the rest 1.
pub fn random_patch_mask<R: Rng>(
    height: usize,
    width: usize,
    ratio: f64,
    cell: usize,
    rng: &mut R,
) -> Result<Vec<u8>> {
    if cell == 0 || height % cell != 0 || width % cell != 0 {
        return Err(Error::InvalidInput(format!(
            "cell {cell} does not tile {height}x{width}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    let (gh, gw) = (height / cell, width / cell);
    let cells = gh * gw;
    let n = (ratio * cells as f64).floor() as usize;
    let mut keep = vec![1u8; height * width];
    for c in sample(rng, cells, n).iter() {
        let (cy, cx) = (c / gw, c % gw);
        for y in cy * cell..(cy + 1) * cell {
            keep[y * width + cx * cell..y * width + (cx + 1) * cell].fill(0);
        }
    }
    Ok(keep)
}

/// `P(c) ∝ exp((1 − f_c)/T)`.
pub fn rcs_probabilities(freqs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if freqs.is_empty() || freqs.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidInput(
            "class frequencies must be finite and non-negative".into(),
        ));
    }
    let logits: Vec<f64> = freqs.iter().map(|f| (1.0 - f) / temperature).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|v| v / z).collect())
}

/// Rare-class sampling over a labeled image pool.
#[derive(Debug, Clone)]
pub struct RareClassSampler {
    classes: Option<WeightedIndex<f64>>,
    images_by_class: Vec<Vec<usize>>,
    n_images: usize,
}

impl RareClassSampler {
    /// `images_by_class[c]` lists the pool indices whose label contains `c`.
    pub fn new(
        freqs: &[f64],
        temperature: f64,
        images_by_class: Vec<Vec<usize>>,
        n_images: usize,
    ) -> Result<Self> {
        let mut p = rcs_probabilities(freqs, temperature)?;
        if images_by_class.len() != p.len() {
            return Err(Error::InvalidInput(
                "one image list per class required".into(),
            ));
        }
        for (pc, imgs) in p.iter_mut().zip(&images_by_class) {
            if imgs.is_empty() {
                *pc = 0.0;
            }
        }
        let classes = WeightedIndex::new(&p).ok();
        Ok(RareClassSampler {
            classes,
            images_by_class,
            n_images,
        })
    }

    /// Builds the sampler from label maps, measuring class frequencies.
    pub fn from_labels(labels: &[&LabelMap], classes: usize, temperature: f64) -> Result<Self> {
        let mut counts = vec![0u64; classes];
        let mut by_class = vec![Vec::new(); classes];
        for (i, l) in labels.iter().enumerate() {
            let mut seen = vec![false; classes];
            for &v in &l.data {
                if (v as usize) < classes {
                    counts[v as usize] += 1;
                    seen[v as usize] = true;
                }
            }
            for c in 0..classes {
                if seen[c] {
                    by_class[c].push(i);
                }
            }
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        Self::new(&freqs, temperature, by_class, labels.len())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match &self.classes {
            Some(dist) => {
                let imgs = &self.images_by_class[dist.sample(rng)];
                imgs[rng.random_range(0..imgs.len())]
            }
            None => rng.random_range(0..self.n_images),
        }
    }
}

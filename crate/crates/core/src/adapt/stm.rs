//! Semantic transfer module: classifies externally supplied region masks
//! from pooled backbone features. Region boundaries are taken as given.

use crate::error::{Error, Result};
use crate::head::{MaskPrediction, INIT_STD};
use crate::numeric::{rng, Binding, Mat, ParamStore, Tape, Var};

pub const PREFIX: &str = "stm.";
/// Logit magnitude standing in for a binary region mask.
pub const MASK_LOGIT: f64 = 12.0;

fn name(leaf: &str) -> String {
    format!("{PREFIX}{leaf}")
}

/// `c → c → c → K+1` with GELU after the two hidden layers. Output biases
/// start at zero, hidden weights at `N(0, INIT_STD²)`.
pub fn init_stm(dim: usize, classes: usize, seed: u64) -> ParamStore {
    let mut g = rng(seed);
    let mut s = ParamStore::new();
    for (leaf, cols) in [("fc1", dim), ("fc2", dim), ("cls", classes + 1)] {
        s.insert_normal(
            &name(&format!("{leaf}.w")),
            &[dim, cols],
            INIT_STD,
            true,
            &mut g,
        );
        s.insert_const(&name(&format!("{leaf}.b")), &[cols], 0.0, true);
    }
    s
}

/// Region masks reduced to the patch grid, with the regions that vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRegions {
    /// One row per surviving region: mean feature over its patches.
    pub features: Mat,
    /// Surviving masks at image resolution, unchanged.
    pub masks: Vec<Vec<u8>>,
    pub dropped: usize,
}

/// Average-pools `f_out` (`g_h·g_w × c`) over each mask. A patch belongs to
/// a mask when at least half of its pixels do; masks covering no patch are
/// dropped.
pub fn pool_regions(
    f_out: &Mat,
    grid: (usize, usize),
    image: (usize, usize),
    masks: &[Vec<u8>],
) -> Result<PooledRegions> {
    let (gh, gw) = grid;
    let (h, w) = image;
    if f_out.rows() != gh * gw || h % gh != 0 || w % gw != 0 {
        return Err(Error::Shape(format!(
            "{} feature rows for a {gh}x{gw} grid over {h}x{w}",
            f_out.rows()
        )));
    }
    let (ph, pw) = (h / gh, w / gw);
    let c = f_out.cols();
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = 0;
    for m in masks {
        if m.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} pixels, expected {}",
                m.len(),
                h * w
            )));
        }
        let mut acc = vec![0.0; c];
        let mut n = 0usize;
        for gy in 0..gh {
            for gx in 0..gw {
                let mut area = 0;
                for y in gy * ph..(gy + 1) * ph {
                    area += m[y * w + gx * pw..y * w + (gx + 1) * pw]
                        .iter()
                        .filter(|&&v| v != 0)
                        .count();
                }
                if 2 * area >= ph * pw {
                    for (a, f) in acc.iter_mut().zip(f_out.row(gy * gw + gx)) {
                        *a += f;
                    }
                    n += 1;
                }
            }
        }
        if n == 0 {
            dropped += 1;
            continue;
        }
        rows.extend(acc.iter().map(|a| a / n as f64));
        kept.push(m.clone());
    }
    Ok(PooledRegions {
        features: Mat::from_vec(kept.len(), c, rows),
        masks: kept,
        dropped,
    })
}

pub struct Stm {
    pub dim: usize,
    pub classes: usize,
}

impl Stm {
    /// Class logits (`n × K+1`) for pooled region features.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, pooled: Var) -> Result<Var> {
        let cols = tape.value(pooled).cols();
        if cols != self.dim {
            return Err(Error::Shape(format!(
                "STM expects {} channels, got {cols}",
                self.dim
            )));
        }
        let lin = |tape: &mut Tape, x: Var, leaf: &str| {
            tape.linear(
                x,
                b.var(&name(&format!("{leaf}.w"))),
                b.var(&name(&format!("{leaf}.b"))),
            )
        };
        let h = lin(tape, pooled, "fc1");
        let h = tape.gelu(h);
        let h = lin(tape, h, "fc2");
        let h = tape.gelu(h);
        Ok(lin(tape, h, "cls"))
    }

    /// Value-level prediction: class logits and the masks as saturated
    /// logits on the image grid.
    pub fn predict(
        &self,
        params: &ParamStore,
        regions: &PooledRegions,
        image: (usize, usize),
    ) -> Result<MaskPrediction> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let x = tape.constant(regions.features.clone());
        let logits = self.forward(&mut tape, &b, x)?;
        let cls = tape.value(logits).clone();
        region_prediction(cls, &regions.masks, image)
    }

    /// Loss and `stm.*` gradients for a loss on the region prediction.
    pub fn grad(
        &self,
        params: &ParamStore,
        regions: &PooledRegions,
        image: (usize, usize),
        loss: impl FnOnce(&MaskPrediction) -> Result<crate::head::LossOutput>,
    ) -> Result<(f64, crate::numeric::Grads, MaskPrediction)> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(regions.features.clone());
        let logits = self.forward(&mut tape, &b, x)?;
        let pred = region_prediction(tape.value(logits).clone(), &regions.masks, image)?;
        let out = loss(&pred)?;
        let mut g = tape.backward(&[(logits, out.d_class)]);
        let mut grads = crate::numeric::Grads::new();
        b.accumulate(&mut g, &mut grads, params);
        Ok((out.value, grads, pred))
    }
}

pub fn region_prediction(
    class_logits: Mat,
    masks: &[Vec<u8>],
    image: (usize, usize),
) -> Result<MaskPrediction> {
    let px = image.0 * image.1;
    let m = Mat::from_fn(masks.len(), px, |i, x| {
        if masks[i][x] != 0 {
            MASK_LOGIT
        } else {
            -MASK_LOGIT
        }
    });
    MaskPrediction::new(class_logits, m, image, image)
}

/// Union of the region masks per predicted class, ∅ regions left out,
/// and the area share of regions whose top probability reaches `tau`.
pub fn group_by_class(
    pred: &MaskPrediction,
    masks: &[Vec<u8>],
    tau: f64,
) -> (Vec<usize>, Vec<Vec<u8>>, f64) {
    let probs = pred.class_probs();
    let k = pred.classes();
    let px = pred.pixels();
    let mut by_class: Vec<Option<Vec<u8>>> = vec![None; k];
    let (mut confident, mut total) = (0usize, 0usize);
    for (i, m) in masks.iter().enumerate() {
        let row = probs.row(i);
        let (best, p) =
            row.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |a, (c, &v)| if v > a.1 { (c, v) } else { a },
            );
        let area = m.iter().filter(|&&v| v != 0).count();
        total += area;
        if p >= tau {
            confident += area;
        }
        if best == k {
            continue;
        }
        let u = by_class[best].get_or_insert_with(|| vec![0; px]);
        for (a, &v) in u.iter_mut().zip(m) {
            *a |= (v != 0) as u8;
        }
    }
    let conf = if total == 0 {
        0.0
    } else {
        confident as f64 / total as f64
    };
    let (classes, masks) = by_class
        .into_iter()
        .enumerate()
        .filter_map(|(c, m)| m.map(|m| (c, m)))
        .unzip();
    (classes, masks, conf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{logit_loss, mask_cls_loss, GroundTruthSet, MaskClsWeights};
    use crate::numeric::finite_diff_check;
    use rand::Rng;

    fn rand_params(seed: u64) -> ParamStore {
        let mut p = init_stm(3, 2, seed);
        let mut g = rng(seed + 1);
        for (_, e) in p.iter_mut() {
            for v in e.data_mut() {
                *v = g.random_range(-0.8..0.8);
            }
        }
        p
    }

    fn halves() -> Vec<Vec<u8>> {
        let left: Vec<u8> = (0..16).map(|i| (i % 4 < 2) as u8).collect();
        let right = left.iter().map(|v| 1 - v).collect();
        vec![left, right]
    }

    #[test]
    fn constant_features_give_identical_logits() {
        let f = Mat::filled(4, 3, 0.7);
        let r = pool_regions(&f, (2, 2), (4, 4), &halves()).unwrap();
        assert!(r.features.data().iter().all(|&v| v == 0.7));
        let pred = Stm { dim: 3, classes: 2 }
            .predict(&rand_params(1), &r, (4, 4))
            .unwrap();
        assert_eq!(pred.class_logits.row(0), pred.class_logits.row(1));
    }

    #[test]
    fn pooled_region_means() {
        // left column of patches holds 1,3; right column 10,20
        let f = Mat::from_vec(4, 1, vec![1.0, 10.0, 3.0, 20.0]);
        let r = pool_regions(&f, (2, 2), (4, 4), &halves()).unwrap();
        assert_eq!(r.features.data(), &[2.0, 15.0]);
        assert_eq!(r.dropped, 0);
    }

    #[test]
    fn masks_pass_through_and_small_ones_drop() {
        let mut masks = halves();
        let mut tiny = vec![0u8; 16];
        tiny[0] = 1;
        masks.push(tiny);
        let r = pool_regions(&Mat::filled(4, 3, 1.0), (2, 2), (4, 4), &masks).unwrap();
        assert_eq!(r.dropped, 1);
        assert_eq!(r.masks, halves());
        let pred = Stm { dim: 3, classes: 2 }
            .predict(&rand_params(2), &r, (4, 4))
            .unwrap();
        let back: Vec<Vec<u8>> = (0..2)
            .map(|i| {
                pred.mask_logits
                    .row(i)
                    .iter()
                    .map(|&v| (v > 0.0) as u8)
                    .collect()
            })
            .collect();
        assert_eq!(back, halves());
        // a half-covered patch counts
        let mut half = vec![0u8; 16];
        half[0] = 1;
        half[1] = 1;
        assert_eq!(
            pool_regions(&Mat::filled(4, 1, 1.0), (2, 2), (4, 4), &[half])
                .unwrap()
                .dropped,
            0
        );
    }

    #[test]
    fn grouping_and_confidence() {
        let cls = Mat::from_rows(&[&[30.0, 0.0, 0.0], &[0.0, 0.0, 0.1]]);
        let pred = region_prediction(cls, &halves(), (4, 4)).unwrap();
        let (classes, masks, conf) = group_by_class(&pred, &halves(), 0.9);
        assert_eq!(classes, vec![0]);
        assert_eq!(masks, vec![halves()[0].clone()]);
        assert_eq!(conf, 0.5);
    }

    #[test]
    fn stm_gradients() {
        let mut g = rng(9);
        let f = Mat::from_fn(4, 3, |_, _| g.random_range(-1.0..1.0));
        let r = pool_regions(&f, (2, 2), (4, 4), &halves()).unwrap();
        let stm = Stm { dim: 3, classes: 2 };
        let gt = GroundTruthSet::new(vec![1], vec![halves()[1].clone()], 2, 16).unwrap();
        let labels: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let weights: Vec<f64> = (0..16).map(|i| 0.5 + (i % 2) as f64).collect();
        let loss = |i: usize, p: &MaskPrediction| match i {
            0 => Ok(mask_cls_loss(p, &gt, &MaskClsWeights::default())?.loss),
            _ => logit_loss(p, &labels, &weights),
        };
        for i in 0..2 {
            let params = rand_params(20 + i as u64);
            let (_, grads, _) = stm.grad(&params, &r, (4, 4), |p| loss(i, p)).unwrap();
            let report = finite_diff_check(
                &params,
                &grads,
                |p| Ok(loss(i, &stm.predict(p, &r, (4, 4))?)?.value),
                1e-5,
                1e-4,
                i as u64,
            )
            .unwrap();
            assert!(report.pass, "loss {i}: {report:?}");
        }
    }
}

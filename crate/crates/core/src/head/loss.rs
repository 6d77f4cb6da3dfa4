//! Segmentation losses with closed-form gradients w.r.t. class and mask
//! logits. Gradients are returned on the patch grid, ready to seed the tape.

use super::{sigmoid, MaskPrediction};
use crate::error::{Error, Result};
use crate::image::IGNORE;
use crate::numeric::{hungarian_assign, Assignment, Mat};

/// Smoothing term of the dice loss.
pub const DICE_EPS: f64 = 1.0;
/// Additive floor before normalizing aggregated class scores.
pub const LOGIT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskClsWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl Default for MaskClsWeights {
    fn default() -> Self {
        MaskClsWeights {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Ground-truth instances: a class id in `0..K` and a binary mask each.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub classes: Vec<usize>,
    pub masks: Vec<Vec<u8>>,
}

impl GroundTruthSet {
    pub fn new(
        classes: Vec<usize>,
        masks: Vec<Vec<u8>>,
        num_classes: usize,
        pixels: usize,
    ) -> Result<Self> {
        if classes.len() != masks.len() {
            return Err(Error::InvalidInput(format!(
                "{} classes for {} masks",
                classes.len(),
                masks.len()
            )));
        }
        if let Some(c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "class id {c} outside 0..{num_classes}"
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != pixels {
                return Err(Error::Shape(format!(
                    "mask {i} has {} pixels, expected {pixels}",
                    m.len()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput(format!("mask {i} is not binary")));
            }
        }
        Ok(GroundTruthSet { classes, masks })
    }

    /// One instance per class present in `label` (`IGNORE` skipped), in
    /// class order.
    pub fn from_label_map(label: &[u8], num_classes: usize) -> Result<Self> {
        let mut masks: Vec<Option<Vec<u8>>> = vec![None; num_classes];
        for (p, &l) in label.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "label {l} outside 0..{num_classes}"
                )));
            }
            masks[l].get_or_insert_with(|| vec![0; label.len()])[p] = 1;
        }
        let (classes, masks) = masks
            .into_iter()
            .enumerate()
            .filter_map(|(c, m)| m.map(|m| (c, m)))
            .unzip();
        Ok(GroundTruthSet { classes, masks })
    }

    /// Keeps the `n` instances with the largest masks (ties keep the
    /// earlier one), preserving order.
    pub fn keep_largest(&mut self, n: usize) {
        if self.len() <= n {
            return;
        }
        let area = |m: &Vec<u8>| m.iter().filter(|&&v| v == 1).count();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            area(&self.masks[b])
                .cmp(&area(&self.masks[a]))
                .then(a.cmp(&b))
        });
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        self.classes = keep.iter().map(|&i| self.classes[i]).collect();
        self.masks = keep
            .iter()
            .map(|&i| std::mem::take(&mut self.masks[i]))
            .collect();
    }

    pub fn empty() -> Self {
        GroundTruthSet {
            classes: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// A scalar loss and its gradients w.r.t. the prediction's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_class: Mat,
    pub d_mask: Mat,
}

impl LossOutput {
    fn zeros(pred: &MaskPrediction) -> Self {
        LossOutput {
            value: 0.0,
            d_class: Mat::zeros(pred.class_logits.rows(), pred.class_logits.cols()),
            d_mask: Mat::zeros(pred.mask_logits.rows(), pred.mask_logits.cols()),
        }
    }

    /// Multiplies value and gradients by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        self.d_class.scale_assign(s);
        self.d_mask.scale_assign(s);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedLoss {
    pub loss: LossOutput,
    /// `assignment.cols[j]` is the query matched to instance `j`.
    pub assignment: Assignment,
    /// The `N_gt × N_q` matching cost.
    pub cost: Mat,
}

/// The two halves of the binary mask loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceBce {
    pub bce: f64,
    pub dice: f64,
}

impl DiceBce {
    pub fn total(&self) -> f64 {
        self.bce + self.dice
    }
}

#[inline]
fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn dice_bce_parts(logits: &[f64], probs: &[f64], target: &[u8], eps: f64) -> DiceBce {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for ((&x, &p), &t) in logits.iter().zip(probs).zip(target) {
        let t = t as f64;
        bce += bce_with_logits(x, t);
        inter += p * t;
        sp += p;
        st += t;
    }
    let denom = sp + st + eps;
    let dice = if denom == 0.0 {
        0.0
    } else {
        1.0 - (2.0 * inter + eps) / denom
    };
    DiceBce { bce: bce / n, dice }
}

/// Adds `w_bce·∂bce/∂x + w_dice·∂dice/∂x` to `out`.
fn dice_bce_grad(probs: &[f64], target: &[u8], eps: f64, w_bce: f64, w_dice: f64, out: &mut [f64]) {
    let n = probs.len() as f64;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target) {
        inter += p * t as f64;
        sp += p;
        st += t as f64;
    }
    let denom = sp + st + eps;
    let num = 2.0 * inter + eps;
    for ((o, &p), &t) in out.iter_mut().zip(probs).zip(target) {
        let t = t as f64;
        let d_dice = if denom == 0.0 {
            0.0
        } else {
            -(2.0 * t * denom - num) / (denom * denom)
        };
        *o += w_bce * (p - t) / n + w_dice * d_dice * p * (1.0 - p);
    }
}

/// Mean BCE and dice loss of `mask_logits` against `target` with `ε = 1`.
pub fn dice_bce(mask_logits: &[f64], target: &[u8]) -> DiceBce {
    dice_bce_eps(mask_logits, target, DICE_EPS)
}

pub fn dice_bce_eps(mask_logits: &[f64], target: &[u8], eps: f64) -> DiceBce {
    let probs: Vec<f64> = mask_logits.iter().map(|&x| sigmoid(x)).collect();
    dice_bce_parts(mask_logits, &probs, target, eps)
}

/// `log Σ exp(row)` and `log p[t]` for one logit row.
fn log_prob(row: &[f64], t: usize) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Per-query cross-entropy `Σ_q w_q·CE_q` with gradient `w_q·(p_q − 1_t)`
/// added into `d` after scaling by `scale`.
fn weighted_ce(
    logits: &Mat,
    probs: &Mat,
    targets: &[usize],
    weights: &[f64],
    scale: f64,
    d: &mut Mat,
) -> f64 {
    let mut total = 0.0;
    for (q, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        total += -w * log_prob(logits.row(q), t);
        let p = probs.row(q);
        let dq = d.row_mut(q);
        for (k, g) in dq.iter_mut().enumerate() {
            let onehot = if k == t { 1.0 } else { 0.0 };
            *g += scale * w * (p[k] - onehot);
        }
    }
    total * scale
}

fn mask_grad_to_grid(pred: &MaskPrediction, d_up: &Mat) -> Mat {
    let up = pred.upsampler();
    let mut d = Mat::zeros(pred.mask_logits.rows(), pred.mask_logits.cols());
    for q in 0..d_up.rows() {
        up.backward_row(d_up.row(q), d.row_mut(q));
    }
    d
}

fn check_pixels(pred: &MaskPrediction, len: usize, what: &str) -> Result<()> {
    if len != pred.pixels() {
        return Err(Error::Shape(format!(
            "{what} has {len} pixels, prediction has {}",
            pred.pixels()
        )));
    }
    Ok(())
}

/// Hungarian-matched mask-classification loss.
///
/// Matched queries pay `λ_cls`-weighted CE to their instance class plus
/// `(λ_bce·bce + λ_dice·dice) / N_gt`; the rest pay CE to ∅ with weight
/// `w_∅`. The CE term is normalized by the summed query weights.
pub fn mask_cls_loss(
    pred: &MaskPrediction,
    gt: &GroundTruthSet,
    w: &MaskClsWeights,
) -> Result<MatchedLoss> {
    let nq = pred.queries();
    let k = pred.classes();
    if gt.len() > nq {
        return Err(Error::Config(format!(
            "{} instances exceed {nq} queries",
            gt.len()
        )));
    }
    if let Some(c) = gt.classes.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidInput(format!("class id {c} outside 0..{k}")));
    }
    for m in &gt.masks {
        check_pixels(pred, m.len(), "ground-truth mask")?;
    }
    let probs = pred.class_probs();
    let up = pred.upsampled_logits();
    let sig = up.map(sigmoid);

    let ngt = gt.len();
    let mut cost = Mat::zeros(ngt, nq);
    for (j, (&c, m)) in gt.classes.iter().zip(&gt.masks).enumerate() {
        for q in 0..nq {
            let parts = dice_bce_parts(up.row(q), sig.row(q), m, DICE_EPS);
            cost.set(
                j,
                q,
                -w.cls * probs.get(q, c) + w.bce * parts.bce + w.dice * parts.dice,
            );
        }
    }
    let assignment = hungarian_assign(&cost)?;

    let mut out = LossOutput::zeros(pred);
    let mut targets = vec![k; nq];
    let mut weights = vec![w.no_object; nq];
    for (j, &q) in assignment.cols.iter().enumerate() {
        targets[q] = gt.classes[j];
        weights[q] = 1.0;
    }
    let wsum: f64 = weights.iter().sum();
    if wsum > 0.0 {
        out.value += weighted_ce(
            &pred.class_logits,
            &probs,
            &targets,
            &weights,
            w.cls / wsum,
            &mut out.d_class,
        );
    }
    if ngt > 0 {
        let inv = 1.0 / ngt as f64;
        let mut d_up = Mat::zeros(nq, pred.pixels());
        for (j, &q) in assignment.cols.iter().enumerate() {
            let parts = dice_bce_parts(up.row(q), sig.row(q), &gt.masks[j], DICE_EPS);
            out.value += inv * (w.bce * parts.bce + w.dice * parts.dice);
            dice_bce_grad(
                sig.row(q),
                &gt.masks[j],
                DICE_EPS,
                inv * w.bce,
                inv * w.dice,
                d_up.row_mut(q),
            );
        }
        out.d_mask = mask_grad_to_grid(pred, &d_up);
    }
    Ok(MatchedLoss {
        loss: out,
        assignment,
        cost,
    })
}

/// Per-pixel class scores `s(k, x) = Σ_q p[q,k]·m[q,x]` over the real
/// classes (the ∅ column is dropped).
pub fn semantic_aggregate(p_probs: &Mat, m_probs: &Mat) -> Mat {
    let k = p_probs.cols() - 1;
    p_probs.cols_range(0, k).matmul_t(true, m_probs, false)
}

/// ε-normalized cross-entropy on aggregated scores, given probabilities.
/// Returns the value and gradients w.r.t. `p_probs` and `m_probs`.
pub fn logit_loss_from_probs(
    p_probs: &Mat,
    m_probs: &Mat,
    labels: &[u8],
    weights: &[f64],
) -> (f64, Mat, Mat) {
    let (nq, kk) = p_probs.shape();
    let k = kk - 1;
    let hw = m_probs.cols();
    let mut dp = Mat::zeros(nq, kk);
    let mut dm = Mat::zeros(nq, hw);
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return (0.0, dp, dm);
    }
    let inv = 1.0 / valid as f64;
    let s = semantic_aggregate(p_probs, m_probs);
    let mut value = 0.0;
    let mut gs = vec![0.0; k];
    for x in 0..hw {
        let y = labels[x];
        if y == IGNORE {
            continue;
        }
        let y = y as usize;
        let wx = weights[x];
        let z: f64 = (0..k).map(|c| s.get(c, x) + LOGIT_EPS).sum();
        let sy = s.get(y, x) + LOGIT_EPS;
        value += wx * -(sy / z).ln();
        if wx == 0.0 {
            continue;
        }
        for (c, g) in gs.iter_mut().enumerate() {
            *g = wx * inv * (1.0 / z - if c == y { 1.0 / sy } else { 0.0 });
        }
        for q in 0..nq {
            let pq = p_probs.row(q);
            let mut acc = 0.0;
            for c in 0..k {
                acc += gs[c] * pq[c];
            }
            dm.set(q, x, dm.get(q, x) + acc);
            let mqx = m_probs.get(q, x);
            let dpq = dp.row_mut(q);
            for c in 0..k {
                dpq[c] += gs[c] * mqx;
            }
        }
    }
    (value * inv, dp, dm)
}

/// Pixel cross-entropy on `p^T × m` against `labels` (`IGNORE` skipped),
/// weighted per pixel and averaged over non-ignored pixels.
pub fn logit_loss(pred: &MaskPrediction, labels: &[u8], weights: &[f64]) -> Result<LossOutput> {
    check_pixels(pred, labels.len(), "label map")?;
    check_pixels(pred, weights.len(), "pixel weights")?;
    let k = pred.classes();
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return Err(Error::InvalidInput(format!("label {l} outside 0..{k}")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "pixel weights must be finite and non-negative".into(),
        ));
    }
    let probs = pred.class_probs();
    let sig = pred.mask_probs();
    let (value, dp, dm) = logit_loss_from_probs(&probs, &sig, labels, weights);
    let mut out = LossOutput::zeros(pred);
    out.value = value;
    for q in 0..pred.queries() {
        let p = probs.row(q);
        let g = dp.row(q);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (c, d) in out.d_class.row_mut(q).iter_mut().enumerate() {
            *d = p[c] * (g[c] - dot);
        }
    }
    let d_up = Mat::from_fn(sig.rows(), sig.cols(), |q, x| {
        let s = sig.get(q, x);
        dm.get(q, x) * s * (1.0 - s)
    });
    out.d_mask = mask_grad_to_grid(pred, &d_up);
    Ok(out)
}

/// Query-aligned distillation: each student query pays CE to the teacher's
/// class for the same query and, unless that class is ∅, the binary mask
/// loss against the teacher mask thresholded at 0.5. Averaged over queries.
pub fn instance_loss(
    student: &MaskPrediction,
    teacher_classes: &[usize],
    teacher_masks: &Mat,
) -> Result<LossOutput> {
    let nq = student.queries();
    let k = student.classes();
    if teacher_classes.len() != nq || teacher_masks.rows() != nq {
        return Err(Error::Shape(format!(
            "student has {nq} queries, teacher has {} classes and {} masks",
            teacher_classes.len(),
            teacher_masks.rows()
        )));
    }
    check_pixels(student, teacher_masks.cols(), "teacher masks")?;
    if let Some(c) = teacher_classes.iter().find(|&&c| c > k) {
        return Err(Error::InvalidInput(format!(
            "teacher class {c} outside 0..={k}"
        )));
    }
    let inv = 1.0 / nq as f64;
    let probs = student.class_probs();
    let mut out = LossOutput::zeros(student);
    out.value += weighted_ce(
        &student.class_logits,
        &probs,
        teacher_classes,
        &vec![1.0; nq],
        inv,
        &mut out.d_class,
    );
    let up = student.upsampled_logits();
    let sig = up.map(sigmoid);
    let mut d_up = Mat::zeros(nq, student.pixels());
    let mut any = false;
    for q in 0..nq {
        if teacher_classes[q] == k {
            continue;
        }
        any = true;
        let target: Vec<u8> = teacher_masks
            .row(q)
            .iter()
            .map(|&v| (v > 0.5) as u8)
            .collect();
        out.value += inv * dice_bce_parts(up.row(q), sig.row(q), &target, DICE_EPS).total();
        dice_bce_grad(sig.row(q), &target, DICE_EPS, inv, inv, d_up.row_mut(q));
    }
    if any {
        out.d_mask = mask_grad_to_grid(student, &d_up);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::hungarian::tests::brute_force_min;
    use crate::numeric::{finite_diff_check, Grads, Param, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, g: &mut ChaCha8Rng, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| g.random_range(-scale..scale))
    }

    fn rand_pred(nq: usize, k: usize, grid: usize, image: usize, seed: u64) -> MaskPrediction {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        MaskPrediction::new(
            rand_mat(nq, k + 1, &mut g, 3.0),
            rand_mat(nq, grid * grid, &mut g, 4.0),
            (grid, grid),
            (image, image),
        )
        .unwrap()
    }

    fn rand_mask(pixels: usize, g: &mut ChaCha8Rng) -> Vec<u8> {
        (0..pixels).map(|_| g.random_bool(0.3) as u8).collect()
    }

    fn rand_gt(n: usize, k: usize, pixels: usize, seed: u64) -> GroundTruthSet {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let classes = (0..n).map(|_| g.random_range(0..k)).collect();
        let masks = (0..n).map(|_| rand_mask(pixels, &mut g)).collect();
        GroundTruthSet::new(classes, masks, k, pixels).unwrap()
    }

    fn permute_queries(pred: &MaskPrediction, perm: &[usize]) -> MaskPrediction {
        let mut out = pred.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.class_logits
                .row_mut(i)
                .copy_from_slice(pred.class_logits.row(p));
            out.mask_logits
                .row_mut(i)
                .copy_from_slice(pred.mask_logits.row(p));
        }
        out
    }

    fn shuffled(n: usize, g: &mut ChaCha8Rng) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(g);
        p
    }

    /// Stores prediction logits as parameters so the generic checker can
    /// probe them.
    fn as_store(pred: &MaskPrediction) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_mat("class", pred.class_logits.clone(), true);
        s.insert_mat("mask", pred.mask_logits.clone(), true);
        s
    }

    fn from_store(s: &ParamStore, like: &MaskPrediction) -> MaskPrediction {
        let get =
            |n: &str, m: &Mat| Mat::from_vec(m.rows(), m.cols(), s.get(n).unwrap().data().to_vec());
        MaskPrediction {
            class_logits: get("class", &like.class_logits),
            mask_logits: get("mask", &like.mask_logits),
            ..like.clone()
        }
    }

    fn check_grad(
        pred: &MaskPrediction,
        out: &LossOutput,
        mut f: impl FnMut(&MaskPrediction) -> f64,
    ) {
        let store = as_store(pred);
        let mut g = Grads::new();
        g.insert("class", out.d_class.data().to_vec());
        g.insert("mask", out.d_mask.data().to_vec());
        let rep =
            finite_diff_check(&store, &g, |s| Ok(f(&from_store(s, pred))), 1e-5, 1e-4, 3).unwrap();
        assert!(rep.pass, "worst {:?}", rep.worst());
    }

    #[test]
    fn ground_truth_from_labels() {
        let gt = GroundTruthSet::from_label_map(&[0, 2, 2, IGNORE, 0], 4).unwrap();
        assert_eq!(gt.classes, vec![0, 2]);
        assert_eq!(gt.masks, vec![vec![1, 0, 0, 0, 1], vec![0, 1, 1, 0, 0]]);
        assert!(GroundTruthSet::from_label_map(&[4], 4).is_err());
        let mut g = GroundTruthSet::from_label_map(&[0, 1, 1, 2, 2, 2], 3).unwrap();
        g.keep_largest(2);
        assert_eq!(g.classes, vec![1, 2]);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let t: Vec<u8> = (0..64).map(|i| (i < 20) as u8).collect();
        let logits: Vec<f64> = t
            .iter()
            .map(|&v| if v == 1 { 20.0 } else { -20.0 })
            .collect();
        assert!(dice_bce(&logits, &t).dice < 1e-6);
        // complement with equal areas
        let t: Vec<u8> = (0..64).map(|i| (i < 32) as u8).collect();
        let inv: Vec<f64> = t
            .iter()
            .map(|&v| if v == 1 { -40.0 } else { 40.0 })
            .collect();
        let d = dice_bce(&inv, &t).dice;
        assert!((d - (1.0 - 1.0 / 65.0)).abs() < 1e-9);
    }

    #[test]
    fn dice_half_overlap_without_eps() {
        let a = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let logits = [40.0, 40.0, -40.0, -40.0, 40.0, 40.0, -40.0, -40.0];
        let d = dice_bce_eps(&logits, &a, 0.0).dice;
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dice_bce_gradient() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..50).map(|_| g.random_range(-3.0..3.0)).collect();
        let t = rand_mask(50, &mut g);
        let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let mut grad = vec![0.0; 50];
        dice_bce_grad(&probs, &t, DICE_EPS, 1.0, 1.0, &mut grad);
        let mut s = ParamStore::new();
        s.insert("x", Param::new(vec![50], logits.clone(), true).unwrap());
        let mut gs = Grads::new();
        gs.insert("x", grad);
        let rep = finite_diff_check(
            &s,
            &gs,
            |p| Ok(dice_bce(p.get("x").unwrap().data(), &t).total()),
            1e-5,
            1e-4,
            1,
        )
        .unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn aggregate_indicator_and_loop_oracle() {
        let mut p = Mat::zeros(1, 4);
        p.set(0, 2, 1.0);
        let s = semantic_aggregate(&p, &Mat::filled(1, 5, 1.0));
        for x in 0..5 {
            assert_eq!([s.get(0, x), s.get(1, x), s.get(2, x)], [0.0, 0.0, 1.0]);
        }

        let mut g = ChaCha8Rng::seed_from_u64(1);
        let p = crate::numeric::tape::softmax_rows(&rand_mat(3, 3, &mut g, 2.0));
        let m = rand_mat(3, 10, &mut g, 1.0).map(|v| (v + 1.0) / 2.0);
        let s = semantic_aggregate(&p, &m);
        assert_eq!(s.shape(), (2, 10));
        for k in 0..2 {
            for x in 0..10 {
                let mut acc = 0.0;
                for q in 0..3 {
                    acc += p.get(q, k) * m.get(q, x);
                }
                assert!((s.get(k, x) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn aggregate_argmax_follows_dominant_query() {
        // query 0 covers the left half with class 1, query 1 the right with class 3
        let mut cls = Mat::filled(3, 5, -10.0);
        cls.set(0, 1, 10.0);
        cls.set(1, 3, 10.0);
        cls.set(2, 4, 10.0);
        let mask = Mat::from_fn(3, 16, |q, x| match q {
            0 if x % 4 < 2 => 10.0,
            1 if x % 4 >= 2 => 10.0,
            _ => -10.0,
        });
        let pred = MaskPrediction::new(cls, mask, (4, 4), (4, 4)).unwrap();
        let arg = pred.semantic_argmax();
        for (x, &a) in arg.iter().enumerate() {
            assert_eq!(a, if x % 4 < 2 { 1 } else { 3 });
        }
    }

    #[test]
    fn mask_cls_matches_permutation_oracle() {
        for seed in 0..20 {
            let n = 1 + seed as usize % 6;
            let pred = rand_pred(n, 4, 4, 8, seed);
            let gt = rand_gt(n, 4, 64, seed + 100);
            let out = mask_cls_loss(&pred, &gt, &MaskClsWeights::default()).unwrap();
            assert!((out.assignment.cost - brute_force_min(&out.cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_cls_permutation_invariance() {
        let mut g = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..10 {
            let pred = rand_pred(8, 6, 8, 32, seed);
            let gt = rand_gt(4, 6, 1024, seed + 50);
            let w = MaskClsWeights::default();
            let base = mask_cls_loss(&pred, &gt, &w).unwrap().loss.value;
            let p = permute_queries(&pred, &shuffled(8, &mut g));
            assert!((mask_cls_loss(&p, &gt, &w).unwrap().loss.value - base).abs() < 1e-9);
            let perm = shuffled(4, &mut g);
            let gt2 = GroundTruthSet {
                classes: perm.iter().map(|&i| gt.classes[i]).collect(),
                masks: perm.iter().map(|&i| gt.masks[i].clone()).collect(),
            };
            assert!((mask_cls_loss(&pred, &gt2, &w).unwrap().loss.value - base).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_cls_saturated_perfect_prediction() {
        let (nq, k) = (5, 4);
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let classes = vec![0, 2, 3];
        // patch-aligned masks so resampling reproduces them exactly
        let cells: Vec<Vec<u8>> = (0..3).map(|_| rand_mask(16, &mut g)).collect();
        let gt = GroundTruthSet::new(classes.clone(), cells.clone(), k, 16).unwrap();
        let mut cls = Mat::filled(nq, k + 1, -20.0);
        let mut mask = Mat::filled(nq, 16, -20.0);
        for (j, &c) in classes.iter().enumerate() {
            cls.set(j, c, 20.0);
            for x in 0..16 {
                mask.set(j, x, if cells[j][x] == 1 { 20.0 } else { -20.0 });
            }
        }
        for q in 3..nq {
            cls.set(q, k, 20.0);
        }
        let pred = MaskPrediction::new(cls, mask, (4, 4), (4, 4)).unwrap();
        let v = mask_cls_loss(&pred, &gt, &MaskClsWeights::default())
            .unwrap()
            .loss
            .value;
        assert!(v < 1e-3, "{v}");
    }

    #[test]
    fn mask_cls_rejects_too_many_instances() {
        let pred = rand_pred(2, 3, 2, 4, 1);
        let gt = rand_gt(3, 3, 16, 2);
        assert!(matches!(
            mask_cls_loss(&pred, &gt, &MaskClsWeights::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_cls_gradient() {
        let pred = rand_pred(6, 4, 4, 8, 11);
        let gt = rand_gt(3, 4, 64, 12);
        let w = MaskClsWeights::default();
        let out = mask_cls_loss(&pred, &gt, &w).unwrap();
        check_grad(&pred, &out.loss, |p| {
            mask_cls_loss(p, &gt, &w).unwrap().loss.value
        });
        let empty = GroundTruthSet::empty();
        let out = mask_cls_loss(&pred, &empty, &w).unwrap();
        check_grad(&pred, &out.loss, |p| {
            mask_cls_loss(p, &empty, &w).unwrap().loss.value
        });
    }

    fn rand_labels(pixels: usize, k: usize, g: &mut ChaCha8Rng) -> Vec<u8> {
        (0..pixels)
            .map(|_| {
                if g.random_bool(0.1) {
                    IGNORE
                } else {
                    g.random_range(0..k) as u8
                }
            })
            .collect()
    }

    #[test]
    fn logit_loss_zero_weight_and_all_ignored() {
        let pred = rand_pred(4, 3, 4, 8, 5);
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let labels = rand_labels(64, 3, &mut g);
        assert_eq!(logit_loss(&pred, &labels, &[0.0; 64]).unwrap().value, 0.0);
        let out = logit_loss(&pred, &[IGNORE; 64], &[1.0; 64]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.d_class.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logit_loss_one_hot_scores() {
        let mut g = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<u8> = (0..20).map(|_| g.random_range(0..3)).collect();
        let p = Mat::from_fn(3, 4, |q, k| (q == k) as u8 as f64);
        let m = Mat::from_fn(3, 20, |q, x| (labels[x] as usize == q) as u8 as f64);
        let (v, _, _) = logit_loss_from_probs(&p, &m, &labels, &[1.0; 20]);
        assert!(v < 1e-6, "{v}");
    }

    #[test]
    fn logit_loss_ignores_ignored_pixels_bitwise() {
        let mut g = ChaCha8Rng::seed_from_u64(8);
        let labels = rand_labels(64, 3, &mut g);
        let p = crate::numeric::tape::softmax_rows(&rand_mat(4, 4, &mut g, 2.0));
        let m = rand_mat(4, 64, &mut g, 1.0).map(|v| (v + 1.0) / 2.0);
        let w: Vec<f64> = (0..64).map(|_| g.random_range(0.0..1.0)).collect();
        let (base, _, _) = logit_loss_from_probs(&p, &m, &labels, &w);
        let mut m2 = m.clone();
        let mut w2 = w.clone();
        for x in 0..64 {
            if labels[x] == IGNORE {
                for q in 0..4 {
                    m2.set(q, x, g.random_range(0.0..1.0));
                }
                w2[x] = 7.0;
            }
        }
        let (edited, _, _) = logit_loss_from_probs(&p, &m2, &labels, &w2);
        assert_eq!(base.to_bits(), edited.to_bits());
    }

    #[test]
    fn logit_loss_gradient() {
        let pred = rand_pred(5, 4, 4, 8, 21);
        let mut g = ChaCha8Rng::seed_from_u64(21);
        let labels = rand_labels(64, 4, &mut g);
        let w: Vec<f64> = (0..64).map(|_| g.random_range(0.2..1.0)).collect();
        let out = logit_loss(&pred, &labels, &w).unwrap();
        check_grad(&pred, &out, |p| logit_loss(p, &labels, &w).unwrap().value);
    }

    #[test]
    fn logit_loss_rejects_bad_label() {
        let pred = rand_pred(2, 3, 2, 4, 1);
        assert!(logit_loss(&pred, &[3; 16], &[1.0; 16]).is_err());
    }

    fn teacher_of(pred: &MaskPrediction) -> (Vec<usize>, Mat) {
        let probs = pred.class_probs();
        let classes = (0..pred.queries())
            .map(|q| {
                let r = probs.row(q);
                (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap()
            })
            .collect();
        (classes, pred.mask_probs())
    }

    #[test]
    fn instance_loss_self_distillation_is_small() {
        let mut g = ChaCha8Rng::seed_from_u64(9);
        let mut cls = Mat::from_fn(4, 5, |_, _| if g.random_bool(0.2) { 20.0 } else { -20.0 });
        for q in 0..4 {
            cls.set(q, q, 30.0);
        }
        let mask = Mat::from_fn(4, 16, |_, _| if g.random_bool(0.5) { 20.0 } else { -20.0 });
        let pred = MaskPrediction::new(cls, mask, (4, 4), (4, 4)).unwrap();
        let (tc, tm) = teacher_of(&pred);
        let v = instance_loss(&pred, &tc, &tm).unwrap().value;
        assert!(v < 1e-3, "{v}");
    }

    #[test]
    fn instance_loss_is_order_sensitive() {
        let pred = rand_pred(6, 4, 4, 8, 31);
        let (tc, tm) = teacher_of(&rand_pred(6, 4, 4, 8, 32));
        let base = instance_loss(&pred, &tc, &tm).unwrap().value;
        let perm = [1, 0, 2, 3, 5, 4];
        let moved = instance_loss(&permute_queries(&pred, &perm), &tc, &tm)
            .unwrap()
            .value;
        assert!((base - moved).abs() > 1e-6);
    }

    #[test]
    fn instance_loss_skips_mask_for_no_object() {
        let pred = rand_pred(1, 3, 2, 4, 4);
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let tm = rand_mat(1, 16, &mut g, 1.0);
        let out = instance_loss(&pred, &[3], &tm).unwrap();
        let ce = -log_prob(pred.class_logits.row(0), 3);
        assert!((out.value - ce).abs() < 1e-12);
        assert!(out.d_mask.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn instance_loss_gradient_and_mismatch() {
        let pred = rand_pred(6, 4, 4, 8, 41);
        let (mut tc, tm) = teacher_of(&rand_pred(6, 4, 4, 8, 42));
        tc[0] = 4;
        let out = instance_loss(&pred, &tc, &tm).unwrap();
        check_grad(&pred, &out, |p| instance_loss(p, &tc, &tm).unwrap().value);
        assert!(instance_loss(&pred, &tc[..5], &tm).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn losses_are_finite_and_non_negative(seed in any::<u64>(), nq in 1usize..6, ngt in 0usize..4) {
            let ngt = ngt.min(nq);
            let pred = rand_pred(nq, 3, 2, 4, seed);
            let mut g = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let gt = rand_gt(ngt, 3, 16, seed ^ 2);
            let mc = mask_cls_loss(&pred, &gt, &MaskClsWeights::default()).unwrap().loss.value;
            let labels = rand_labels(16, 3, &mut g);
            let w: Vec<f64> = (0..16).map(|_| g.random_range(0.0..1.0)).collect();
            let ll = logit_loss(&pred, &labels, &w).unwrap().value;
            let (tc, tm) = teacher_of(&rand_pred(nq, 3, 2, 4, seed ^ 3));
            let il = instance_loss(&pred, &tc, &tm).unwrap().value;
            let db = dice_bce(pred.mask_logits.row(0), &rand_mask(4, &mut g)).total();
            for v in [mc, ll, il, db] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}

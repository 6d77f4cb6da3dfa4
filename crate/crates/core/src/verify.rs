//! Self-checks shipped with the library: parameter-count anchors, gradient
//! checks of every loss, and the assignment oracle.

use rand::Rng as _;

use crate::adapt::{init_stm, pool_regions, pseudo_from_prediction, Stm};
use crate::backbone;
use crate::error::Result;
use crate::head::{
    instance_loss, logit_loss, mask_cls_loss, GroundTruthSet, LossOutput, MaskClsWeights,
    MaskPrediction,
};
use crate::model::{init_model, Model, ModelConfig};
use crate::numeric::{finite_diff_check, hungarian_assign, rng, GradReport, Mat, ParamStore};
use crate::rein::{count_trainable, ReinConfig};
use crate::synthdata::oracle::{masks_from_map, oracle_map};
use crate::synthdata::{gen_sample, Domain, DomainSpec};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// A published trainable-parameter figure and the exact count behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct CountAnchor {
    pub layers: usize,
    pub dim: usize,
    pub computed: usize,
    /// The figure as published, in millions.
    pub published: &'static str,
}

impl CountAnchor {
    pub fn rounded(&self) -> String {
        format!("{}M", round_sig(self.computed as f64 / 1e6, 3))
    }

    pub fn matches(&self) -> bool {
        self.rounded() == self.published
    }
}

/// `x` to `digits` significant figures, trailing zeros kept (`24.0`).
pub fn round_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// The three large-backbone settings (m=100, r=16, c′=256, plain MLPs).
pub fn count_anchors() -> Vec<CountAnchor> {
    [
        (24, 1024, "2.99M"),
        (40, 1536, "6.36M"),
        (48, 3200, "24.0M"),
    ]
    .iter()
    .map(|&(layers, dim, published)| CountAnchor {
        layers,
        dim,
        computed: count_trainable(&ReinConfig::large(layers, dim)),
        published,
    })
    .collect()
}

/// Exhaustive minimum over injective row→column maps.
pub fn brute_force_assignment(cost: &Mat) -> f64 {
    fn rec(cost: &Mat, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                rec(cost, row + 1, used, acc + cost.get(row, c), best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherReport {
    pub trials: usize,
    pub passed: usize,
    /// Largest change of the mask-classification loss under query and
    /// instance permutations.
    pub permutation_gap: f64,
}

/// Random `r×c` matrices (`r ≤ c ≤ 6`) against exhaustive search, then the
/// permutation invariance of the matched loss.
pub fn matcher_suite(trials: usize, seed: u64) -> Result<MatcherReport> {
    let mut g = rng(seed);
    let mut passed = 0;
    for _ in 0..trials {
        let c = g.random_range(1..=6);
        let r = g.random_range(1..=c);
        let cost = Mat::from_fn(r, c, |_, _| g.random_range(-5.0..5.0));
        let got = hungarian_assign(&cost)?;
        let mut used = vec![false; c];
        let mut total = 0.0;
        let mut valid = got.cols.len() == r;
        for (i, &j) in got.cols.iter().enumerate() {
            valid &= j < c && !used[j];
            if j < c {
                used[j] = true;
                total += cost.get(i, j);
            }
        }
        let best = brute_force_assignment(&cost);
        if valid && (got.cost - best).abs() < 1e-9 && (total - best).abs() < 1e-9 {
            passed += 1;
        }
    }

    let mut gap = 0.0f64;
    for t in 0..20 {
        let (nq, k, px) = (6, 4, 16);
        let cls = Mat::from_fn(nq, k + 1, |_, _| g.random_range(-3.0..3.0));
        let masks = Mat::from_fn(nq, px, |_, _| g.random_range(-3.0..3.0));
        let n = 1 + t % 4;
        let classes: Vec<usize> = (0..n).map(|_| g.random_range(0..k)).collect();
        let gm: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..px).map(|_| g.random_range(0..2u8)).collect())
            .collect();
        let w = MaskClsWeights::default();
        let pred = MaskPrediction::new(cls.clone(), masks.clone(), (4, 4), (4, 4))?;
        let base = mask_cls_loss(
            &pred,
            &GroundTruthSet::new(classes.clone(), gm.clone(), k, px)?,
            &w,
        )?
        .loss
        .value;
        let qp: Vec<usize> = {
            let mut v: Vec<usize> = (0..nq).collect();
            v.rotate_left(1 + t % (nq - 1));
            v
        };
        let permuted = MaskPrediction::new(
            Mat::from_fn(nq, k + 1, |q, c| cls.get(qp[q], c)),
            Mat::from_fn(nq, px, |q, x| masks.get(qp[q], x)),
            (4, 4),
            (4, 4),
        )?;
        let gt_rev = GroundTruthSet::new(
            classes.iter().rev().copied().collect(),
            gm.iter().rev().cloned().collect(),
            k,
            px,
        )?;
        let moved = mask_cls_loss(&permuted, &gt_rev, &w)?.loss.value;
        gap = gap.max((base - moved).abs());
    }
    Ok(MatcherReport {
        trials,
        passed,
        permutation_gap: gap,
    })
}

/// Gradient checks of every trainable group through every loss, named
/// `<loss>` for the student model and `stm/<loss>` for the region
/// classifier. Zero-initialized projections are perturbed first so that
/// every parameter receives a gradient.
pub fn gradient_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<(String, GradReport)>> {
    let mut params = init_model(cfg, seed)?;
    let mut g = rng(seed ^ 0x9e);
    for (n, p) in params.iter_mut() {
        if !n.starts_with(backbone::PREFIX) {
            for v in p.data_mut() {
                *v += g.random_range(-0.1..0.1);
            }
        }
    }
    let spec = DomainSpec {
        size: cfg.backbone.image,
        classes: cfg.head.classes,
        ..Default::default()
    };
    let rec = gen_sample(&spec, Domain::Source, seed as usize);
    let model = Model::new(*cfg)?;
    let k = cfg.head.classes;
    let frozen = params.filter_prefix(backbone::PREFIX);
    let trainable = params.trainable_only();
    let w = MaskClsWeights::default();

    let mut gt = GroundTruthSet::from_label_map(&rec.label.data, k)?;
    gt.keep_largest(cfg.head.queries);
    let weights: Vec<f64> = (0..rec.label.len())
        .map(|i| 0.5 + (i % 3) as f64 * 0.25)
        .collect();
    let (teacher_pred, _) = model.predict(
        &[&params],
        &gen_sample(&spec, Domain::Target, seed as usize).image,
    )?;
    let pseudo = pseudo_from_prediction(&teacher_pred, 0.5);

    type LossFn<'a> = Box<dyn Fn(&MaskPrediction) -> Result<LossOutput> + 'a>;
    let losses: Vec<(&str, LossFn)> = vec![
        (
            "mask_cls",
            Box::new(|p| Ok(mask_cls_loss(p, &gt, &w)?.loss)),
        ),
        (
            "logit",
            Box::new(|p| logit_loss(p, &rec.label.data, &weights)),
        ),
        (
            "instance",
            Box::new(|p| instance_loss(p, &pseudo.classes, &pseudo.masks)),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, lf)) in losses.iter().enumerate() {
        let r = model.grad(&[&params], &rec.image, lf)?;
        let rep = finite_diff_check(
            &trainable,
            &r.grads,
            |t| Ok(lf(&model.predict(&[&frozen, t], &rec.image)?.0)?.value),
            GRAD_STEP,
            GRAD_TOLERANCE,
            seed + i as u64,
        )?;
        out.push((name.to_string(), rep));
    }

    let stm = Stm {
        dim: cfg.head.dim,
        classes: k,
    };
    let mut stm_params: ParamStore = init_stm(cfg.head.dim, k, seed);
    for (_, p) in stm_params.iter_mut() {
        for v in p.data_mut() {
            *v += g.random_range(-0.1..0.1);
        }
    }
    let (_, feats) = model.predict(&[&params], &rec.image)?;
    let map = oracle_map(&rec.instances, spec.oracle_jitter, &mut rng(seed));
    let regions = pool_regions(&feats, cfg.grid(), cfg.image(), &masks_from_map(&map))?;
    let mut stm_gt = GroundTruthSet::from_label_map(&rec.label.data, k)?;
    stm_gt.keep_largest(regions.masks.len());
    let stm_losses: Vec<(&str, LossFn)> = vec![
        (
            "stm/mask_cls",
            Box::new(|p| Ok(mask_cls_loss(p, &stm_gt, &w)?.loss)),
        ),
        (
            "stm/logit",
            Box::new(|p| logit_loss(p, &rec.label.data, &weights)),
        ),
    ];
    for (i, (name, lf)) in stm_losses.iter().enumerate() {
        let (_, grads, _) = stm.grad(&stm_params, &regions, cfg.image(), lf)?;
        let rep = finite_diff_check(
            &stm_params,
            &grads,
            |t| Ok(lf(&stm.predict(t, &regions, cfg.image())?)?.value),
            GRAD_STEP,
            GRAD_TOLERANCE,
            seed + 10 + i as u64,
        )?;
        out.push((name.to_string(), rep));
    }
    Ok(out)
}

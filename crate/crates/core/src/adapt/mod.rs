//! Unsupervised adaptation: an EMA teacher labels target images, the student
//! learns from source labels, class-mixed images and masked target images,
//! and a region classifier (STM) fed by precomputed oracle regions adds a
//! second, boundary-aware teaching signal.

pub mod pseudo;
pub mod stm;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use pseudo::{
    class_mix, class_mix_with, mix_regions, pseudo_from_prediction, random_patch_mask,
    rcs_probabilities, Mix, PseudoLabel, RareClassSampler,
};
pub use stm::{group_by_class, init_stm, pool_regions, PooledRegions, Stm};

use crate::backbone;
use crate::error::{Error, Result};
use crate::head::{
    instance_loss, logit_loss, mask_cls_loss, GroundTruthSet, LossOutput, MaskClsWeights,
};
use crate::image::{Image, InstanceMap, LabelMap};
use crate::model::{init_model, Model, ModelConfig};
use crate::numeric::{
    adamw_step, derive_seed, ema_update, rng, AdamWConfig, Grads, Moments, ParamStore,
};
use crate::synthdata::oracle::masks_from_map;

/// Branches switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_mix: bool,
    pub no_mask: bool,
    pub no_stm: bool,
}

impl FromStr for Ablation {
    type Err = String;
    /// Comma-separated subset of `no_mix`, `no_mask`, `no_stm`; `none` or
    /// empty for the full method.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut a = Ablation::default();
        for part in s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != "none")
        {
            match part {
                "no_mix" => a.no_mix = true,
                "no_mask" => a.no_mask = true,
                "no_stm" => a.no_stm = true,
                _ => {
                    return Err(format!(
                        "unknown ablation {part:?} (expected no_mix, no_mask or no_stm)"
                    ))
                }
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.no_mix, "no_mix"),
            (self.no_mask, "no_mask"),
            (self.no_stm, "no_stm"),
        ]
        .iter()
        .filter(|p| p.0)
        .map(|p| p.1)
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the mix branch.
    pub alpha: f64,
    /// Weight of the mask branch.
    pub beta: f64,
    pub ema: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub mask_ratio: f64,
    pub mask_cell: usize,
    pub rcs_temperature: f64,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub weights: MaskClsWeights,
    pub ablation: Ablation,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 1.0,
            beta: 1.0,
            ema: 0.999,
            tau: 0.968,
            mask_ratio: 0.5,
            mask_cell: 4,
            rcs_temperature: 0.1,
            lr: 1e-4,
            adamw: AdamWConfig::default(),
            weights: MaskClsWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!(
                "branch weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad(format!("ema momentum {} outside [0, 1]", self.ema));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.mask_cell == 0 {
            return bad("mask cell must be positive".into());
        }
        if !(self.rcs_temperature > 0.0) {
            return bad(format!(
                "rcs temperature {} must be positive",
                self.rcs_temperature
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

/// A labeled source image and its oracle region map.
#[derive(Debug, Clone, Copy)]
pub struct SourceItem<'a> {
    pub image: &'a Image,
    pub label: &'a LabelMap,
    pub regions: &'a InstanceMap,
}

/// An unlabeled target image and its oracle region map.
#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub image: &'a Image,
    pub regions: &'a InstanceMap,
}

/// Batch-averaged branch losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_src")]
    pub src: f64,
    #[serde(rename = "L_mix")]
    pub mix: f64,
    #[serde(rename = "L_mask")]
    pub mask: f64,
    #[serde(rename = "L_src_stm")]
    pub src_stm: f64,
    #[serde(rename = "L_mix_stm")]
    pub mix_stm: f64,
    #[serde(rename = "L_mask_stm")]
    pub mask_stm: f64,
    pub total: f64,
    /// Mean pseudo-label confidence.
    pub conf: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, alpha: f64, beta: f64) -> f64 {
        self.src
            + alpha * self.mix
            + beta * self.mask
            + self.src_stm
            + alpha * self.mix_stm
            + beta * self.mask_stm
    }

    /// One metrics-log line.
    pub fn to_json_line(&self, iter: u64) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            iter: u64,
            #[serde(flatten)]
            b: &'a LossBreakdown,
        }
        serde_json::to_string(&Line { iter, b: self }).expect("breakdown serializes")
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.src += o.src;
        self.mix += o.mix;
        self.mask += o.mask;
        self.src_stm += o.src_stm;
        self.mix_stm += o.mix_stm;
        self.mask_stm += o.mask_stm;
        self.conf += o.conf;
    }

    fn scale(&mut self, s: f64) {
        for v in [
            &mut self.src,
            &mut self.mix,
            &mut self.mask,
            &mut self.src_stm,
            &mut self.mix_stm,
            &mut self.mask_stm,
            &mut self.conf,
        ] {
            *v *= s;
        }
    }
}

fn checked(branch: &str, iteration: u64, out: LossOutput) -> Result<LossOutput> {
    if out.value.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite(format!(
            "{branch} = {} at iteration {iteration}",
            out.value
        )))
    }
}

fn sum(mut a: LossOutput, b: LossOutput) -> LossOutput {
    a.value += b.value;
    a.d_class.add_assign(&b.d_class);
    a.d_mask.add_assign(&b.d_mask);
    a
}

pub struct TrainerState {
    pub model: Model,
    /// Backbone entries, never updated.
    pub frozen: ParamStore,
    pub student: ParamStore,
    /// Same names as `student`, all marked non-trainable.
    pub teacher: ParamStore,
    pub stm_params: ParamStore,
    pub stm: Stm,
    pub moments: Moments,
    pub stm_moments: Moments,
    pub iteration: u64,
    pub cfg: AdaptConfig,
    pub seed: u64,
}

impl TrainerState {
    /// Starts from a source-trained model: the student takes every
    /// non-backbone entry of `params` and the teacher is its copy.
    pub fn new(
        model_cfg: ModelConfig,
        params: &ParamStore,
        cfg: AdaptConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        init_model(&model_cfg, 0)?.check_same_layout(params)?;
        let mut frozen = params.filter_prefix(backbone::PREFIX);
        frozen.set_all_trainable(false);
        let mut student = ParamStore::new();
        for (n, p) in params.iter() {
            if !n.starts_with(backbone::PREFIX) {
                let mut p = p.clone();
                p.trainable = true;
                student.insert(n.clone(), p);
            }
        }
        let mut teacher = student.clone();
        teacher.set_all_trainable(false);
        let (dim, classes) = (model_cfg.head.dim, model_cfg.head.classes);
        Ok(TrainerState {
            model,
            frozen,
            student,
            teacher,
            stm_params: init_stm(dim, classes, derive_seed(seed, 3)),
            stm: Stm { dim, classes },
            moments: Moments::new(),
            stm_moments: Moments::new(),
            iteration: 0,
            cfg,
            seed,
        })
    }

    /// Backbone plus student entries, the deployable model.
    pub fn student_model(&self) -> ParamStore {
        let mut s = self.frozen.clone();
        s.extend(self.student.clone());
        s
    }

    fn step_seed(&self, pair: usize) -> u64 {
        derive_seed(derive_seed(self.seed, self.iteration), pair as u64)
    }

    fn patch_mask(&self, image: &Image, pair: usize) -> Result<Vec<u8>> {
        let mut g = rng(derive_seed(self.step_seed(pair), 2));
        random_patch_mask(
            image.height,
            image.width,
            self.cfg.mask_ratio,
            self.cfg.mask_cell,
            &mut g,
        )
    }

    /// Teacher-consistency loss of the student on a masked copy of `image`,
    /// without any update. The mask follows pair 0 of the current step.
    pub fn mask_loss_probe(&self, image: &Image) -> Result<f64> {
        let (tpred, _) = self.model.predict(&[&self.frozen, &self.teacher], image)?;
        let pseudo = pseudo_from_prediction(&tpred, self.cfg.tau);
        let masked = image.masked(&self.patch_mask(image, 0)?);
        let (spred, _) = self
            .model
            .predict(&[&self.frozen, &self.student], &masked)?;
        Ok(instance_loss(&spred, &pseudo.classes, &pseudo.masks)?.value)
    }

    /// One optimizer step over paired source and target batches.
    pub fn train_step(&mut self, src: &[SourceItem], tgt: &[TargetItem]) -> Result<LossBreakdown> {
        if src.is_empty() || src.len() != tgt.len() {
            return Err(Error::InvalidInput(format!(
                "{} source and {} target items",
                src.len(),
                tgt.len()
            )));
        }
        let mut grads = Grads::new();
        let mut stm_grads = Grads::new();
        let mut acc = LossBreakdown::default();
        for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
            let b = self.pair_step(i, s, t, &mut grads, &mut stm_grads)?;
            acc.add(&b);
        }
        let inv = 1.0 / src.len() as f64;
        acc.scale(inv);
        acc.total = acc.weighted_total(self.cfg.alpha, self.cfg.beta);
        if !acc.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "total loss at iteration {}: {acc:?}",
                self.iteration
            )));
        }
        grads.scale(inv);
        stm_grads.scale(inv);
        let lr = self.cfg.lr;
        adamw_step(
            &mut self.student,
            &grads,
            &mut self.moments,
            |_| lr,
            &self.cfg.adamw,
        )?;
        if !stm_grads.is_empty() {
            adamw_step(
                &mut self.stm_params,
                &stm_grads,
                &mut self.stm_moments,
                |_| lr,
                &self.cfg.adamw,
            )?;
        }
        ema_update(&mut self.teacher, &self.student, self.cfg.ema)?;
        self.iteration += 1;
        Ok(acc)
    }

    fn pair_step(
        &self,
        pair: usize,
        s: &SourceItem,
        t: &TargetItem,
        grads: &mut Grads,
        stm_grads: &mut Grads,
    ) -> Result<LossBreakdown> {
        let cfg = &self.cfg;
        let it = self.iteration;
        let m = &self.model;
        let nq = m.cfg.head.queries;
        let k = m.cfg.head.classes;
        let (grid, image) = (m.cfg.grid(), m.cfg.image());
        let students = [&self.frozen, &self.student];
        let mut out = LossBreakdown::default();

        let mut gt_src = GroundTruthSet::from_label_map(&s.label.data, k)?;
        gt_src.keep_largest(nq);
        let g = m.grad(&students, s.image, |p| {
            checked("L_src", it, mask_cls_loss(p, &gt_src, &cfg.weights)?.loss)
        })?;
        out.src = g.loss;
        grads.add_scaled(&g.grads, 1.0);
        let src_features = g.features;

        let (tpred, t_features) = m.predict(&[&self.frozen, &self.teacher], t.image)?;
        let pseudo = pseudo_from_prediction(&tpred, cfg.tau);
        out.conf = pseudo.confidence;

        if !cfg.ablation.no_stm {
            let regions = pool_regions(&src_features, grid, image, &masks_from_map(s.regions))?;
            if !regions.masks.is_empty() {
                let mut gt = GroundTruthSet::from_label_map(&s.label.data, k)?;
                gt.keep_largest(regions.masks.len());
                let (v, g, _) = self.stm.grad(&self.stm_params, &regions, image, |p| {
                    checked("L_src_stm", it, mask_cls_loss(p, &gt, &cfg.weights)?.loss)
                })?;
                out.src_stm = v;
                stm_grads.add_scaled(&g, 1.0);
            }
        }

        if !cfg.ablation.no_mix {
            let mix = class_mix(
                s.image,
                s.label,
                t.image,
                &pseudo,
                &mut rng(derive_seed(self.step_seed(pair), 1)),
            )?;
            let g = m.grad(&students, &mix.image, |p| {
                checked("L_mix", it, logit_loss(p, &mix.label, &mix.weight)?)
            })?;
            out.mix = g.loss;
            if cfg.alpha != 0.0 {
                grads.add_scaled(&g.grads, cfg.alpha);
            }
            if !cfg.ablation.no_stm {
                let map = mix_regions(s.regions, t.regions, &mix.mask)?;
                let regions = pool_regions(&g.features, grid, image, &masks_from_map(&map))?;
                if !regions.masks.is_empty() {
                    let (v, g, _) = self.stm.grad(&self.stm_params, &regions, image, |p| {
                        checked("L_mix_stm", it, logit_loss(p, &mix.label, &mix.weight)?)
                    })?;
                    out.mix_stm = v;
                    if cfg.alpha != 0.0 {
                        stm_grads.add_scaled(&g, cfg.alpha);
                    }
                }
            }
        }

        if !cfg.ablation.no_mask {
            let mut stm_target = None;
            if !cfg.ablation.no_stm {
                let regions = pool_regions(&t_features, grid, image, &masks_from_map(t.regions))?;
                if !regions.masks.is_empty() {
                    let pred = self.stm.predict(&self.stm_params, &regions, image)?;
                    let (classes, masks, conf) = group_by_class(&pred, &regions.masks, cfg.tau);
                    let mut gt = GroundTruthSet { classes, masks };
                    gt.keep_largest(nq);
                    stm_target = Some((gt, conf));
                }
            }
            let masked = t.image.masked(&self.patch_mask(t.image, pair)?);
            let (mut l_mask, mut l_mask_stm) = (0.0, 0.0);
            let g = m.grad(&students, &masked, |p| {
                let a = checked(
                    "L_mask",
                    it,
                    instance_loss(p, &pseudo.classes, &pseudo.masks)?,
                )?;
                l_mask = a.value;
                match &stm_target {
                    Some((gt, conf)) => {
                        let b = mask_cls_loss(p, gt, &cfg.weights)?.loss.scaled(*conf);
                        let b = checked("L_mask_stm", it, b)?;
                        l_mask_stm = b.value;
                        Ok(sum(a, b))
                    }
                    None => Ok(a),
                }
            })?;
            out.mask = l_mask;
            out.mask_stm = l_mask_stm;
            if cfg.beta != 0.0 {
                grads.add_scaled(&g.grads, cfg.beta);
            }
        }
        Ok(out)
    }
}

//! Frozen backbone + optional refinement + decode head, in the three
//! training regimes compared throughout: head only, full fine-tuning and
//! token refinement.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{self, Backbone, BackboneConfig, NoInjection};
use crate::error::{Error, Result};
use crate::head::{self, Head, HeadConfig, LossOutput, MaskPrediction};
use crate::image::Image;
use crate::numeric::{derive_seed, Binding, Grads, Mat, ParamStore, Tape, Var};
use crate::rein::{self, Rein, ReinConfig, ReinInjector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Backbone frozen, head trained.
    Freeze,
    /// Backbone and head trained.
    Full,
    /// Backbone frozen, refinement tokens and head trained.
    Rein,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Freeze => "freeze",
            Mode::Full => "full",
            Mode::Rein => "rein",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "freeze" => Ok(Mode::Freeze),
            "full" => Ok(Mode::Full),
            "rein" => Ok(Mode::Rein),
            _ => Err(format!(
                "unknown mode {s:?} (expected freeze, full or rein)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rein: ReinConfig,
    pub head: HeadConfig,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rein: ReinConfig::default(),
            head: HeadConfig::default(),
            mode: Mode::Rein,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        let (b, h) = (&self.backbone, &self.head);
        if h.dim != b.dim {
            return Err(Error::Config(format!(
                "head dim {} != backbone dim {}",
                h.dim, b.dim
            )));
        }
        if self.mode == Mode::Rein {
            let r = &self.rein;
            r.validate()?;
            if r.dim != b.dim || r.layers != b.layers {
                return Err(Error::Config(format!(
                    "refinement is {}x{} (layers x dim), backbone is {}x{}",
                    r.layers, r.dim, b.layers, b.dim
                )));
            }
            if r.use_link && (r.tokens != h.queries || r.query_dim != h.query_dim) {
                return Err(Error::Config(format!(
                    "linked queries are {}x{}, head expects {}x{}",
                    r.tokens, r.query_dim, h.queries, h.query_dim
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.backbone.grid();
        (g, g)
    }

    pub fn image(&self) -> (usize, usize) {
        (self.backbone.image, self.backbone.image)
    }

    pub fn uses_rein(&self) -> bool {
        self.mode == Mode::Rein
    }
}

/// Fresh parameters. The backbone depends only on its own config seed (it
/// plays the pretrained model); refinement and head draw from `seed`, and
/// the head's draw is the same in every mode.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = backbone::init_frozen_backbone(&cfg.backbone)?;
    if cfg.mode == Mode::Full {
        s.set_trainable_prefix(backbone::PREFIX, true);
    }
    s.extend(head::init_head(&cfg.head, derive_seed(seed, 1))?);
    if cfg.uses_rein() {
        s.extend(rein::init_rein(&cfg.rein, derive_seed(seed, 2))?);
    }
    Ok(s)
}

/// Places every store on one tape; gradients are requested for trainable
/// entries only.
pub fn bind_all(tape: &mut Tape, stores: &[&ParamStore], frozen: bool) -> Binding {
    let mut b = Binding::default();
    for s in stores {
        b.merge(s.bind(tape, frozen));
    }
    b
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub f_out: Var,
    pub head: head::HeadVars,
}

/// A forward result with the loss gradient already pulled back.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: f64,
    pub grads: Grads,
    pub features: Mat,
    pub prediction: MaskPrediction,
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    rein: Option<Rein>,
    head: Head,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            backbone: Backbone::new(cfg.backbone)?,
            rein: if cfg.uses_rein() {
                Some(Rein::new(cfg.rein)?)
            } else {
                None
            },
            head: Head::new(cfg.head)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<ForwardVars> {
        let (f_out, linked) = match &self.rein {
            Some(rein) => {
                let prepared = rein.prepare(tape, b);
                let mut inj = ReinInjector {
                    rein,
                    binding: b,
                    prepared: Some(&prepared),
                };
                let feats = self.backbone.forward(tape, b, image, &mut inj)?;
                let linked = if rein.cfg.use_link {
                    Some(rein.link_queries(tape, b, &prepared))
                } else {
                    None
                };
                (feats.out, linked)
            }
            None => (
                self.backbone.forward(tape, b, image, &mut NoInjection)?.out,
                None,
            ),
        };
        let head = self.head.forward(tape, b, f_out, linked)?;
        Ok(ForwardVars { f_out, head })
    }

    fn prediction(&self, tape: &Tape, v: &ForwardVars) -> Result<MaskPrediction> {
        MaskPrediction::new(
            tape.value(v.head.class_logits).clone(),
            tape.value(v.head.mask_logits).clone(),
            self.cfg.grid(),
            self.cfg.image(),
        )
    }

    /// Inference: prediction and final backbone features.
    pub fn predict(&self, stores: &[&ParamStore], image: &Image) -> Result<(MaskPrediction, Mat)> {
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, stores, true);
        let v = self.forward(&mut tape, &b, image)?;
        Ok((self.prediction(&tape, &v)?, tape.value(v.f_out).clone()))
    }

    /// Final backbone features of `image`; only meaningful as a cache when
    /// nothing upstream of the head is trained.
    pub fn features(&self, stores: &[&ParamStore], image: &Image) -> Result<Mat> {
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, stores, true);
        let out = self
            .backbone
            .forward(&mut tape, &b, image, &mut NoInjection)?
            .out;
        Ok(tape.value(out).clone())
    }

    /// Whether the head input is a fixed function of the image.
    pub fn features_are_fixed(&self, stores: &[&ParamStore]) -> bool {
        self.rein.is_none()
            && stores.iter().all(|s| {
                s.iter()
                    .all(|(n, p)| !(n.starts_with(backbone::PREFIX) && p.trainable))
            })
    }

    pub fn predict_from_features(
        &self,
        stores: &[&ParamStore],
        f_out: &Mat,
    ) -> Result<MaskPrediction> {
        self.require_head_only()?;
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, stores, true);
        let f = tape.constant(f_out.clone());
        let h = self.head.forward(&mut tape, &b, f, None)?;
        MaskPrediction::new(
            tape.value(h.class_logits).clone(),
            tape.value(h.mask_logits).clone(),
            self.cfg.grid(),
            self.cfg.image(),
        )
    }

    fn require_head_only(&self) -> Result<()> {
        if self.rein.is_some() {
            return Err(Error::InvalidInput(
                "cached features bypass the refinement module".into(),
            ));
        }
        Ok(())
    }

    fn backprop(
        &self,
        tape: &Tape,
        b: &Binding,
        stores: &[&ParamStore],
        v: &ForwardVars,
        loss: impl FnOnce(&MaskPrediction) -> Result<LossOutput>,
    ) -> Result<GradResult> {
        let prediction = self.prediction(tape, v)?;
        let out = loss(&prediction)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut g = tape.backward(&[
            (v.head.class_logits, out.d_class),
            (v.head.mask_logits, out.d_mask),
        ]);
        let mut grads = Grads::new();
        for s in stores {
            b.accumulate(&mut g, &mut grads, s);
        }
        Ok(GradResult {
            loss: out.value,
            grads,
            features: tape.value(v.f_out).clone(),
            prediction,
        })
    }

    /// Loss value and gradients for every trainable entry of `stores`.
    pub fn grad(
        &self,
        stores: &[&ParamStore],
        image: &Image,
        loss: impl FnOnce(&MaskPrediction) -> Result<LossOutput>,
    ) -> Result<GradResult> {
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, stores, false);
        let v = self.forward(&mut tape, &b, image)?;
        self.backprop(&tape, &b, stores, &v, loss)
    }

    /// As [`grad`](Self::grad), starting from cached backbone features.
    pub fn grad_from_features(
        &self,
        stores: &[&ParamStore],
        f_out: &Mat,
        loss: impl FnOnce(&MaskPrediction) -> Result<LossOutput>,
    ) -> Result<GradResult> {
        self.require_head_only()?;
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, stores, false);
        let f_out = tape.constant(f_out.clone());
        let head = self.head.forward(&mut tape, &b, f_out, None)?;
        self.backprop(&tape, &b, stores, &ForwardVars { f_out, head }, loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{mask_cls_loss, GroundTruthSet, MaskClsWeights};
    use crate::numeric::finite_diff_check;
    use crate::synthdata::{gen_sample, Domain, DomainSpec};

    fn cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn mode_parameter_sets() {
        let f = init_model(&cfg(Mode::Freeze), 1).unwrap();
        assert!(f.names().all(|n| !n.starts_with(rein::PREFIX)));
        assert!(f
            .iter()
            .all(|(n, p)| p.trainable == n.starts_with(head::PREFIX)));
        let full = init_model(&cfg(Mode::Full), 1).unwrap();
        assert!(full.iter().all(|(_, p)| p.trainable));
        let r = init_model(&cfg(Mode::Rein), 1).unwrap();
        assert!(r
            .iter()
            .all(|(n, p)| p.trainable != n.starts_with(backbone::PREFIX)));
        for (n, p) in f.iter() {
            assert_eq!(p.data(), r.get(n).unwrap().data(), "{n}");
        }
    }

    #[test]
    fn rein_at_init_equals_freeze() {
        let rec = gen_sample(&DomainSpec::default(), Domain::Source, 0);
        let f = init_model(&cfg(Mode::Freeze), 5).unwrap();
        let r = init_model(&cfg(Mode::Rein), 5).unwrap();
        let (pf, ff) = Model::new(cfg(Mode::Freeze))
            .unwrap()
            .predict(&[&f], &rec.image)
            .unwrap();
        let (pr, fr) = Model::new(cfg(Mode::Rein))
            .unwrap()
            .predict(&[&r], &rec.image)
            .unwrap();
        assert!(ff.max_abs_diff(&fr) < 1e-12);
        assert!(pf.class_logits.max_abs_diff(&pr.class_logits) < 1e-12);
        assert!(pf.mask_logits.max_abs_diff(&pr.mask_logits) < 1e-12);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let mut c = cfg(Mode::Rein);
        c.head.queries = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mode = Mode::Freeze;
        assert!(c.validate().is_ok());
        c.head.dim = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cached_features_match_full_forward() {
        let c = cfg(Mode::Freeze);
        let p = init_model(&c, 2).unwrap();
        let m = Model::new(c).unwrap();
        let rec = gen_sample(&DomainSpec::default(), Domain::Source, 1);
        let (pred, f) = m.predict(&[&p], &rec.image).unwrap();
        assert!(m.features_are_fixed(&[&p]));
        assert_eq!(m.features(&[&p], &rec.image).unwrap(), f);
        assert_eq!(m.predict_from_features(&[&p], &f).unwrap(), pred);
    }

    /// Refinement and head parameters through the whole network and the
    /// matched loss.
    #[test]
    fn end_to_end_gradcheck() {
        let c = ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                ..Default::default()
            },
            ..cfg(Mode::Rein)
        };
        let c = ModelConfig {
            rein: ReinConfig {
                layers: 2,
                ..c.rein
            },
            ..c
        };
        let mut p = init_model(&c, 3).unwrap();
        // move off the zero-initialized projections so every path is live
        let mut g = crate::numeric::rng(4);
        for (n, v) in p.iter_mut() {
            if !n.starts_with(backbone::PREFIX) {
                for x in v.data_mut() {
                    *x += rand::Rng::random_range(&mut g, -0.1..0.1);
                }
            }
        }
        let rec = gen_sample(&DomainSpec::default(), Domain::Source, 2);
        let gt = {
            let mut classes = Vec::new();
            let mut masks = Vec::new();
            for k in 0..6u8 {
                let m: Vec<u8> = rec.label.data.iter().map(|&l| (l == k) as u8).collect();
                if m.contains(&1) {
                    classes.push(k as usize);
                    masks.push(m);
                }
            }
            GroundTruthSet::new(classes, masks, 6, 1024).unwrap()
        };
        let w = MaskClsWeights::default();
        let m = Model::new(c).unwrap();
        let r = m
            .grad(&[&p], &rec.image, |pr| Ok(mask_cls_loss(pr, &gt, &w)?.loss))
            .unwrap();
        let trainable = p.trainable_only();
        let frozen = p.filter_prefix(backbone::PREFIX);
        let rep = finite_diff_check(
            &trainable,
            &r.grads,
            |t| {
                let (pr, _) = m.predict(&[&frozen, t], &rec.image)?;
                Ok(mask_cls_loss(&pr, &gt, &w)?.loss.value)
            },
            1e-5,
            1e-4,
            9,
        )
        .unwrap();
        assert!(rep.pass, "worst {:?}", rep.worst());
    }
}

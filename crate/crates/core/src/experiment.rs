//! Experiment configuration and the drivers behind the command-line tool:
//! source training, adaptation and evaluation.
//!
//! Config files are flat `key = value` text. Keys, with defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | seed of head, refinement, STM init and of all sampling |
//! | `mode` | rein | freeze, full or rein |
//! | `data.dir` | data | dataset root |
//! | `data.n_source`, `data.n_target` | 500, 500 | images per domain for `gen-data` |
//! | `data.*` | | synthetic domain spec (classes, size, shift, ...) |
//! | `backbone.layers/dim/heads/patch/seed` | 4/32/4/4/0 | frozen transformer; image side is `data.size` |
//! | `rein.tokens/rank/query_dim/heads` | 8/4/16/4 | refinement tokens |
//! | `rein.use_link/use_lowrank/use_multihead/use_gelu` | true | variant switches |
//! | `head.queries` | 8 | decode queries; classes follow `data.classes` |
//! | `loss.cls/bce/dice/no_object` | 2/5/5/0.1 | mask-classification weights |
//! | `train.iterations/batch` | 3000/4 | source training |
//! | `train.lr/lr_backbone/weight_decay` | 1e-4/1e-5/0.01 | AdamW |
//! | `adapt.iterations/batch` | 3000/4 | adaptation |
//! | `adapt.alpha/beta/ema/tau` | 1/1/0.999/0.968 | branch weights, teacher momentum, threshold |
//! | `adapt.mask_ratio/mask_cell` | 0.5/4 | masked-image branch |
//! | `adapt.rcs/rcs_temperature` | true/0.1 | rare-class sampling of source images |
//! | `adapt.lr` | 1e-4 | |
//! | `adapt.ablate` | none | comma list of no_mix, no_mask, no_stm |

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::adapt::{AdaptConfig, RareClassSampler, SourceItem, TargetItem, TrainerState};
use crate::backbone;
use crate::error::{Error, Result};
use crate::evalkit::{miou, ConfusionMatrix, IouReport};
use crate::head::{mask_cls_loss, GroundTruthSet, MaskClsWeights};
use crate::image::{LabelMap, IGNORE};
use crate::kv::KvReader;
use crate::model::{init_model, Model, ModelConfig};
use crate::numeric::{adamw_step, derive_seed, rng, AdamWConfig, Grads, Mat, Moments, ParamStore};
use crate::synthdata::{Dataset, Domain, DomainSpec, Sample, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch: 4,
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DomainSpec,
    pub data_dir: PathBuf,
    pub n_source: usize,
    pub n_target: usize,
    pub weights: MaskClsWeights,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub adapt_iterations: usize,
    pub adapt_batch: usize,
    pub rcs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DomainSpec::default(),
            data_dir: PathBuf::from("data"),
            n_source: 500,
            n_target: 500,
            weights: MaskClsWeights::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            adapt_iterations: 3000,
            adapt_batch: 4,
            rcs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut c = ExperimentConfig::default();
        r.set("seed", &mut c.seed)?;
        r.set("mode", &mut c.model.mode)?;
        if let Some(d) = r.take::<String>("data.dir")? {
            c.data_dir = PathBuf::from(d);
        }
        r.set("data.n_source", &mut c.n_source)?;
        r.set("data.n_target", &mut c.n_target)?;
        c.data.apply_kv(&mut r, "data.")?;

        let b = &mut c.model.backbone;
        r.set("backbone.layers", &mut b.layers)?;
        r.set("backbone.dim", &mut b.dim)?;
        r.set("backbone.heads", &mut b.heads)?;
        r.set("backbone.patch", &mut b.patch)?;
        r.set("backbone.seed", &mut b.seed)?;

        let rc = &mut c.model.rein;
        r.set("rein.tokens", &mut rc.tokens)?;
        r.set("rein.rank", &mut rc.rank)?;
        r.set("rein.query_dim", &mut rc.query_dim)?;
        r.set("rein.heads", &mut rc.heads)?;
        r.set("rein.use_link", &mut rc.use_link)?;
        r.set("rein.use_lowrank", &mut rc.use_lowrank)?;
        r.set("rein.use_multihead", &mut rc.use_multihead)?;
        r.set("rein.use_gelu", &mut rc.use_gelu)?;
        r.set("head.queries", &mut c.model.head.queries)?;

        r.set("loss.cls", &mut c.weights.cls)?;
        r.set("loss.bce", &mut c.weights.bce)?;
        r.set("loss.dice", &mut c.weights.dice)?;
        r.set("loss.no_object", &mut c.weights.no_object)?;

        r.set("train.iterations", &mut c.train.iterations)?;
        r.set("train.batch", &mut c.train.batch)?;
        r.set("train.lr", &mut c.train.lr)?;
        r.set("train.lr_backbone", &mut c.train.lr_backbone)?;
        r.set("train.weight_decay", &mut c.train.weight_decay)?;

        r.set("adapt.iterations", &mut c.adapt_iterations)?;
        r.set("adapt.batch", &mut c.adapt_batch)?;
        let a = &mut c.adapt;
        r.set("adapt.alpha", &mut a.alpha)?;
        r.set("adapt.beta", &mut a.beta)?;
        r.set("adapt.ema", &mut a.ema)?;
        r.set("adapt.tau", &mut a.tau)?;
        r.set("adapt.mask_ratio", &mut a.mask_ratio)?;
        r.set("adapt.mask_cell", &mut a.mask_cell)?;
        r.set("adapt.rcs_temperature", &mut a.rcs_temperature)?;
        r.set("adapt.lr", &mut a.lr)?;
        r.set("adapt.ablate", &mut a.ablation)?;
        r.set("adapt.rcs", &mut c.rcs)?;
        r.finish()?;
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Propagates shared dimensions: image side, channel width, layer
    /// count, classes and query width.
    pub fn sync(&mut self) {
        let m = &mut self.model;
        m.backbone.image = self.data.size;
        m.rein.dim = m.backbone.dim;
        m.rein.layers = m.backbone.layers;
        m.head.dim = m.backbone.dim;
        m.head.classes = self.data.classes;
        m.head.query_dim = m.rein.query_dim;
        self.adapt.weights = self.weights;
        self.adapt.adamw.weight_decay = self.train.weight_decay;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.adapt.validate()?;
        let t = &self.train;
        if t.iterations == 0 || t.batch == 0 || self.adapt_iterations == 0 || self.adapt_batch == 0
        {
            return Err(Error::Config(
                "iteration counts and batch sizes must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr_backbone >= 0.0 && t.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rates must be positive and weight decay non-negative".into(),
            ));
        }
        if self.model.head.queries < self.data.classes {
            return Err(Error::Config(format!(
                "{} queries cannot cover {} classes",
                self.model.head.queries, self.data.classes
            )));
        }
        Ok(())
    }

    /// Resolved configuration in the file format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let (b, r) = (&m.backbone, &m.rein);
        let a = &self.adapt;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("mode", m.mode.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("data.n_source", self.n_source.to_string()),
            ("data.n_target", self.n_target.to_string()),
            ("backbone.layers", b.layers.to_string()),
            ("backbone.dim", b.dim.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.patch", b.patch.to_string()),
            ("backbone.seed", b.seed.to_string()),
            ("rein.tokens", r.tokens.to_string()),
            ("rein.rank", r.rank.to_string()),
            ("rein.query_dim", r.query_dim.to_string()),
            ("rein.heads", r.heads.to_string()),
            ("rein.use_link", r.use_link.to_string()),
            ("rein.use_lowrank", r.use_lowrank.to_string()),
            ("rein.use_multihead", r.use_multihead.to_string()),
            ("rein.use_gelu", r.use_gelu.to_string()),
            ("head.queries", m.head.queries.to_string()),
            ("loss.cls", self.weights.cls.to_string()),
            ("loss.bce", self.weights.bce.to_string()),
            ("loss.dice", self.weights.dice.to_string()),
            ("loss.no_object", self.weights.no_object.to_string()),
            ("train.iterations", self.train.iterations.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.lr_backbone", self.train.lr_backbone.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("adapt.iterations", self.adapt_iterations.to_string()),
            ("adapt.batch", self.adapt_batch.to_string()),
            ("adapt.alpha", a.alpha.to_string()),
            ("adapt.beta", a.beta.to_string()),
            ("adapt.ema", a.ema.to_string()),
            ("adapt.tau", a.tau.to_string()),
            ("adapt.mask_ratio", a.mask_ratio.to_string()),
            ("adapt.mask_cell", a.mask_cell.to_string()),
            ("adapt.rcs", self.rcs.to_string()),
            ("adapt.rcs_temperature", a.rcs_temperature.to_string()),
            ("adapt.lr", a.lr.to_string()),
            ("adapt.ablate", a.ablation.to_string()),
        ];
        let mut s: String = rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        s.push_str(&self.data.to_kv_prefixed("data."));
        s
    }
}

/// Per-parameter learning rate: backbone entries use the backbone rate.
pub fn lr_for(train: &TrainConfig) -> impl Fn(&str) -> f64 {
    let t = *train;
    move |name: &str| {
        if name.starts_with(backbone::PREFIX) {
            t.lr_backbone
        } else {
            t.lr
        }
    }
}

/// Completes a checkpoint into a model store: missing backbone entries are
/// rebuilt from the config seed, and trainable flags follow the mode.
pub fn assemble(cfg: &ModelConfig, mut store: ParamStore) -> Result<ParamStore> {
    let reference = init_model(cfg, 0)?;
    if !store.names().any(|n| n.starts_with(backbone::PREFIX)) {
        store.extend(backbone::init_frozen_backbone(&cfg.backbone)?);
    }
    reference
        .check_same_layout(&store)
        .map_err(|e| Error::Config(format!("checkpoint does not fit the config: {e}")))?;
    for (n, p) in store.iter_mut() {
        p.trainable = reference.get(n).is_some_and(|r| r.trainable);
    }
    Ok(store)
}

/// Semantic mIoU of `stores` over labeled `samples`.
pub fn evaluate(model: &Model, stores: &[&ParamStore], samples: &[&Sample]) -> Result<IouReport> {
    let k = model.cfg.head.classes;
    let mut cm = ConfusionMatrix::new(k);
    for s in samples {
        let label = s.label.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} sample {} has no labels loaded",
                s.domain, s.index
            ))
        })?;
        let (pred, _) = model.predict(stores, &s.image)?;
        cm.accumulate(&pred.semantic_argmax(), &label.data, IGNORE)?;
    }
    miou(&cm)
}

fn ground_truth(label: &LabelMap, cfg: &ModelConfig) -> Result<GroundTruthSet> {
    let mut gt = GroundTruthSet::from_label_map(&label.data, cfg.head.classes)?;
    gt.keep_largest(cfg.head.queries);
    Ok(gt)
}

fn source_label(s: &Sample) -> Result<&LabelMap> {
    s.label
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("source sample {} has no labels", s.index)))
}

/// Supervised source training. Writes one `{"iter", "loss"}` line per
/// step to `log` and returns the trained store.
pub fn train_dg(cfg: &ExperimentConfig, ds: &Dataset, log: &mut dyn Write) -> Result<ParamStore> {
    cfg.validate()?;
    let model = Model::new(cfg.model)?;
    let mut params = init_model(&cfg.model, cfg.seed)?;
    let train = ds.select(Domain::Source, Some(Split::Train));
    if train.is_empty() {
        return Err(Error::InvalidInput("no source training samples".into()));
    }
    let gts = train
        .iter()
        .map(|s| ground_truth(source_label(s)?, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    let cached = model.features_are_fixed(&[&params]);
    let mut features: Vec<Option<Mat>> = vec![None; train.len()];
    let mut moments = Moments::new();
    let adamw = AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        ..Default::default()
    };
    let lr = lr_for(&cfg.train);
    for it in 0..cfg.train.iterations {
        let mut g = rng(derive_seed(derive_seed(cfg.seed, 0xD6), it as u64));
        let mut grads = Grads::new();
        let mut loss = 0.0;
        for _ in 0..cfg.train.batch {
            let i = g.random_range(0..train.len());
            let lf = |p: &_| Ok(mask_cls_loss(p, &gts[i], &cfg.weights)?.loss);
            let r = if cached {
                if features[i].is_none() {
                    features[i] = Some(model.features(&[&params], &train[i].image)?);
                }
                model.grad_from_features(&[&params], features[i].as_ref().expect("cached"), lf)
            } else {
                model.grad(&[&params], &train[i].image, lf)
            }
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at iteration {it}, source sample {}",
                    train[i].index
                )),
                e => e,
            })?;
            loss += r.loss;
            grads.add_scaled(&r.grads, 1.0);
        }
        let inv = 1.0 / cfg.train.batch as f64;
        grads.scale(inv);
        adamw_step(&mut params, &grads, &mut moments, &lr, &adamw)?;
        writeln!(
            log,
            "{}",
            serde_json::json!({ "iter": it, "loss": loss * inv })
        )
        .map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
    }
    Ok(params)
}

/// Adapts a source-trained store to the target domain. One breakdown line
/// per step goes to `log`.
pub fn adapt_da(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    dg: &ParamStore,
    log: &mut dyn Write,
) -> Result<TrainerState> {
    cfg.validate()?;
    let mut state = TrainerState::new(cfg.model, dg, cfg.adapt, cfg.seed)?;
    let source = ds.select(Domain::Source, Some(Split::Train));
    let target = ds.select(Domain::Target, Some(Split::Train));
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput(
            "adaptation needs source and target training samples".into(),
        ));
    }
    let labels = source
        .iter()
        .map(|s| source_label(s))
        .collect::<Result<Vec<_>>>()?;
    let sampler = if cfg.rcs {
        Some(RareClassSampler::from_labels(
            &labels,
            cfg.model.head.classes,
            cfg.adapt.rcs_temperature,
        )?)
    } else {
        None
    };
    for it in 0..cfg.adapt_iterations {
        let mut g = rng(derive_seed(derive_seed(cfg.seed, 0xDA), it as u64));
        let mut src = Vec::with_capacity(cfg.adapt_batch);
        let mut tgt = Vec::with_capacity(cfg.adapt_batch);
        for _ in 0..cfg.adapt_batch {
            let i = match &sampler {
                Some(s) => s.sample(&mut g),
                None => g.random_range(0..source.len()),
            };
            let j = g.random_range(0..target.len());
            src.push(SourceItem {
                image: &source[i].image,
                label: labels[i],
                regions: &source[i].oracle,
            });
            tgt.push(TargetItem {
                image: &target[j].image,
                regions: &target[j].oracle,
            });
        }
        let b = state.train_step(&src, &tgt)?;
        writeln!(log, "{}", b.to_json_line(it as u64))
            .map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
    }
    Ok(state)
}

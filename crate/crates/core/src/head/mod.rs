//! Mask-classification decode head and the segmentation losses.
//!
//! The head is one cross-attention block followed by a per-query MLP. Mask
//! logits are dot products between query embeddings and per-patch pixel
//! embeddings, so they live on the patch grid and are resampled to the label
//! grid inside the losses.

mod loss;
mod upsample;

pub use loss::{
    dice_bce, dice_bce_eps, instance_loss, logit_loss, logit_loss_from_probs, mask_cls_loss,
    semantic_aggregate, DiceBce, GroundTruthSet, LossOutput, MaskClsWeights, MatchedLoss, DICE_EPS,
    LOGIT_EPS,
};
pub use upsample::Upsampler;

use crate::error::{Error, Result};
use crate::numeric::tape::softmax_rows;
use crate::numeric::{rng, Binding, Mat, ParamStore, Tape, Var};

pub const PREFIX: &str = "head.";
pub const INIT_STD: f64 = 0.02;
/// Learned query embeddings start at unit scale so queries are distinct.
pub const QUERY_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    /// Number of queries `N_q`.
    pub queries: usize,
    /// Number of real classes `K`; logits carry one more column for ∅.
    pub classes: usize,
    /// Backbone feature dim `c`.
    pub dim: usize,
    /// Query dim `c′`.
    pub query_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            queries: 8,
            classes: 6,
            dim: 32,
            query_dim: 16,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.classes == 0 || self.dim == 0 || self.query_dim == 0 {
            return Err(Error::Config(format!(
                "head sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Index of the no-object column.
    pub fn no_object(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        let (q, k, c, d) = (self.queries, self.classes, self.dim, self.query_dim);
        q * d + (c * d + d) + 3 * (d * d + d) + (d * (k + 1) + k + 1)
    }
}

fn name(leaf: &str) -> String {
    format!("{PREFIX}{leaf}")
}

pub fn init_head(cfg: &HeadConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let (q, k, c, d) = (cfg.queries, cfg.classes, cfg.dim, cfg.query_dim);
    let mut g = rng(seed);
    let mut s = ParamStore::new();
    s.insert_normal(&name("query_embed"), &[q, d], QUERY_INIT_STD, true, &mut g);
    for (leaf, rows, cols) in [
        ("pixel", c, d),
        ("attn_out", d, d),
        ("mlp1", d, d),
        ("mlp2", d, d),
        ("cls", d, k + 1),
    ] {
        s.insert_normal(
            &name(&format!("{leaf}.w")),
            &[rows, cols],
            INIT_STD,
            true,
            &mut g,
        );
        s.insert_normal(&name(&format!("{leaf}.b")), &[cols], INIT_STD, true, &mut g);
    }
    Ok(s)
}

/// Tape handles for one head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub class_logits: Var,
    pub mask_logits: Var,
}

/// Value-level head output: `N_q × (K+1)` class logits and `N_q × (H_f·W_f)`
/// mask logits on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub class_logits: Mat,
    pub mask_logits: Mat,
    pub grid: (usize, usize),
    pub image: (usize, usize),
}

impl MaskPrediction {
    pub fn new(
        class_logits: Mat,
        mask_logits: Mat,
        grid: (usize, usize),
        image: (usize, usize),
    ) -> Result<Self> {
        if class_logits.rows() != mask_logits.rows() {
            return Err(Error::Shape(format!(
                "{} class rows vs {} mask rows",
                class_logits.rows(),
                mask_logits.rows()
            )));
        }
        if class_logits.cols() < 2 {
            return Err(Error::Shape(
                "class logits need at least one class and ∅".into(),
            ));
        }
        if mask_logits.cols() != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "mask logits have {} cols, grid {grid:?}",
                mask_logits.cols()
            )));
        }
        if grid.0 == 0 || grid.1 == 0 || image.0 < grid.0 || image.1 < grid.1 {
            return Err(Error::Shape(format!(
                "grid {grid:?} does not fit image {image:?}"
            )));
        }
        Ok(MaskPrediction {
            class_logits,
            mask_logits,
            grid,
            image,
        })
    }

    pub fn queries(&self) -> usize {
        self.class_logits.rows()
    }

    /// Number of real classes (∅ excluded).
    pub fn classes(&self) -> usize {
        self.class_logits.cols() - 1
    }

    pub fn pixels(&self) -> usize {
        self.image.0 * self.image.1
    }

    pub fn upsampler(&self) -> Upsampler {
        Upsampler::new(self.grid, self.image)
    }

    pub fn class_probs(&self) -> Mat {
        softmax_rows(&self.class_logits)
    }

    /// Mask logits resampled to the image grid.
    pub fn upsampled_logits(&self) -> Mat {
        let up = self.upsampler();
        let mut out = Mat::zeros(self.queries(), self.pixels());
        for q in 0..self.queries() {
            up.forward_row(self.mask_logits.row(q), out.row_mut(q));
        }
        out
    }

    /// Sigmoid mask probabilities on the image grid.
    pub fn mask_probs(&self) -> Mat {
        self.upsampled_logits().map(sigmoid)
    }

    /// Per-pixel class ids from the aggregated semantic scores.
    pub fn semantic_argmax(&self) -> Vec<u8> {
        let s = semantic_aggregate(&self.class_probs(), &self.mask_probs());
        (0..s.cols())
            .map(|x| {
                let mut best = 0;
                for k in 1..s.rows() {
                    if s.get(k, x) > s.get(best, x) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Head {
    pub cfg: HeadConfig,
}

impl Head {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Head { cfg })
    }

    /// Runs the head on `f_out` (n × c). `linked` queries, when given, are
    /// added to the learned query embeddings.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        f_out: Var,
        linked: Option<Var>,
    ) -> Result<HeadVars> {
        let (q, c, d) = (self.cfg.queries, self.cfg.dim, self.cfg.query_dim);
        let fv = tape.value(f_out);
        if fv.cols() != c {
            return Err(Error::Shape(format!(
                "head expects {c} feature channels, got {}",
                fv.cols()
            )));
        }
        let mut queries = b.var(&name("query_embed"));
        if let Some(l) = linked {
            let lv = tape.value(l);
            if lv.rows() != q || lv.cols() != d {
                return Err(Error::Shape(format!(
                    "linked queries are {}×{}, head expects {q}×{d}",
                    lv.rows(),
                    lv.cols()
                )));
            }
            queries = tape.add(queries, l);
        }
        let lin = |tape: &mut Tape, x: Var, leaf: &str| {
            tape.linear(
                x,
                b.var(&name(&format!("{leaf}.w"))),
                b.var(&name(&format!("{leaf}.b"))),
            )
        };
        let pix = lin(tape, f_out, "pixel");
        let scores = tape.matmul_t(queries, false, pix, true);
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, pix);
        let ctx = lin(tape, ctx, "attn_out");
        let q1 = tape.add(queries, ctx);
        let h = lin(tape, q1, "mlp1");
        let h = tape.gelu(h);
        let h = lin(tape, h, "mlp2");
        let q2 = tape.add(q1, h);
        let class_logits = lin(tape, q2, "cls");
        let mask_logits = tape.matmul_t(q2, false, pix, true);
        Ok(HeadVars {
            class_logits,
            mask_logits,
        })
    }
}

/// Value-level head evaluation.
pub fn head_forward(
    cfg: &HeadConfig,
    params: &ParamStore,
    f_out: &Mat,
    linked: Option<&Mat>,
    grid: (usize, usize),
    image: (usize, usize),
) -> Result<MaskPrediction> {
    if f_out.rows() != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "{} feature rows for grid {grid:?}",
            f_out.rows()
        )));
    }
    let head = Head::new(*cfg)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let f = tape.constant(f_out.clone());
    let l = linked.map(|m| tape.constant(m.clone()));
    let v = head.forward(&mut tape, &b, f, l)?;
    MaskPrediction::new(
        tape.value(v.class_logits).clone(),
        tape.value(v.mask_logits).clone(),
        grid,
        image,
    )
}

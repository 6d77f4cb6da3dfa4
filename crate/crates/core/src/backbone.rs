//! Frozen mini vision transformer standing in for a pre-trained foundation
//! model, with a hook to inject per-layer feature deltas.
//!
//! Layer `i` receives the previous layer's output plus that layer's injected
//! delta: `f₁ = L₁(embed(x))`, `f_{i+1} = L_{i+1}(f_i + Δf_i)`, and the stack
//! output is `f_N + Δf_N`. No class token is used: every token is a patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numeric::{rng, Binding, Mat, ParamStore, Tape, Var};

pub const PREFIX: &str = "backbone.";

/// Per-channel standardization applied after scaling to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            dim: 32,
            heads: 4,
            patch: 4,
            image: 32,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.heads == 0
            || self.patch == 0
            || self.image == 0
        {
            return Err(Error::Config(format!(
                "backbone dimensions must be positive: {self:?}"
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    /// Number of patch tokens `n`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Closed-form parameter count of [`init_frozen_backbone`].
    pub fn param_count(&self) -> usize {
        let c = self.dim;
        let embed = self.patch_dim() * c + c + self.tokens() * c;
        let block = 4 * c
            + (c * 3 * c + 3 * c)
            + (c * c + c)
            + (c * MLP_RATIO * c + MLP_RATIO * c)
            + (MLP_RATIO * c * c + c);
        embed + self.layers * block
    }
}

fn block_name(i: usize, leaf: &str) -> String {
    format!("{PREFIX}blocks.{i}.{leaf}")
}

/// Seeded random backbone; every entry is frozen. Layer-norm gains start at
/// one and shifts at zero, everything else is N(0, 0.02²).
pub fn init_frozen_backbone(cfg: &BackboneConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.dim;
    let h = MLP_RATIO * c;
    let mut r = rng(cfg.seed);
    let mut s = ParamStore::new();
    s.insert_normal(
        &format!("{PREFIX}patch_embed.w"),
        &[cfg.patch_dim(), c],
        INIT_STD,
        false,
        &mut r,
    );
    s.insert_normal(
        &format!("{PREFIX}patch_embed.b"),
        &[c],
        INIT_STD,
        false,
        &mut r,
    );
    s.insert_normal(
        &format!("{PREFIX}pos_embed"),
        &[cfg.tokens(), c],
        INIT_STD,
        false,
        &mut r,
    );
    for i in 0..cfg.layers {
        s.insert_const(&block_name(i, "ln1.g"), &[c], 1.0, false);
        s.insert_const(&block_name(i, "ln1.b"), &[c], 0.0, false);
        s.insert_normal(
            &block_name(i, "attn.qkv.w"),
            &[c, 3 * c],
            INIT_STD,
            false,
            &mut r,
        );
        s.insert_normal(
            &block_name(i, "attn.qkv.b"),
            &[3 * c],
            INIT_STD,
            false,
            &mut r,
        );
        s.insert_normal(
            &block_name(i, "attn.proj.w"),
            &[c, c],
            INIT_STD,
            false,
            &mut r,
        );
        s.insert_normal(&block_name(i, "attn.proj.b"), &[c], INIT_STD, false, &mut r);
        s.insert_const(&block_name(i, "ln2.g"), &[c], 1.0, false);
        s.insert_const(&block_name(i, "ln2.b"), &[c], 0.0, false);
        s.insert_normal(
            &block_name(i, "mlp.fc1.w"),
            &[c, h],
            INIT_STD,
            false,
            &mut r,
        );
        s.insert_normal(&block_name(i, "mlp.fc1.b"), &[h], INIT_STD, false, &mut r);
        s.insert_normal(
            &block_name(i, "mlp.fc2.w"),
            &[h, c],
            INIT_STD,
            false,
            &mut r,
        );
        s.insert_normal(&block_name(i, "mlp.fc2.b"), &[c], INIT_STD, false, &mut r);
    }
    Ok(s)
}

/// Splits a normalized image into `n × (patch²·3)` rows, raster order over
/// patches, (row, col, channel) order within a patch.
pub fn patchify(cfg: &BackboneConfig, image: &Image) -> Result<Mat> {
    if image.height != cfg.image || image.width != cfg.image {
        return Err(Error::Shape(format!(
            "image is {}x{}, backbone expects {}x{}",
            image.height, image.width, cfg.image, cfg.image
        )));
    }
    let p = cfg.patch;
    let g = cfg.grid();
    let mut out = Mat::zeros(cfg.tokens(), cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let px = image.pixel(gy * p + dy, gx * p + dx);
                    for ch in px {
                        row[k] = (ch - PIXEL_MEAN) / PIXEL_STD;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureVars {
    /// Pre-injection features f₁..f_N.
    pub layers: Vec<Var>,
    /// Injected deltas; `None` where the injector returned zero.
    pub deltas: Vec<Option<Var>>,
    pub out: Var,
}

/// Materialized features of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Mat>,
    pub deltas: Vec<Mat>,
    pub out: Mat,
}

impl FeatureVars {
    pub fn materialize(&self, tape: &Tape) -> FeatureStack {
        let (n, c) = tape.value(self.layers[0]).shape();
        FeatureStack {
            layers: self.layers.iter().map(|v| tape.value(*v).clone()).collect(),
            deltas: self
                .deltas
                .iter()
                .map(|d| d.map_or_else(|| Mat::zeros(n, c), |v| tape.value(v).clone()))
                .collect(),
            out: tape.value(self.out).clone(),
        }
    }
}

/// Produces `Δf_i` for layer `i` (0-based) from `f_i`, or `None` for zero.
pub trait Injector {
    fn inject(&mut self, tape: &mut Tape, layer: usize, features: Var) -> Result<Option<Var>>;
}

/// Injects nothing.
pub struct NoInjection;

impl Injector for NoInjection {
    fn inject(&mut self, _: &mut Tape, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

impl<F> Injector for F
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Option<Var>>,
{
    fn inject(&mut self, tape: &mut Tape, layer: usize, features: Var) -> Result<Option<Var>> {
        self(tape, layer, features)
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    fn embed(&self, tape: &mut Tape, b: &Binding, image: &Image) -> Result<Var> {
        let x = tape.constant(patchify(&self.cfg, image)?);
        let w = b.var(&format!("{PREFIX}patch_embed.w"));
        let bias = b.var(&format!("{PREFIX}patch_embed.b"));
        let e = tape.linear(x, w, bias);
        let pos = b.var(&format!("{PREFIX}pos_embed"));
        Ok(tape.add(e, pos))
    }

    fn block(&self, tape: &mut Tape, b: &Binding, i: usize, x: Var) -> Var {
        let c = self.cfg.dim;
        let heads = self.cfg.heads;
        let d = c / heads;
        let v = |leaf: &str| b.var(&block_name(i, leaf));

        let h = tape.layer_norm(x, v("ln1.g"), v("ln1.b"));
        let qkv = tape.linear(h, v("attn.qkv.w"), v("attn.qkv.b"));
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.cols(qkv, hd * d, (hd + 1) * d);
            let k = tape.cols(qkv, c + hd * d, c + (hd + 1) * d);
            let val = tape.cols(qkv, 2 * c + hd * d, 2 * c + (hd + 1) * d);
            let scores = tape.matmul_t(q, false, k, true);
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, val));
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let proj = tape.linear(cat, v("attn.proj.w"), v("attn.proj.b"));
        let x = tape.add(x, proj);

        let h = tape.layer_norm(x, v("ln2.g"), v("ln2.b"));
        let h = tape.linear(h, v("mlp.fc1.w"), v("mlp.fc1.b"));
        let h = tape.gelu(h);
        let h = tape.linear(h, v("mlp.fc2.w"), v("mlp.fc2.b"));
        tape.add(x, h)
    }

    /// Runs every layer, adding the injector's delta to each layer's output
    /// before it is consumed by the next layer (and, for the last layer,
    /// before it becomes the stack output).
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        image: &Image,
        injector: &mut dyn Injector,
    ) -> Result<FeatureVars> {
        let (n, c) = (self.cfg.tokens(), self.cfg.dim);
        let mut x = self.embed(tape, b, image)?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        let mut deltas = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let f = self.block(tape, b, i, x);
            layers.push(f);
            let delta = injector.inject(tape, i, f)?;
            x = match delta {
                Some(d) => {
                    if tape.value(d).shape() != (n, c) {
                        return Err(Error::Shape(format!(
                            "injection at layer {i} has shape {:?}, expected ({n}, {c})",
                            tape.value(d).shape()
                        )));
                    }
                    tape.add(f, d)
                }
                None => f,
            };
            deltas.push(delta);
        }
        Ok(FeatureVars {
            layers,
            deltas,
            out: x,
        })
    }
}

/// Convenience forward that binds `params` on a fresh tape and materializes
/// the result.
pub fn forward_with_injection(
    params: &ParamStore,
    cfg: &BackboneConfig,
    image: &Image,
    injector: &mut dyn Injector,
) -> Result<FeatureStack> {
    let bb = Backbone::new(*cfg)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let vars = bb.forward(&mut tape, &b, image, injector)?;
    Ok(vars.materialize(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::finite_diff_check;
    use crate::numeric::Grads;

    fn test_image(cfg: &BackboneConfig, phase: f64) -> Image {
        let mut img = Image::new(cfg.image, cfg.image);
        for y in 0..cfg.image {
            for x in 0..cfg.image {
                let t = (y as f64 * 0.37 + x as f64 * 0.11 + phase).sin() * 0.5 + 0.5;
                img.set_pixel(y, x, [t, 1.0 - t, (t * 3.0).fract()]);
            }
        }
        img
    }

    #[test]
    fn token_count_and_determinism() {
        let cfg = BackboneConfig {
            layers: 4,
            dim: 32,
            heads: 4,
            patch: 4,
            image: 32,
            seed: 3,
        };
        assert_eq!(cfg.tokens(), 64);
        let a = init_frozen_backbone(&cfg).unwrap();
        let b = init_frozen_backbone(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.numel(), cfg.param_count());
        assert!(a.iter().all(|(_, p)| !p.trainable));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(BackboneConfig {
            dim: 30,
            heads: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BackboneConfig {
            image: 30,
            patch: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_injection_is_plain_forward() {
        let cfg = BackboneConfig::default();
        let p = init_frozen_backbone(&cfg).unwrap();
        let img = test_image(&cfg, 0.0);
        let plain = forward_with_injection(&p, &cfg, &img, &mut NoInjection).unwrap();
        assert_eq!(plain.out, *plain.layers.last().unwrap());
        let mut zeros = |t: &mut Tape, _: usize, _: Var| Ok(Some(t.constant(Mat::zeros(64, 32))));
        let z = forward_with_injection(&p, &cfg, &img, &mut zeros).unwrap();
        assert_eq!(z.out, plain.out);
    }

    #[test]
    fn last_layer_injection_is_additive() {
        let cfg = BackboneConfig::default();
        let p = init_frozen_backbone(&cfg).unwrap();
        let img = test_image(&cfg, 0.4);
        let plain = forward_with_injection(&p, &cfg, &img, &mut NoInjection).unwrap();
        let last = cfg.layers - 1;
        let mut inj = |t: &mut Tape, i: usize, _: Var| {
            Ok(if i == last {
                Some(t.constant(Mat::filled(64, 32, 0.25)))
            } else {
                None
            })
        };
        let s = forward_with_injection(&p, &cfg, &img, &mut inj).unwrap();
        assert_eq!(s.layers, plain.layers);
        let want = plain.out.map(|v| v + 0.25);
        assert_eq!(s.out, want);
        assert!((s.out.max_abs_diff(&s.layers[last]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn wrong_injection_shape_names_layer() {
        let cfg = BackboneConfig::default();
        let p = init_frozen_backbone(&cfg).unwrap();
        let mut inj = |t: &mut Tape, _: usize, _: Var| Ok(Some(t.constant(Mat::zeros(3, 3))));
        let err = forward_with_injection(&p, &cfg, &test_image(&cfg, 0.0), &mut inj).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn patch_permutation_changes_output() {
        let cfg = BackboneConfig::default();
        let p = init_frozen_backbone(&cfg).unwrap();
        let img = test_image(&cfg, 1.0);
        // swap the top-left and bottom-right patches
        let mut swapped = img.clone();
        let q = cfg.patch;
        let off = cfg.image - q;
        for dy in 0..q {
            for dx in 0..q {
                swapped.set_pixel(dy, dx, img.pixel(off + dy, off + dx));
                swapped.set_pixel(off + dy, off + dx, img.pixel(dy, dx));
            }
        }
        let a = forward_with_injection(&p, &cfg, &img, &mut NoInjection).unwrap();
        let b = forward_with_injection(&p, &cfg, &swapped, &mut NoInjection).unwrap();
        let last = cfg.tokens() - 1;
        let mut a_perm = a.out.clone();
        a_perm.row_mut(0).copy_from_slice(a.out.row(last));
        a_perm.row_mut(last).copy_from_slice(a.out.row(0));
        assert!(b.out.max_abs_diff(&a_perm) > 1e-6);
    }

    /// Gradient of a readout of `f_out` with respect to a delta injected at
    /// the first layer, checked by central differences.
    #[test]
    fn first_layer_injection_receives_gradient() {
        let cfg = BackboneConfig {
            layers: 3,
            dim: 8,
            heads: 2,
            patch: 4,
            image: 8,
            seed: 1,
        };
        let bp = init_frozen_backbone(&cfg).unwrap();
        let img = test_image(&cfg, 0.2);
        let readout = Mat::from_fn(cfg.tokens(), cfg.dim, |i, j| {
            ((i * 5 + j * 3) % 7) as f64 - 3.0
        });
        let mut delta_store = ParamStore::new();
        delta_store.insert_mat("delta", Mat::filled(cfg.tokens(), cfg.dim, 0.1), true);

        let eval = |ds: &ParamStore, grads: Option<&mut Grads>| -> f64 {
            let bb = Backbone::new(cfg).unwrap();
            let mut tape = Tape::new();
            let b = bp.bind(&mut tape, true);
            let db = ds.bind(&mut tape, false);
            let dv = db.var("delta");
            let mut inj = |_: &mut Tape, i: usize, _: Var| Ok(if i == 0 { Some(dv) } else { None });
            let fv = bb.forward(&mut tape, &b, &img, &mut inj).unwrap();
            let out = tape.value(fv.out);
            let loss: f64 = out
                .data()
                .iter()
                .zip(readout.data())
                .map(|(a, b)| (a * b).sin())
                .sum();
            if let Some(acc) = grads {
                let seed = Mat::from_fn(out.rows(), out.cols(), |i, j| {
                    readout.get(i, j) * (out.get(i, j) * readout.get(i, j)).cos()
                });
                let mut g = tape.backward(&[(fv.out, seed)]);
                db.accumulate(&mut g, acc, ds);
            }
            loss
        };
        let mut g = Grads::new();
        eval(&delta_store, Some(&mut g));
        assert!(g.get("delta").unwrap().iter().any(|v| v.abs() > 1e-6));
        let report =
            finite_diff_check(&delta_store, &g, |s| Ok(eval(s, None)), 1e-5, 1e-4, 5).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel);
    }
}

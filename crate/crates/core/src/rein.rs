//! Learnable-token feature refinement for a frozen backbone.
//!
//! Each layer `i` owns a token sequence `T_i ∈ R^{m×c}` (optionally the
//! low-rank product `A_i·B_i`). Patch features attend to the tokens:
//!
//! ```text
//! S_i  = softmax(f_i·T_iᵀ / √c)                    n × m
//! Δf̄_i = S_i[:, 1..] · (T_i[1..]·W_T + b_T)       first token dropped after softmax
//! Δf_i = (Δf̄_i + f_i)·W_f + b_f                    plain
//! Δf_i = GELU((Δf̄_i + f_i)·W_f + b_f)·W_g + b_g    GELU variant, W_f ∈ R^{c×c/2}
//! ```
//!
//! Dropping the first column after the softmax lets each row of the used
//! similarity map sum to anything in (0, 1), so the module can abstain.
//! All MLP weights are shared by every layer. With query linking enabled the
//! tokens are also projected to decode-head queries:
//! `Q = [max_i Q_i, mean_i Q_i, Q_N]·W_c + b_c` with `Q_i = T_i·W_Q + b_Q`.

use serde::{Deserialize, Serialize};

use crate::backbone::Injector;
use crate::error::{Error, Result};
use crate::numeric::tape::softmax_rows;
use crate::numeric::{rng, Binding, Mat, ParamStore, Tape, Var};

pub const PREFIX: &str = "rein.";
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinConfig {
    /// Tokens per layer (`m`).
    pub tokens: usize,
    /// Rank of the token factorization (`r`).
    pub rank: usize,
    /// Feature dimension (`c`).
    pub dim: usize,
    /// Query dimension (`c′`).
    pub query_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub use_link: bool,
    pub use_lowrank: bool,
    pub use_multihead: bool,
    pub use_gelu: bool,
}

impl Default for ReinConfig {
    fn default() -> Self {
        ReinConfig {
            tokens: 8,
            rank: 4,
            dim: 32,
            query_dim: 16,
            layers: 4,
            heads: 4,
            use_link: true,
            use_lowrank: true,
            use_multihead: true,
            use_gelu: true,
        }
    }
}

impl ReinConfig {
    /// Plain-MLP configuration with the paper-scale defaults m=100, r=16, c′=256.
    pub fn large(layers: usize, dim: usize) -> Self {
        ReinConfig {
            tokens: 100,
            rank: 16,
            dim,
            query_dim: 256,
            layers,
            heads: 1,
            use_link: true,
            use_lowrank: true,
            use_multihead: false,
            use_gelu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(Error::Config(format!(
                "need at least 2 tokens per layer, got {}",
                self.tokens
            )));
        }
        if self.layers == 0 || self.dim == 0 || self.query_dim == 0 {
            return Err(Error::Config("rein dimensions must be positive".into()));
        }
        if self.use_lowrank && (self.rank == 0 || self.rank >= self.dim) {
            return Err(Error::Config(format!(
                "low-rank tokens need 0 < r < c, got r={} c={}",
                self.rank, self.dim
            )));
        }
        if self.use_multihead && (self.heads == 0 || self.dim % self.heads != 0) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.use_gelu && self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "GELU variant needs an even dim, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn effective_heads(&self) -> usize {
        if self.use_multihead {
            self.heads
        } else {
            1
        }
    }
}

/// Exact number of trainable refinement parameters for `cfg`.
pub fn count_trainable(cfg: &ReinConfig) -> usize {
    let (n, m, r, c, q) = (cfg.layers, cfg.tokens, cfg.rank, cfg.dim, cfg.query_dim);
    let tokens = if cfg.use_lowrank {
        n * (m * r + r * c)
    } else {
        n * m * c
    };
    let token_mlp = c * c + c;
    let feature_mlp = if cfg.use_gelu {
        c * (c / 2) + c / 2 + (c / 2) * c + c
    } else {
        c * c + c
    };
    let link = if cfg.use_link {
        (c * q + q) + (3 * q * q + q)
    } else {
        0
    };
    tokens + token_mlp + feature_mlp + link
}

fn name(leaf: &str) -> String {
    format!("{PREFIX}{leaf}")
}

fn token_name(i: usize, leaf: &str) -> String {
    format!("{PREFIX}tokens.{i}.{leaf}")
}

/// Random token bank and shared MLPs. The last projections of the feature
/// MLP and of the query link are zero, so the module starts as the identity
/// on backbone features and adds nothing to the head's queries.
pub fn init_rein(cfg: &ReinConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let (m, r, c, q) = (cfg.tokens, cfg.rank, cfg.dim, cfg.query_dim);
    let mut g = rng(seed);
    let mut s = ParamStore::new();
    for i in 0..cfg.layers {
        if cfg.use_lowrank {
            s.insert_normal(&token_name(i, "a"), &[m, r], INIT_STD, true, &mut g);
            s.insert_normal(&token_name(i, "b"), &[r, c], INIT_STD, true, &mut g);
        } else {
            s.insert_normal(&token_name(i, "t"), &[m, c], INIT_STD, true, &mut g);
        }
    }
    s.insert_normal(&name("token_mlp.w"), &[c, c], INIT_STD, true, &mut g);
    s.insert_normal(&name("token_mlp.b"), &[c], INIT_STD, true, &mut g);
    if cfg.use_gelu {
        s.insert_normal(&name("feat_mlp.w"), &[c, c / 2], INIT_STD, true, &mut g);
        s.insert_normal(&name("feat_mlp.b"), &[c / 2], INIT_STD, true, &mut g);
        s.insert_const(&name("feat_out.w"), &[c / 2, c], 0.0, true);
        s.insert_const(&name("feat_out.b"), &[c], 0.0, true);
    } else {
        s.insert_const(&name("feat_mlp.w"), &[c, c], 0.0, true);
        s.insert_const(&name("feat_mlp.b"), &[c], 0.0, true);
    }
    if cfg.use_link {
        s.insert_normal(&name("query_mlp.w"), &[c, q], INIT_STD, true, &mut g);
        s.insert_normal(&name("query_mlp.b"), &[q], INIT_STD, true, &mut g);
        s.insert_const(&name("query_proj.w"), &[3 * q, q], 0.0, true);
        s.insert_const(&name("query_proj.b"), &[q], 0.0, true);
    }
    Ok(s)
}

/// `T_i = A_i·B_i` (or the full token matrix) for every layer.
pub fn materialize_tokens(cfg: &ReinConfig, params: &ParamStore) -> Result<Vec<Mat>> {
    (0..cfg.layers)
        .map(|i| {
            if cfg.use_lowrank {
                let a = params.require(&token_name(i, "a"))?.to_mat();
                let b = params.require(&token_name(i, "b"))?.to_mat();
                Ok(a.matmul(&b))
            } else {
                Ok(params.require(&token_name(i, "t"))?.to_mat())
            }
        })
        .collect()
}

/// Post-softmax similarity maps, one `n × m` map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub heads: Vec<Mat>,
}

impl SimilarityMap {
    /// The map with the first token column removed.
    pub fn dropped(&self) -> Vec<Mat> {
        self.heads
            .iter()
            .map(|s| s.cols_range(1, s.cols()))
            .collect()
    }
}

/// Similarity of patch features to tokens. With `heads > 1`, channels are
/// split into equal groups and each head is scaled by `1/√(c/heads)`.
pub fn similarity(features: &Mat, tokens: &Mat, heads: usize) -> Result<SimilarityMap> {
    let c = features.cols();
    if tokens.cols() != c {
        return Err(Error::Shape(format!(
            "features have {c} channels, tokens {}",
            tokens.cols()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide {c} channels"
        )));
    }
    let d = c / heads;
    let maps = (0..heads)
        .map(|h| {
            let f = features.cols_range(h * d, (h + 1) * d);
            let t = tokens.cols_range(h * d, (h + 1) * d);
            let mut s = f.matmul_t(false, &t, true);
            s.scale_assign(1.0 / (d as f64).sqrt());
            softmax_rows(&s)
        })
        .collect();
    Ok(SimilarityMap { heads: maps })
}

/// Per-tape token quantities shared by every layer call and every image.
#[derive(Debug, Clone)]
pub struct PreparedTokens {
    /// `T_i`, one per layer.
    pub tokens: Vec<Var>,
    /// `T_i[1..]·W_T + b_T`, one per layer.
    pub projected: Vec<Var>,
}

pub struct Rein {
    pub cfg: ReinConfig,
}

impl Rein {
    pub fn new(cfg: ReinConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Rein { cfg })
    }

    fn token_var(&self, tape: &mut Tape, b: &Binding, i: usize) -> Var {
        if self.cfg.use_lowrank {
            tape.matmul(b.var(&token_name(i, "a")), b.var(&token_name(i, "b")))
        } else {
            b.var(&token_name(i, "t"))
        }
    }

    fn project_tokens(&self, tape: &mut Tape, b: &Binding, t: Var) -> Var {
        let m = self.cfg.tokens;
        let kept = tape.rows(t, 1, m);
        tape.linear(
            kept,
            b.var(&name("token_mlp.w")),
            b.var(&name("token_mlp.b")),
        )
    }

    /// Materializes the tokens and their projections once per tape.
    pub fn prepare(&self, tape: &mut Tape, b: &Binding) -> PreparedTokens {
        let tokens: Vec<Var> = (0..self.cfg.layers)
            .map(|i| self.token_var(tape, b, i))
            .collect();
        let projected = tokens
            .iter()
            .map(|&t| self.project_tokens(tape, b, t))
            .collect();
        PreparedTokens { tokens, projected }
    }

    /// `Δf_i` for layer `layer` from features `f` (n × c). Without `prepared`
    /// the tokens and their projection are recomputed for this call.
    pub fn refine(
        &self,
        tape: &mut Tape,
        b: &Binding,
        prepared: Option<&PreparedTokens>,
        layer: usize,
        f: Var,
    ) -> Result<Var> {
        let c = self.cfg.dim;
        let m = self.cfg.tokens;
        let (t, tw) = match prepared {
            Some(p) => (p.tokens[layer], p.projected[layer]),
            None => {
                let t = self.token_var(tape, b, layer);
                (t, self.project_tokens(tape, b, t))
            }
        };
        let heads = self.cfg.effective_heads();
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let coarse = if heads == 1 {
            let s = tape.matmul_t(f, false, t, true);
            let s = tape.scale(s, scale);
            let s = tape.softmax_rows(s);
            let s = tape.cols(s, 1, m);
            tape.matmul(s, tw)
        } else {
            let mut parts = Vec::with_capacity(heads);
            for h in 0..heads {
                let fh = tape.cols(f, h * d, (h + 1) * d);
                let th = tape.cols(t, h * d, (h + 1) * d);
                let s = tape.matmul_t(fh, false, th, true);
                let s = tape.scale(s, scale);
                let s = tape.softmax_rows(s);
                let s = tape.cols(s, 1, m);
                let twh = tape.cols(tw, h * d, (h + 1) * d);
                parts.push(tape.matmul(s, twh));
            }
            tape.concat_cols(&parts)
        };
        let u = tape.add(coarse, f);
        let delta = tape.linear(u, b.var(&name("feat_mlp.w")), b.var(&name("feat_mlp.b")));
        let delta = if self.cfg.use_gelu {
            let h = tape.gelu(delta);
            tape.linear(h, b.var(&name("feat_out.w")), b.var(&name("feat_out.b")))
        } else {
            delta
        };
        if !tape.value(delta).is_finite() {
            return Err(Error::NonFinite(format!(
                "refinement delta at layer {layer}"
            )));
        }
        Ok(delta)
    }

    /// Decode-head queries (m × c′) linked from the token bank.
    pub fn link_queries(&self, tape: &mut Tape, b: &Binding, prepared: &PreparedTokens) -> Var {
        let w = b.var(&name("query_mlp.w"));
        let bias = b.var(&name("query_mlp.b"));
        let per_layer: Vec<Var> = prepared
            .tokens
            .iter()
            .map(|&t| tape.linear(t, w, bias))
            .collect();
        let qmax = tape.elem_max(&per_layer);
        let qavg = tape.mean(&per_layer);
        let last = *per_layer.last().expect("at least one layer");
        let cat = tape.concat_cols(&[qmax, qavg, last]);
        tape.linear(
            cat,
            b.var(&name("query_proj.w")),
            b.var(&name("query_proj.b")),
        )
    }
}

/// Adapts a [`Rein`] to the backbone's injection hook.
pub struct ReinInjector<'a> {
    pub rein: &'a Rein,
    pub binding: &'a Binding,
    pub prepared: Option<&'a PreparedTokens>,
}

impl Injector for ReinInjector<'_> {
    fn inject(&mut self, tape: &mut Tape, layer: usize, features: Var) -> Result<Option<Var>> {
        self.rein
            .refine(tape, self.binding, self.prepared, layer, features)
            .map(Some)
    }
}

/// Value-level `Δf_i` without any tape bookkeeping by the caller.
pub fn refine(cfg: &ReinConfig, params: &ParamStore, layer: usize, features: &Mat) -> Result<Mat> {
    let rein = Rein::new(*cfg)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let f = tape.constant(features.clone());
    let d = rein.refine(&mut tape, &b, None, layer, f)?;
    Ok(tape.value(d).clone())
}

/// Value-level linked queries.
pub fn link_queries(cfg: &ReinConfig, params: &ParamStore) -> Result<Mat> {
    let rein = Rein::new(*cfg)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let p = rein.prepare(&mut tape, &b);
    let q = rein.link_queries(&mut tape, &b, &p);
    Ok(tape.value(q).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            for v in p.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(r, c, |_, _| g.random_range(-1.0..1.0))
    }

    /// Singular values of `a` by one-sided (Hestenes) Jacobi rotations on
    /// its columns; zero singular values come out at rounding level.
    fn singular_values(a: &Mat) -> Vec<f64> {
        let mut u = a.clone();
        let (rows, cols) = u.shape();
        for _sweep in 0..60 {
            let mut rotated = false;
            for p in 0..cols {
                for q in p + 1..cols {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..rows {
                        alpha += u.get(i, p).powi(2);
                        beta += u.get(i, q).powi(2);
                        gamma += u.get(i, p) * u.get(i, q);
                    }
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (1.0 + t * t).sqrt();
                    let sn = cs * t;
                    for i in 0..rows {
                        let (up, uq) = (u.get(i, p), u.get(i, q));
                        u.set(i, p, cs * up - sn * uq);
                        u.set(i, q, sn * up + cs * uq);
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut sv: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn paper_scale_counts() {
        // closed-form sums, checked by hand
        assert_eq!(count_trainable(&ReinConfig::large(24, 1024)), 2_990_080);
        assert_eq!(count_trainable(&ReinConfig::large(40, 1536)), 6_359_040);
        assert_eq!(count_trainable(&ReinConfig::large(48, 3200)), 24_037_120);
    }

    #[test]
    fn count_matches_initialized_store() {
        for use_gelu in [false, true] {
            for use_link in [false, true] {
                for use_lowrank in [false, true] {
                    let cfg = ReinConfig {
                        use_gelu,
                        use_link,
                        use_lowrank,
                        ..Default::default()
                    };
                    let s = init_rein(&cfg, 1).unwrap();
                    assert_eq!(s.numel(), count_trainable(&cfg), "{cfg:?}");
                    assert_eq!(s.numel_trainable(), s.numel());
                }
            }
        }
    }

    #[test]
    fn gelu_variant_costs_half_c_extra_biases() {
        let plain = ReinConfig {
            use_gelu: false,
            ..ReinConfig::large(24, 1024)
        };
        let gelu = ReinConfig {
            use_gelu: true,
            ..plain
        };
        assert_eq!(count_trainable(&gelu) - count_trainable(&plain), 1024 / 2);
    }

    #[test]
    fn validation() {
        assert!(ReinConfig {
            tokens: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ReinConfig {
            rank: 32,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ReinConfig {
            heads: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn materialize_hand_product_and_zero() {
        let cfg = ReinConfig {
            tokens: 2,
            rank: 1,
            dim: 2,
            layers: 1,
            heads: 1,
            use_link: false,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        s.insert(
            token_name(0, "a"),
            Param::new(vec![2, 1], vec![1.0, 2.0], true).unwrap(),
        );
        s.insert(
            token_name(0, "b"),
            Param::new(vec![1, 2], vec![3.0, 4.0], true).unwrap(),
        );
        let t = materialize_tokens(&cfg, &s).unwrap();
        assert_eq!(t[0].data(), &[3.0, 4.0, 6.0, 8.0]);
        s.get_mut(&token_name(0, "a")).unwrap().data_mut().fill(0.0);
        assert!(materialize_tokens(&cfg, &s).unwrap()[0]
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn low_rank_bound_on_singular_values() {
        let cfg = ReinConfig {
            tokens: 8,
            rank: 4,
            dim: 32,
            ..Default::default()
        };
        let mut s = init_rein(&cfg, 11).unwrap();
        randomize(&mut s, 3, 1.0);
        for t in materialize_tokens(&cfg, &s).unwrap() {
            let sv = singular_values(&t.transpose());
            assert!(sv[3] > 1e-3);
            for v in &sv[cfg.rank..] {
                assert!(*v < 1e-10, "{sv:?}");
            }
        }
    }

    #[test]
    fn orthogonal_features_give_uniform_rows() {
        let f = Mat::from_rows(&[&[1.0, 0.0], &[2.0, 0.0]]);
        let t = Mat::from_rows(&[&[0.0, 1.0], &[0.0, -3.0], &[0.0, 0.5]]);
        let s = similarity(&f, &t, 1).unwrap();
        for v in s.heads[0].data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_matches_scalar_softmax() {
        let f = Mat::from_rows(&[&[1.0, 2.0], &[-1.0, 0.0]]);
        let t = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let s = similarity(&f, &t, 1).unwrap();
        let r2 = 2f64.sqrt();
        let rows = [[1.0 / r2, 2.0 / r2, 3.0 / r2], [-1.0 / r2, 0.0, -1.0 / r2]];
        for (i, row) in rows.iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, v) in row.iter().enumerate() {
                assert!((s.heads[0].get(i, j) - v.exp() / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_sums_of_full_and_dropped_maps() {
        for seed in 0..20 {
            let f = rand_mat(6, 8, seed);
            let t = rand_mat(5, 8, seed + 100);
            for heads in [1, 2, 4] {
                let s = similarity(&f, &t, heads).unwrap();
                for (full, dropped) in s.heads.iter().zip(s.dropped()) {
                    for i in 0..full.rows() {
                        assert!((full.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        let d: f64 = dropped.row(i).iter().sum();
                        assert!(d > 0.0 && d < 1.0);
                    }
                }
            }
        }
    }

    /// n=1, m=3, c=2 evaluated step by step with scalars.
    #[test]
    fn refine_matches_scalar_pipeline() {
        let cfg = ReinConfig {
            tokens: 3,
            rank: 1,
            dim: 2,
            layers: 1,
            heads: 1,
            use_link: false,
            use_lowrank: false,
            use_multihead: false,
            use_gelu: false,
            query_dim: 2,
        };
        let mut s = ParamStore::new();
        let tok = [[0.5, -1.0], [1.0, 0.25], [-0.5, 2.0]];
        let wt = [[0.3, -0.2], [0.1, 0.4]];
        let bt = [0.05, -0.1];
        let wf = [[1.5, 0.2], [-0.3, 0.7]];
        let bf = [0.01, 0.02];
        s.insert(
            token_name(0, "t"),
            Param::new(vec![3, 2], tok.concat(), true).unwrap(),
        );
        s.insert(
            name("token_mlp.w"),
            Param::new(vec![2, 2], wt.concat(), true).unwrap(),
        );
        s.insert(
            name("token_mlp.b"),
            Param::new(vec![2], bt.to_vec(), true).unwrap(),
        );
        s.insert(
            name("feat_mlp.w"),
            Param::new(vec![2, 2], wf.concat(), true).unwrap(),
        );
        s.insert(
            name("feat_mlp.b"),
            Param::new(vec![2], bf.to_vec(), true).unwrap(),
        );
        let f = [0.8, -0.6];

        let scores: Vec<f64> = tok
            .iter()
            .map(|t| (f[0] * t[0] + f[1] * t[1]) / 2f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|v| v.exp()).sum();
        let sim: Vec<f64> = scores.iter().map(|v| v.exp() / z).collect();
        let mut coarse = [0.0; 2];
        for j in 1..3 {
            for k in 0..2 {
                let proj = tok[j][0] * wt[0][k] + tok[j][1] * wt[1][k] + bt[k];
                coarse[k] += sim[j] * proj;
            }
        }
        let u = [coarse[0] + f[0], coarse[1] + f[1]];
        let want: Vec<f64> = (0..2)
            .map(|k| u[0] * wf[0][k] + u[1] * wf[1][k] + bf[k])
            .collect();

        let got = refine(&cfg, &s, 0, &Mat::from_vec(1, 2, f.to_vec())).unwrap();
        for k in 0..2 {
            assert!((got.data()[k] - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_final_projection_gives_zero_delta() {
        let cfg = ReinConfig::default();
        let s = init_rein(&cfg, 5).unwrap();
        let d = refine(&cfg, &s, 2, &rand_mat(64, 32, 1)).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn plain_affine_collapse() {
        let cfg = ReinConfig {
            use_gelu: false,
            ..Default::default()
        };
        let mut s = init_rein(&cfg, 5).unwrap();
        randomize(&mut s, 9, 0.5);
        s.get_mut(&name("feat_mlp.w")).unwrap().data_mut().fill(0.0);
        let bias: Vec<f64> = s.get(&name("feat_mlp.b")).unwrap().data().to_vec();
        let d = refine(&cfg, &s, 1, &rand_mat(10, 32, 2)).unwrap();
        for i in 0..10 {
            assert_eq!(d.row(i), bias.as_slice());
        }
    }

    #[test]
    fn single_head_equals_no_multihead() {
        let single = ReinConfig {
            use_multihead: true,
            heads: 1,
            ..Default::default()
        };
        let none = ReinConfig {
            use_multihead: false,
            heads: 4,
            ..Default::default()
        };
        let mut s = init_rein(&single, 5).unwrap();
        randomize(&mut s, 4, 0.5);
        let f = rand_mat(16, 32, 8);
        let a = refine(&single, &s, 0, &f).unwrap();
        let b = refine(&none, &s, 0, &f).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn prepared_cache_matches_uncached() {
        let cfg = ReinConfig::default();
        let mut s = init_rein(&cfg, 5).unwrap();
        randomize(&mut s, 6, 0.5);
        let rein = Rein::new(cfg).unwrap();
        let f = rand_mat(64, 32, 3);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let fv = tape.constant(f);
        let p = rein.prepare(&mut tape, &b);
        let cached = rein.refine(&mut tape, &b, Some(&p), 3, fv).unwrap();
        let fresh = rein.refine(&mut tape, &b, None, 3, fv).unwrap();
        assert!(tape.value(cached).max_abs_diff(tape.value(fresh)) < 1e-12);
    }

    #[test]
    fn link_single_layer_and_constant_layers() {
        let cfg = ReinConfig {
            layers: 1,
            ..Default::default()
        };
        let mut s = init_rein(&cfg, 5).unwrap();
        randomize(&mut s, 7, 0.5);
        // with one layer max = avg = Q_1, so Q = [Q1, Q1, Q1]·W + b
        let t = &materialize_tokens(&cfg, &s).unwrap()[0];
        let wq = s.get(&name("query_mlp.w")).unwrap().to_mat();
        let bq = s.get(&name("query_mlp.b")).unwrap().data().to_vec();
        let mut q1 = t.matmul(&wq);
        for i in 0..q1.rows() {
            for (v, b) in q1.row_mut(i).iter_mut().zip(&bq) {
                *v += b;
            }
        }
        let wp = s.get(&name("query_proj.w")).unwrap().to_mat();
        let bp = s.get(&name("query_proj.b")).unwrap().data().to_vec();
        let qd = cfg.query_dim;
        let mut wsum = wp.rows_range(0, qd);
        wsum.add_assign(&wp.rows_range(qd, 2 * qd));
        wsum.add_assign(&wp.rows_range(2 * qd, 3 * qd));
        let mut want = q1.matmul(&wsum);
        for i in 0..want.rows() {
            for (v, b) in want.row_mut(i).iter_mut().zip(&bp) {
                *v += b;
            }
        }
        let got = link_queries(&cfg, &s).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn link_max_and_mean_of_constant_layers() {
        let mut tape = Tape::new();
        let q1 = tape.constant(Mat::zeros(8, 16));
        let q2 = tape.constant(Mat::filled(8, 16, 1.0));
        let mx = tape.elem_max(&[q1, q2]);
        let av = tape.mean(&[q1, q2]);
        assert!(tape.value(mx).data().iter().all(|v| *v == 1.0));
        assert!(tape.value(av).data().iter().all(|v| *v == 0.5));
    }

    /// Explicit-loop recomputation of the linked queries.
    #[test]
    fn link_matches_loop_oracle() {
        let cfg = ReinConfig {
            layers: 3,
            ..Default::default()
        };
        let mut s = init_rein(&cfg, 5).unwrap();
        randomize(&mut s, 8, 0.7);
        let (m, c, q) = (cfg.tokens, cfg.dim, cfg.query_dim);
        let tokens = materialize_tokens(&cfg, &s).unwrap();
        let wq = s.get(&name("query_mlp.w")).unwrap().data().to_vec();
        let bq = s.get(&name("query_mlp.b")).unwrap().data().to_vec();
        let wp = s.get(&name("query_proj.w")).unwrap().data().to_vec();
        let bp = s.get(&name("query_proj.b")).unwrap().data().to_vec();
        let mut per = vec![vec![vec![0.0; q]; m]; cfg.layers];
        for (l, t) in tokens.iter().enumerate() {
            for j in 0..m {
                for k in 0..q {
                    let mut acc = bq[k];
                    for x in 0..c {
                        acc += t.get(j, x) * wq[x * q + k];
                    }
                    per[l][j][k] = acc;
                }
            }
        }
        let got = link_queries(&cfg, &s).unwrap();
        for j in 0..m {
            let mut cat = Vec::with_capacity(3 * q);
            for k in 0..q {
                cat.push(
                    per.iter()
                        .map(|p| p[j][k])
                        .fold(f64::NEG_INFINITY, f64::max),
                );
            }
            for k in 0..q {
                cat.push(per.iter().map(|p| p[j][k]).sum::<f64>() / cfg.layers as f64);
            }
            for k in 0..q {
                cat.push(per[cfg.layers - 1][j][k]);
            }
            for k in 0..q {
                let mut acc = bp[k];
                for (x, v) in cat.iter().enumerate() {
                    acc += v * wp[x * q + k];
                }
                assert!((got.get(j, k) - acc).abs() < 1e-12);
            }
        }
    }
}

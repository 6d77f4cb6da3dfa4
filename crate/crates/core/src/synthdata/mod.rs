//! Synthetic two-domain segmentation benchmark.
//!
//! Images hold a few flat-colored shapes over a shaded background. Each
//! shape kind is one semantic class; class 0 is background. The target
//! domain reuses the same shape grammar and renders it through an
//! appearance shift (gamma, per-channel affine, noise), so label maps are
//! domain-invariant.

mod dataset;
pub mod oracle;
pub mod pnm;

pub use dataset::{
    gen_pair, Dataset, Domain, LoadOptions, Manifest, Sample, Split, INDEX_FILE, SPEC_FILE,
};
pub use oracle::{oracle_map, oracle_masks};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, InstanceMap, LabelMap};
use crate::kv::{triple, KvReader};
use crate::numeric::{derive_seed, rng};
use rand_distr::{Distribution, Normal};

/// Number of foreground shape kinds the grammar knows.
pub const SHAPE_KINDS: usize = 5;

/// Appearance-only transform applied to the target domain:
/// `v ↦ clamp(gain·v^gamma + bias + N(0, noise²))` per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub gamma: f64,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub noise: f64,
}

impl Shift {
    pub fn identity() -> Self {
        Shift {
            gamma: 1.0,
            gain: [1.0; 3],
            bias: [0.0; 3],
            noise: 0.0,
        }
    }

    /// Darkened, blue-shifted and noisy.
    pub fn night() -> Self {
        Shift {
            gamma: 2.2,
            gain: [0.75, 0.85, 1.1],
            bias: [0.0, 0.02, 0.08],
            noise: 8.0 / 255.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Shift::identity()
    }

    fn apply<R: Rng>(&self, img: &mut Image, rng: &mut R) {
        if self.is_identity() {
            return;
        }
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite sigma");
        for px in img.data.chunks_exact_mut(3) {
            for (c, v) in px.iter_mut().enumerate() {
                let mut u = self.gain[c] * v.powf(self.gamma) + self.bias[c];
                if self.noise > 0.0 {
                    u += noise.sample(rng);
                }
                *v = u;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Semantic classes including background; at most `SHAPE_KINDS + 1`.
    pub classes: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Relative draw weight of the last (rare) shape kind; others weigh 1.
    pub rare_weight: f64,
    /// Per-channel color jitter of each instance.
    pub color_jitter: f64,
    /// Sensor noise in both domains.
    pub base_noise: f64,
    /// Oracle boundary jitter amplitude in pixels.
    pub oracle_jitter: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            classes: SHAPE_KINDS + 1,
            size: 32,
            min_shapes: 2,
            max_shapes: 5,
            rare_weight: 0.15,
            color_jitter: 0.07,
            base_noise: 0.02,
            oracle_jitter: 1.0,
            shift: Shift::night(),
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > SHAPE_KINDS + 1 {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                SHAPE_KINDS + 1,
                self.classes
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!(
                "canvas size {} is below 16",
                self.size
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "bad shape range {}..={}",
                self.min_shapes, self.max_shapes
            )));
        }
        let s = &self.shift;
        let finite = [
            s.gamma,
            s.noise,
            self.rare_weight,
            self.color_jitter,
            self.base_noise,
            self.oracle_jitter,
        ]
        .iter()
        .chain(&s.gain)
        .chain(&s.bias)
        .all(|v| v.is_finite());
        if !finite
            || s.gamma <= 0.0
            || s.noise < 0.0
            || self.rare_weight < 0.0
            || self.base_noise < 0.0
        {
            return Err(Error::Config(
                "shift and noise parameters must be finite, gamma > 0, sigmas >= 0".into(),
            ));
        }
        if self.oracle_jitter < 0.0 || self.color_jitter < 0.0 {
            return Err(Error::Config(
                "jitter amplitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut s = DomainSpec::default();
        s.apply_kv(&mut r, "")?;
        r.finish()?;
        s.validate()?;
        Ok(s)
    }

    /// Overwrites fields from `prefix`-ed keys present in `r`.
    pub fn apply_kv(&mut self, r: &mut KvReader, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        r.set(&k("classes"), &mut self.classes)?;
        r.set(&k("size"), &mut self.size)?;
        r.set(&k("min_shapes"), &mut self.min_shapes)?;
        r.set(&k("max_shapes"), &mut self.max_shapes)?;
        r.set(&k("rare_weight"), &mut self.rare_weight)?;
        r.set(&k("color_jitter"), &mut self.color_jitter)?;
        r.set(&k("base_noise"), &mut self.base_noise)?;
        r.set(&k("oracle_jitter"), &mut self.oracle_jitter)?;
        r.set(&k("seed"), &mut self.seed)?;
        if let Some(p) = r.take::<String>(&k("shift"))? {
            self.shift = match p.as_str() {
                "night" => Shift::night(),
                "identity" => Shift::identity(),
                other => return Err(Error::Config(format!("unknown shift preset {other:?}"))),
            };
        }
        r.set(&k("shift.gamma"), &mut self.shift.gamma)?;
        r.set_triple(&k("shift.gain"), &mut self.shift.gain)?;
        r.set_triple(&k("shift.bias"), &mut self.shift.bias)?;
        r.set(&k("shift.noise"), &mut self.shift.noise)?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        self.to_kv_prefixed("")
    }

    pub fn to_kv_prefixed(&self, prefix: &str) -> String {
        let rows = [
            ("classes", self.classes.to_string()),
            ("size", self.size.to_string()),
            ("min_shapes", self.min_shapes.to_string()),
            ("max_shapes", self.max_shapes.to_string()),
            ("rare_weight", self.rare_weight.to_string()),
            ("color_jitter", self.color_jitter.to_string()),
            ("base_noise", self.base_noise.to_string()),
            ("oracle_jitter", self.oracle_jitter.to_string()),
            ("seed", self.seed.to_string()),
            ("shift.gamma", self.shift.gamma.to_string()),
            ("shift.gain", triple(&self.shift.gain)),
            ("shift.bias", triple(&self.shift.bias)),
            ("shift.noise", self.shift.noise.to_string()),
        ];
        rows.iter()
            .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
            .collect()
    }

    /// Geometry seed of sample `index` in `domain`.
    pub fn geometry_seed(&self, domain: Domain, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, domain as u64 + 1), index as u64)
    }

    fn shift_seed(&self, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, 0x5157), index as u64)
    }

    pub fn oracle_seed(&self, domain: Domain, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, 0x0AC1 + domain as u64), index as u64)
    }
}

/// A generated image with its dense annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Image,
    pub label: LabelMap,
    pub instances: InstanceMap,
}

/// Base colors of the shape kinds, in class order 1..
const COLORS: [[f64; 3]; SHAPE_KINDS] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.80, 0.30, 0.80],
];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect {
        y0: f64,
        x0: f64,
        h: f64,
        w: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    Bar {
        y0: f64,
        x0: f64,
        h: f64,
        w: f64,
    },
    Triangle {
        top: f64,
        cx: f64,
        h: f64,
        base: f64,
    },
    Cross {
        cy: f64,
        cx: f64,
        arm: f64,
        half: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } | Shape::Bar { y0, x0, h, w } => {
                y >= y0 && y < y0 + h && x >= x0 && x < x0 + w
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            }
            Shape::Triangle { top, cx, h, base } => {
                let t = (y - top) / h;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= 0.5 * base * t
            }
            Shape::Cross { cy, cx, arm, half } => {
                let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                (dy <= half && dx <= arm) || (dx <= half && dy <= arm)
            }
        }
    }

    /// Samples a shape of kind `kind` (0-based) on an `s`-pixel canvas.
    fn sample<R: Rng>(kind: usize, s: f64, g: &mut R) -> Shape {
        let k = s / 32.0;
        let mut u = |lo: f64, hi: f64| g.random_range(lo * k..hi * k);
        match kind {
            0 => {
                let (h, w) = (u(6.0, 12.0), u(6.0, 12.0));
                Shape::Rect {
                    y0: u(0.0, 32.0) - h / 2.0,
                    x0: u(0.0, 32.0) - w / 2.0,
                    h,
                    w,
                }
            }
            1 => Shape::Ellipse {
                cy: u(2.0, 30.0),
                cx: u(2.0, 30.0),
                ry: u(3.0, 6.5),
                rx: u(3.0, 6.5),
            },
            2 => {
                let (t, l) = (u(2.5, 4.0), u(14.0, 24.0));
                let (cy, cx) = (u(2.0, 30.0), u(2.0, 30.0));
                if u(0.0, 2.0) < k {
                    Shape::Bar {
                        y0: cy - t / 2.0,
                        x0: cx - l / 2.0,
                        h: t,
                        w: l,
                    }
                } else {
                    Shape::Bar {
                        y0: cy - l / 2.0,
                        x0: cx - t / 2.0,
                        h: l,
                        w: t,
                    }
                }
            }
            3 => {
                let (h, base) = (u(7.0, 11.0), u(8.0, 14.0));
                Shape::Triangle {
                    top: u(0.0, 32.0) - h / 2.0,
                    cx: u(2.0, 30.0),
                    h,
                    base,
                }
            }
            _ => Shape::Cross {
                cy: u(4.0, 28.0),
                cx: u(4.0, 28.0),
                arm: u(3.5, 5.0),
                half: u(0.6, 1.1),
            },
        }
    }
}

/// Renders the source-domain appearance of the scene drawn from `geometry_seed`.
pub fn render_scene(spec: &DomainSpec, geometry_seed: u64) -> SampleRecord {
    let mut g = rng(geometry_seed);
    let s = spec.size;
    let kinds = spec.classes - 1;
    let mut weights = vec![1.0; kinds];
    if kinds == SHAPE_KINDS {
        weights[kinds - 1] = spec.rare_weight;
    }
    let wsum: f64 = weights.iter().sum();

    let gray = g.random_range(0.3..0.6);
    let tint: Vec<f64> = (0..3).map(|_| g.random_range(-0.05..0.05)).collect();
    let (gy, gx) = (g.random_range(-0.1..0.1), g.random_range(-0.1..0.1));
    let mut image = Image::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let ramp = gy * (y as f64 / s as f64 - 0.5) + gx * (x as f64 / s as f64 - 0.5);
            image.set_pixel(y, x, [0, 1, 2].map(|c| gray + tint[c] + ramp));
        }
    }
    let mut label = LabelMap::new(s, s);
    let mut raw = InstanceMap::new(s, s);
    let n_shapes = g.random_range(spec.min_shapes..=spec.max_shapes);
    for i in 0..n_shapes {
        let mut pick = g.random_range(0.0..wsum);
        let mut kind = 0;
        while kind + 1 < kinds && pick >= weights[kind] {
            pick -= weights[kind];
            kind += 1;
        }
        let shape = Shape::sample(kind, s as f64, &mut g);
        let j = spec.color_jitter;
        let color = COLORS[kind].map(|c| c + if j > 0.0 { g.random_range(-j..j) } else { 0.0 });
        for y in 0..s {
            for x in 0..s {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    image.set_pixel(y, x, color);
                    label.set(y, x, kind as u8 + 1);
                    raw.set(y, x, i as u16 + 1);
                }
            }
        }
    }
    if spec.base_noise > 0.0 {
        let noise = Normal::new(0.0, spec.base_noise).expect("finite sigma");
        for v in image.data.iter_mut() {
            *v += noise.sample(&mut g);
        }
    }
    // drop fully occluded shapes and renumber the survivors in drawing order
    let mut present = vec![false; n_shapes + 1];
    for &v in &raw.data {
        present[v as usize] = true;
    }
    let mut remap = vec![0u16; n_shapes + 1];
    let mut next = 0;
    for v in 1..=n_shapes {
        if present[v] {
            next += 1;
            remap[v] = next;
        }
    }
    let instances = InstanceMap {
        height: s,
        width: s,
        data: raw.data.iter().map(|&v| remap[v as usize]).collect(),
    };
    SampleRecord {
        image: quantize(image),
        label,
        instances,
    }
}

fn quantize(img: Image) -> Image {
    Image::from_rgb8(img.height, img.width, &img.to_rgb8())
}

/// Sample `index` of `domain` with independent geometry per domain.
pub fn gen_sample(spec: &DomainSpec, domain: Domain, index: usize) -> SampleRecord {
    let rec = render_scene(spec, spec.geometry_seed(domain, index));
    match domain {
        Domain::Source => rec,
        Domain::Target => apply_shift(spec, rec, index),
    }
}

fn apply_shift(spec: &DomainSpec, mut rec: SampleRecord, index: usize) -> SampleRecord {
    let mut g = rng(spec.shift_seed(index));
    spec.shift.apply(&mut rec.image, &mut g);
    rec.image = quantize(rec.image);
    rec
}

/// Source and target renderings of the same scene.
pub fn gen_paired(spec: &DomainSpec, index: usize) -> (SampleRecord, SampleRecord) {
    let src = render_scene(spec, spec.geometry_seed(Domain::Source, index));
    let tgt = apply_shift(spec, src.clone(), index);
    (src, tgt)
}

/// Pixel share of each class over a set of label maps (ignore excluded).
pub fn class_histogram<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    classes: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    for l in labels {
        for &v in &l.data {
            if (v as usize) < classes {
                counts[v as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::oracle::iou;

    #[test]
    fn spec_kv_roundtrip_and_validation() {
        let s = DomainSpec {
            seed: 9,
            rare_weight: 0.2,
            ..Default::default()
        };
        assert_eq!(DomainSpec::from_kv(&s.to_kv()).unwrap(), s);
        assert!(DomainSpec::from_kv("classes = 1").is_err());
        assert!(DomainSpec::from_kv("bogus = 1").is_err());
        assert_eq!(
            DomainSpec::from_kv("shift = identity").unwrap().shift,
            Shift::identity()
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::default();
        assert_eq!(
            gen_sample(&spec, Domain::Target, 3),
            gen_sample(&spec, Domain::Target, 3)
        );
        assert_ne!(
            gen_sample(&spec, Domain::Source, 3),
            gen_sample(&spec, Domain::Source, 4)
        );
    }

    #[test]
    fn identity_shift_pairs_match() {
        let spec = DomainSpec {
            shift: Shift::identity(),
            ..Default::default()
        };
        for i in 0..5 {
            let (a, b) = gen_paired(&spec, i);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shift_is_appearance_only_and_visible() {
        let spec = DomainSpec::default();
        let mut diff = [0.0; 3];
        for i in 0..100 {
            let (a, b) = gen_paired(&spec, i);
            assert_eq!(a.label, b.label);
            assert_eq!(a.instances, b.instances);
            for c in 0..3 {
                let mean = |img: &Image| {
                    img.data.iter().skip(c).step_by(3).sum::<f64>() / (img.data.len() / 3) as f64
                };
                diff[c] += (mean(&a.image) - mean(&b.image)).abs() / 100.0;
            }
        }
        assert!(diff.iter().all(|d| *d > 10.0 / 255.0), "{diff:?}");
    }

    #[test]
    fn labels_and_instances_are_consistent() {
        let spec = DomainSpec::default();
        for i in 0..50 {
            let r = gen_sample(&spec, Domain::Source, i);
            for (l, v) in r.label.data.iter().zip(&r.instances.data) {
                assert!((*l as usize) < spec.classes);
                assert_eq!(*l == 0, *v == 0);
            }
            let n = *r.instances.data.iter().max().unwrap();
            for id in 1..=n {
                assert!(r.instances.data.contains(&id), "ids are compact");
            }
        }
    }

    #[test]
    fn rare_class_is_rare() {
        let spec = DomainSpec::default();
        let recs: Vec<SampleRecord> = (0..400)
            .map(|i| gen_sample(&spec, Domain::Source, i))
            .collect();
        let h = class_histogram(recs.iter().map(|r| &r.label), spec.classes);
        assert!(h.iter().any(|&f| f < 0.05), "{h:?}");
        assert!(h.iter().all(|&f| f > 0.0), "{h:?}");
    }

    #[test]
    fn oracle_jitter_stays_close() {
        let spec = DomainSpec::default();
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..100 {
            let r = gen_sample(&spec, Domain::Source, i);
            let (truth, _) = oracle::oracle_regions(&r.instances);
            let truth_masks = oracle::masks_from_map(&truth);
            let mut g = rng(spec.oracle_seed(Domain::Source, i));
            let jittered = oracle::jitter_regions(&truth, spec.oracle_jitter, &mut g);
            for (id, m) in truth_masks.iter().enumerate() {
                let jm: Vec<u8> = jittered
                    .data
                    .iter()
                    .map(|&v| (v as usize == id) as u8)
                    .collect();
                sum += iou(m, &jm);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean >= 0.8, "mean IoU {mean}");
    }
}

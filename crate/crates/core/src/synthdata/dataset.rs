//! On-disk layout: `root/{source,target}/{images,labels,instances,oracle}/NNNNN.{ppm,pgm}`,
//! plus `index.tsv` (path, domain, split) and the generating `spec.kv`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{gen_sample, oracle, pnm, DomainSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::image::{Image, InstanceMap, LabelMap};
use crate::numeric::rng;

pub const INDEX_FILE: &str = "index.tsv";
pub const SPEC_FILE: &str = "spec.kv";
/// Share of each domain assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source = 0,
    Target = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn of(index: usize, n: usize) -> Split {
        if (index as f64) < (TRAIN_FRACTION * n as f64).round() {
            Split::Train
        } else {
            Split::Val
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(format!("unknown domain {s:?}")),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Image path relative to the dataset root.
    pub path: String,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("path\tdomain\tsplit\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\n", r.path, r.domain, r.split));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some("path\tdomain\tsplit") {
            return Err(bad("missing header path\\tdomain\\tsplit".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("row {}: expected 3 columns", n + 2)));
            }
            rows.push(ManifestRow {
                path: cols[0].to_string(),
                domain: cols[1]
                    .parse()
                    .map_err(|e| bad(format!("row {}: {e}", n + 2)))?,
                split: cols[2]
                    .parse()
                    .map_err(|e| bad(format!("row {}: {e}", n + 2)))?,
            });
        }
        Ok(Manifest { rows })
    }
}

fn file_name(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

fn paths(root: &Path, domain: Domain, index: usize) -> [PathBuf; 4] {
    let d = root.join(domain.as_str());
    [
        d.join("images").join(file_name(index, "ppm")),
        d.join("labels").join(file_name(index, "pgm")),
        d.join("instances").join(file_name(index, "pgm")),
        d.join("oracle").join(file_name(index, "pgm")),
    ]
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `n_source` source and `n_target` target samples with their oracle
/// maps, the manifest and the spec under `out_dir`.
pub fn gen_pair(
    spec: &DomainSpec,
    n_source: usize,
    n_target: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    let s = spec.size;
    let mut manifest = Manifest::default();
    for (domain, n) in [(Domain::Source, n_source), (Domain::Target, n_target)] {
        for sub in ["images", "labels", "instances", "oracle"] {
            create_dir(&out_dir.join(domain.as_str()).join(sub))?;
        }
        for i in 0..n {
            let rec = gen_sample(spec, domain, i);
            let oracle = oracle::oracle_map(
                &rec.instances,
                spec.oracle_jitter,
                &mut rng(spec.oracle_seed(domain, i)),
            );
            let [img, lbl, inst, orc] = paths(out_dir, domain, i);
            pnm::write(&img, &pnm::encode_ppm(s, s, &rec.image.to_rgb8()))?;
            pnm::write(&lbl, &pnm::encode_pgm8(s, s, &rec.label.data))?;
            pnm::write(&inst, &pnm::encode_pgm16(s, s, &rec.instances.data))?;
            pnm::write(&orc, &pnm::encode_pgm16(s, s, &oracle.data))?;
            manifest.rows.push(ManifestRow {
                path: format!("{}/images/{}", domain.as_str(), file_name(i, "ppm")),
                domain,
                split: Split::of(i, n),
            });
        }
    }
    pnm::write(&out_dir.join(INDEX_FILE), manifest.to_tsv().as_bytes())?;
    pnm::write(&out_dir.join(SPEC_FILE), spec.to_kv().as_bytes())?;
    Ok(manifest)
}

/// One loaded sample. Target labels are present only when requested for
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub domain: Domain,
    pub split: Split,
    pub image: Image,
    pub label: Option<LabelMap>,
    pub instances: InstanceMap,
    pub oracle: InstanceMap,
}

impl Sample {
    pub fn record(&self) -> Option<SampleRecord> {
        Some(SampleRecord {
            image: self.image.clone(),
            label: self.label.clone()?,
            instances: self.instances.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub target_labels: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path, opts: LoadOptions) -> Result<Self> {
        let spec_path = root.join(SPEC_FILE);
        let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec = DomainSpec::from_kv(&spec_text)?;
        let index_path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let manifest = Manifest::parse(&text, &index_path)?;
        let s = spec.size;
        let mut samples = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let bad = |msg: &str| Error::Format {
                path: index_path.clone(),
                msg: format!("{}: {msg}", row.path),
            };
            let stem = Path::new(&row.path)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| bad("no file stem"))?;
            let index: usize = stem
                .parse()
                .map_err(|_| bad("file stem is not a sample index"))?;
            let [img, lbl, inst, orc] = paths(root, row.domain, index);
            if root.join(&row.path) != img {
                return Err(bad("path does not follow the dataset layout"));
            }
            let image = Image::from_rgb8(s, s, &pnm::read_expect(&img, s, s, 3)?.raw);
            let want_label = row.domain == Domain::Source || opts.target_labels;
            let label = if want_label {
                Some(LabelMap {
                    height: s,
                    width: s,
                    data: pnm::read_expect(&lbl, s, s, 1)?.raw,
                })
            } else {
                None
            };
            let read16 = |p: &Path| -> Result<InstanceMap> {
                Ok(InstanceMap {
                    height: s,
                    width: s,
                    data: pnm::read_expect(p, s, s, 1)?.samples_u16(),
                })
            };
            samples.push(Sample {
                index,
                domain: row.domain,
                split: row.split,
                image,
                label,
                instances: read16(&inst)?,
                oracle: read16(&orc)?,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            spec,
            samples,
        })
    }

    pub fn select(&self, domain: Domain, split: Option<Split>) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && split.is_none_or(|sp| s.split == sp))
            .collect()
    }
}

//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Coordinates probed per array when it is larger than this.
pub const MIN_COORDS: usize = 64;

/// Relative errors are measured against `max(|analytic|, |numeric|, DENOM_FLOOR)`,
/// so vanishing gradients are held to an absolute bound of `tolerance · DENOM_FLOOR`.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel: f64,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// trainable entry of `params`. Frozen entries are skipped and do not appear
/// in the report. Arrays with more than [`MIN_COORDS`] values are probed at a
/// seeded random subset of that size.
pub fn finite_diff_check(
    params: &ParamStore,
    analytic: &Grads,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport> {
    if step <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut checks = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let len = params.get(&name).map_or(0, |p| p.len());
        let coords: Vec<usize> = if len > MIN_COORDS {
            sample(&mut rng, len, MIN_COORDS).into_vec()
        } else {
            (0..len).collect()
        };
        let zeros;
        let grad = match analytic.get(&name) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; len];
                &zeros
            }
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &k in &coords {
            let orig = params.get(&name).unwrap().data()[k];
            probe.get_mut(&name).unwrap().data_mut()[k] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[k] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing {name}[{k}]")));
            }
            let numeric = (up - down) / (2.0 * step);
            max_abs = max_abs.max((grad[k] - numeric).abs());
            max_rel = max_rel.max(relative_error(grad[k], numeric));
        }
        checks.push(ParamCheck {
            name,
            coords: coords.len(),
            max_rel,
            max_abs,
        });
    }
    let max_rel = checks.iter().map(|c| c.max_rel).fold(0.0, f64::max);
    let max_abs = checks.iter().map(|c| c.max_abs).fold(0.0, f64::max);
    Ok(GradReport {
        params: checks,
        max_rel,
        max_abs,
        tolerance,
        pass: max_rel < tolerance,
    })
}

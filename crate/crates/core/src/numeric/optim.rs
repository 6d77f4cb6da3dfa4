//! AdamW and the exponential-moving-average teacher update.

use std::collections::BTreeMap;

use super::store::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, created lazily for trainable entries only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }
}

/// One decoupled-weight-decay Adam step. `lr_for` maps a parameter name to
/// its learning rate. Frozen entries are left bitwise untouched whatever
/// their gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Grads,
    moments: &mut Moments,
    lr_for: impl Fn(&str) -> f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
        }
    }
    moments.step += 1;
    let t = moments.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        if g.len() != p.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} values, expected {}",
                g.len(),
                p.len()
            )));
        }
        let lr = lr_for(name);
        let m = moments
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = moments
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// `teacher ← momentum·teacher + (1 − momentum)·student`, entry by entry.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidInput(format!(
            "EMA momentum {momentum} outside [0, 1]"
        )));
    }
    teacher.check_same_layout(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

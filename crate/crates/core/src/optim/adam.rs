//! Bias-corrected Adam with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::cloud::{CloudGradients, GaussianCloud};
use crate::density::RowOrigin;
use crate::error::{Error, Result};

pub const GROUP_NAMES: [&str; 5] = ["position", "scale", "rotation", "color", "opacity"];
const WIDTHS: [usize; 5] = [3, 3, 4, 3, 1];
/// First flat parameter slot of each group, matching [`GaussianCloud::param_mut`].
const OFFSETS: [usize; 5] = [0, 3, 6, 10, 13];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    /// In [`GROUP_NAMES`] order.
    pub lrs: [f64; 5],
    pub betas: [f64; 2],
    pub eps: f64,
}

/// First and second moments per group, row-major `N × width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(rows: usize) -> Self {
        Self {
            step: 0,
            m: WIDTHS.iter().map(|w| vec![0.0; rows * w]).collect(),
            v: WIDTHS.iter().map(|w| vec![0.0; rows * w]).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.m[0].len() / WIDTHS[0]
    }

    /// Reorders moments after a structural edit; new rows start at zero.
    pub fn remap(&mut self, origin: &RowOrigin) {
        for g in 0..5 {
            let w = WIDTHS[g];
            for moments in [&mut self.m[g], &mut self.v[g]] {
                let mut out = vec![0.0; origin.len() * w];
                for (r, o) in origin.iter().enumerate() {
                    if let Some(o) = *o {
                        out[r * w..(r + 1) * w].copy_from_slice(&moments[o * w..(o + 1) * w]);
                    }
                }
                *moments = out;
            }
        }
    }

    /// Zeroes both moments of one group.
    pub fn reset_group(&mut self, group: usize) {
        self.m[group].iter_mut().for_each(|x| *x = 0.0);
        self.v[group].iter_mut().for_each(|x| *x = 0.0);
    }
}

pub fn adam_step(
    cloud: &mut GaussianCloud,
    grads: &CloudGradients,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let n = cloud.len();
    if grads.len() != n || state.rows() != n {
        return Err(Error::Shape(format!(
            "cloud has {n} rows, gradients {}, optimizer state {}",
            grads.len(),
            state.rows()
        )));
    }
    for g in 0..5 {
        for i in 0..n {
            for k in 0..WIDTHS[g] {
                let v = grads.get(i, OFFSETS[g] + k);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} (row {i}: {v})", GROUP_NAMES[g])));
                }
            }
        }
    }
    state.step += 1;
    let [b1, b2] = config.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for g in 0..5 {
        let (w, lr) = (WIDTHS[g], config.lrs[g]);
        for i in 0..n {
            for k in 0..w {
                let j = i * w + k;
                let grad = grads.get(i, OFFSETS[g] + k);
                let m = &mut state.m[g][j];
                let v = &mut state.v[g][j];
                *m = b1 * *m + (1.0 - b1) * grad;
                *v = b2 * *v + (1.0 - b2) * grad * grad;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + config.eps);
                *cloud.param_mut(i, OFFSETS[g] + k) -= update;
            }
        }
    }
    Ok(())
}

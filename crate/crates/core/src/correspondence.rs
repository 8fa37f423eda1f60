//! Dense correspondence between pose features and source features, and the
//! attention-style warp it induces.
//!
//! For pose features `f_p` and source features `f_s` (both `[c, h, w]`), every
//! position vector is centered by the per-channel spatial mean of its own map and
//! compared by cosine similarity, giving the full `(h·w) × (h·w)` matrix `C`. The
//! warp replaces each target position by a softmax(α·C)-weighted average of the
//! second source encoding. No row reduction is applied; the whole matrix is kept.

use candle_core::{Tensor, D};

use crate::encoders::LatentFeature;
use crate::error::{bail_invalid, Result};
use crate::nn::{all_finite, softmax};

/// Denominator floor for zero-norm centered vectors.
pub const NORM_EPS: f64 = 1e-8;

/// `[N, h·w, h·w]` centered cosine similarities; row = pose position, column = source position.
#[derive(Debug, Clone)]
pub struct CorrespondenceMatrix {
    data: Tensor,
    height: usize,
    width: usize,
}

impl CorrespondenceMatrix {
    /// Wraps a raw `[N, h·w, h·w]` or `[h·w, h·w]` matrix for a `h × w` grid.
    pub fn from_tensor(data: Tensor, height: usize, width: usize) -> Result<Self> {
        let data = if data.rank() == 2 { data.unsqueeze(0)? } else { data };
        let (_, r, c) = data.dims3()?;
        if r != height * width || c != height * width {
            bail_invalid!("correspondence matrix {r}x{c} does not match a {height}x{width} grid");
        }
        Ok(Self { data, height, width })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    /// Softmax temperature α in `softmax(α·C)`.
    pub temperature: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail_invalid!("warp temperature must be positive, got {}", self.temperature);
        }
        Ok(())
    }
}

/// Centers over positions and scales every position vector to unit length.
fn centered_unit(f: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = f.dims4()?;
    let flat = f.reshape((n, c, h * w))?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(D::Minus1)?)?;
    let norm = centered
        .sqr()?
        .sum_keepdim(1)?
        .maximum(NORM_EPS * NORM_EPS)?
        .sqrt()?;
    Ok(centered.broadcast_div(&norm)?)
}

pub fn correlation_matrix(f_p: &LatentFeature, f_s: &LatentFeature) -> Result<CorrespondenceMatrix> {
    let (p, s) = (f_p.tensor(), f_s.tensor());
    if p.dims() != s.dims() {
        bail_invalid!("pose feature {:?} and source feature {:?} differ in shape", p.dims(), s.dims());
    }
    let (_, c, h, w) = p.dims4()?;
    if c < 2 {
        bail_invalid!("correlation needs at least 2 channels, got {c}");
    }
    if !all_finite(p)? || !all_finite(s)? {
        bail_invalid!("non-finite feature values passed to correlation");
    }
    let p = centered_unit(p)?;
    let s = centered_unit(s)?;
    let data = p.transpose(1, 2)?.contiguous()?.matmul(&s)?;
    Ok(CorrespondenceMatrix {
        data,
        height: h,
        width: w,
    })
}

/// Row-wise `softmax(α·C)`; every row is a probability vector over source positions.
pub fn softmax_rows(c: &CorrespondenceMatrix, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0) {
        bail_invalid!("softmax temperature must be positive, got {alpha}");
    }
    softmax(&(c.tensor() * alpha)?, 2)
}

/// `f_{s→t}(i) = Σ_j softmax_j(α·C(i, j)) · f̄_s(j)`.
pub fn warp(c: &CorrespondenceMatrix, source: &LatentFeature, cfg: &WarpConfig) -> Result<LatentFeature> {
    cfg.validate()?;
    let f = source.tensor();
    let (n, ch, h, w) = f.dims4()?;
    let (cn, rows, cols) = c.tensor().dims3()?;
    if cols != h * w {
        bail_invalid!("correspondence has {cols} source positions, feature has {}", h * w);
    }
    if cn != n {
        bail_invalid!("correspondence batch {cn} differs from feature batch {n}");
    }
    if rows != h * w {
        bail_invalid!("warped grid must match the source grid: {rows} target positions vs {}", h * w);
    }
    let attn = softmax_rows(c, cfg.temperature)?;
    let out = f
        .reshape((n, ch, h * w))?
        .matmul(&attn.transpose(1, 2)?.contiguous()?)?
        .reshape((n, ch, h, w))?;
    LatentFeature::new(out)
}

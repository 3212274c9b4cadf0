//! Two-stage decode latency predictor.
//!
//! Stage one fits, for every SM share on the grid, a solo-run model
//! `bs*b0 + c0 + bs*k0*seqlen` with the batch padded to at least
//! [`DEFAULT_PAD_BS`]. Stage two fits one global co-location factor
//! `max(1, infer*b1 + ft*k1)` that multiplies the solo prediction at the
//! inference share.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::domain::{grid_index, SmPartition, DEFAULT_GRID_STEPS};
use crate::math;
use crate::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Batches below this size run padded kernels and cost the same.
pub const DEFAULT_PAD_BS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProfilePoint {
    pub sm_frac: f64,
    pub ft_frac: f64,
    pub bs: u32,
    pub seqlen: u32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SoloCoeffs {
    pub sm_frac: f64,
    pub b0: f64,
    pub c0: f64,
    pub k0: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SoloModel {
    pub grid_steps: u16,
    pub pad_bs: u32,
    /// One entry per grid point, ascending; entry `i` is share `(i+1)/steps`.
    pub coeffs: Vec<SoloCoeffs>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ColoModel {
    pub b1: f64,
    pub k1: f64,
}

/// Mean and worst absolute relative error of a model over a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FitResiduals {
    pub points: usize,
    pub mape: f64,
    pub max_ape: f64,
}

impl SoloCoeffs {
    pub fn eval(&self, bs_eff: f64, seqlen: f64) -> f64 {
        bs_eff * self.b0 + self.c0 + bs_eff * self.k0 * seqlen
    }
}

impl SoloModel {
    /// Coefficients for `infer_steps / grid_steps`.
    pub fn at_steps(&self, infer_steps: u16) -> Result<&SoloCoeffs> {
        if infer_steps == 0 {
            return Err(Error::InvalidArgument("zero SM share".into()));
        }
        self.coeffs
            .get(infer_steps as usize - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("share {infer_steps}/{} off grid", self.grid_steps)))
    }

    pub fn predict(&self, sm_frac: f64, bs: u32, seqlen: u32) -> Result<f64> {
        let idx = grid_index(sm_frac, self.grid_steps)?;
        self.predict_steps(idx, bs, seqlen)
    }

    pub fn predict_steps(&self, infer_steps: u16, bs: u32, seqlen: u32) -> Result<f64> {
        let c = self.at_steps(infer_steps)?;
        Ok(c.eval(bs.max(self.pad_bs) as f64, seqlen as f64))
    }
}

impl ColoModel {
    /// The co-location factor, clamped at 1.
    pub fn factor(&self, infer_frac: f64, ft_frac: f64) -> f64 {
        (infer_frac * self.b1 + ft_frac * self.k1).max(1.0)
    }
}

pub fn predict_solo(model: &SoloModel, sm_frac: f64, bs: u32, seqlen: u32) -> Result<f64> {
    model.predict(sm_frac, bs, seqlen)
}

pub fn predict_colo(colo: &ColoModel, solo: &SoloModel, partition: SmPartition, bs: u32, seqlen: u32) -> Result<f64> {
    if partition.grid_steps() != solo.grid_steps {
        return Err(Error::InvalidArgument(format!(
            "partition grid 1/{} does not match model grid 1/{}",
            partition.grid_steps(),
            solo.grid_steps
        )));
    }
    let base = solo.predict_steps(partition.infer_steps(), bs, seqlen)?;
    Ok(colo.factor(partition.infer_frac(), partition.ft_frac()) * base)
}

pub fn fit_solo(points: &[ProfilePoint]) -> Result<SoloModel> {
    fit_solo_with(points, DEFAULT_GRID_STEPS, DEFAULT_PAD_BS)
}

/// Ordinary least squares per grid point on `[bs_eff, 1, bs_eff*seqlen]`.
/// Co-run rows (`ft_frac > 0`) are skipped.
pub fn fit_solo_with(points: &[ProfilePoint], grid_steps: u16, pad_bs: u32) -> Result<SoloModel> {
    let mut rows: Vec<Vec<([f64; 3], f64)>> = alloc::vec![Vec::new(); grid_steps as usize];
    for p in points {
        validate_point(p)?;
        if p.ft_frac != 0.0 {
            continue;
        }
        let idx = grid_index(p.sm_frac, grid_steps)?;
        if idx == 0 {
            return Err(Error::InvalidInput("solo point at zero SM share".into()));
        }
        let bs = p.bs.max(pad_bs) as f64;
        rows[idx as usize - 1].push(([bs, 1.0, bs * p.seqlen as f64], p.latency_ms));
    }
    let mut coeffs = Vec::with_capacity(grid_steps as usize);
    for (i, set) in rows.iter().enumerate() {
        let sm_frac = (i + 1) as f64 / grid_steps as f64;
        let context = format!("sm_frac={sm_frac:.2}");
        if set.is_empty() {
            return Err(Error::Fit {
                context,
                reason: "no profile points".into(),
            });
        }
        let [b0, c0, k0] = least_squares(set).map_err(|reason| Error::Fit { context, reason })?;
        coeffs.push(SoloCoeffs { sm_frac, b0, c0, k0 });
    }
    Ok(SoloModel {
        grid_steps,
        pad_bs,
        coeffs,
    })
}

/// Least squares of the co-run ratio `latency / solo` on `[infer, ft]`.
///
/// Prediction clamps the factor at 1, so points the model places below the
/// clamp carry no gradient. The fit starts from plain least squares and
/// refits on the points above the clamp until that set stops changing.
pub fn fit_colo(points: &[ProfilePoint], solo: &SoloModel) -> Result<ColoModel> {
    let mut rows: Vec<([f64; 2], f64)> = Vec::new();
    let mut pairs: Vec<(u16, u16)> = Vec::new();
    for p in points {
        validate_point(p)?;
        if p.ft_frac <= 0.0 {
            continue;
        }
        let part = SmPartition::from_fracs(p.sm_frac, p.ft_frac, solo.grid_steps)?;
        let base = solo.predict_steps(part.infer_steps(), p.bs, p.seqlen)?;
        if !(base > 0.0) {
            return Err(Error::Fit {
                context: format!("sm_frac={:.2}", p.sm_frac),
                reason: "solo prediction is not positive".into(),
            });
        }
        let key = (part.infer_steps(), part.ft_steps());
        if !pairs.contains(&key) {
            pairs.push(key);
        }
        rows.push(([part.infer_frac(), part.ft_frac()], p.latency_ms / base));
    }
    if pairs.len() < 2 {
        return Err(Error::Fit {
            context: "co-location".into(),
            reason: format!("{} distinct (infer, ft) pair(s), need 2", pairs.len()),
        });
    }
    let fit = |set: &[([f64; 2], f64)]| {
        least_squares(set).map_err(|reason| Error::Fit {
            context: "co-location".into(),
            reason,
        })
    };
    let mut c = fit(&rows)?;
    let mut active: Vec<bool> = Vec::new();
    for _ in 0..64 {
        let next: Vec<bool> = rows.iter().map(|(x, _)| x[0] * c[0] + x[1] * c[1] > 1.0).collect();
        if next == active {
            break;
        }
        let subset: Vec<_> = rows
            .iter()
            .zip(&next)
            .filter(|(_, &a)| a)
            .map(|(r, _)| *r)
            .collect();
        match fit(&subset) {
            Ok(refit) => c = refit,
            Err(_) => break,
        }
        active = next;
    }
    Ok(ColoModel { b1: c[0], k1: c[1] })
}

pub fn solo_residuals(model: &SoloModel, points: &[ProfilePoint]) -> Result<FitResiduals> {
    residuals(points.iter().filter(|p| p.ft_frac == 0.0), |p| {
        model.predict(p.sm_frac, p.bs, p.seqlen)
    })
}

pub fn colo_residuals(colo: &ColoModel, solo: &SoloModel, points: &[ProfilePoint]) -> Result<FitResiduals> {
    residuals(points.iter().filter(|p| p.ft_frac > 0.0), |p| {
        let part = SmPartition::from_fracs(p.sm_frac, p.ft_frac, solo.grid_steps)?;
        predict_colo(colo, solo, part, p.bs, p.seqlen)
    })
}

fn residuals<'a>(
    points: impl Iterator<Item = &'a ProfilePoint>,
    predict: impl Fn(&ProfilePoint) -> Result<f64>,
) -> Result<FitResiduals> {
    let (mut n, mut sum, mut worst) = (0usize, 0.0, 0.0f64);
    for p in points {
        let e = math::abs(predict(p)? - p.latency_ms) / p.latency_ms;
        n += 1;
        sum += e;
        worst = worst.max(e);
    }
    Ok(FitResiduals {
        points: n,
        mape: if n == 0 { 0.0 } else { sum / n as f64 },
        max_ape: worst,
    })
}

fn validate_point(p: &ProfilePoint) -> Result<()> {
    if !(p.latency_ms > 0.0) || p.bs == 0 || !(p.ft_frac >= 0.0) {
        return Err(Error::InvalidInput(format!("bad profile point {p:?}")));
    }
    Ok(())
}

/// Solve the normal equations of `rows` by Gaussian elimination on
/// column-equilibrated data. A pivot below `1e-10` of the equilibrated
/// diagonal counts as rank deficiency.
fn least_squares<const N: usize>(rows: &[([f64; N], f64)]) -> core::result::Result<[f64; N], String> {
    if rows.len() < N {
        return Err(format!("{} point(s) for {N} unknowns", rows.len()));
    }
    let mut scale = [0.0; N];
    for (x, _) in rows {
        for j in 0..N {
            scale[j] += x[j] * x[j];
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { 1.0 / math::sqrt(*s) } else { 1.0 };
    }
    let mut a = [[0.0; N]; N];
    let mut b = [0.0; N];
    for (x, y) in rows {
        for i in 0..N {
            let xi = x[i] * scale[i];
            b[i] += xi * y;
            for j in 0..N {
                a[i][j] += xi * x[j] * scale[j];
            }
        }
    }
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&p, &q| math::abs(a[p][col]).total_cmp(&math::abs(a[q][col])))
            .expect("non-empty range");
        if math::abs(a[pivot][col]) < 1e-10 {
            return Err("rank-deficient design matrix".to_string());
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..N {
            let f = a[r][col] / a[col][col];
            for c in col..N {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let mut acc = b[i];
        for j in i + 1..N {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    for (xi, s) in x.iter_mut().zip(scale) {
        *xi *= s;
    }
    Ok(x)
}

/// Memory demand of the two tasks and the shared capacity, in one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ContentionParams {
    pub f_infer: f64,
    pub f_ft: f64,
    pub capacity: f64,
}

impl ContentionParams {
    fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0) {
            return Err(Error::InvalidArgument("bandwidth capacity must be > 0".into()));
        }
        if !(self.f_infer >= 0.0 && self.f_ft >= 0.0) {
            return Err(Error::InvalidArgument("memory demand must be >= 0".into()));
        }
        Ok(())
    }

    /// Bandwidth granted to each task: demands in full when they fit,
    /// otherwise capacity split in proportion to demand.
    pub fn shares(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let total = self.f_infer + self.f_ft;
        if total <= self.capacity {
            return Ok((self.f_infer, self.f_ft));
        }
        Ok((
            self.capacity * self.f_infer / total,
            self.capacity * self.f_ft / total,
        ))
    }
}

/// `max(1, (f_infer + f_ft) / B)`.
pub fn contention_slowdown(p: &ContentionParams) -> Result<f64> {
    p.validate()?;
    Ok(((p.f_infer + p.f_ft) / p.capacity).max(1.0))
}

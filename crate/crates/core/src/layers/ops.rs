//! Parameterless embedding-operation layers and their reverse passes.
//!
//! Inputs are the gathered embedding moments `z_e`, laid out feature-major:
//! `M x K` for copy/sum/FM and `M x F x K` for FFM.

use serde::{Deserialize, Serialize};

use super::{LayerError, MomentGrad, MomentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingOp {
    Copy,
    DimensionAwareSum,
    Fm,
    Ffm,
}

impl EmbeddingOp {
    pub fn tag(self) -> u8 {
        match self {
            EmbeddingOp::Copy => 0,
            EmbeddingOp::DimensionAwareSum => 1,
            EmbeddingOp::Fm => 2,
            EmbeddingOp::Ffm => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => EmbeddingOp::Copy,
            1 => EmbeddingOp::DimensionAwareSum,
            2 => EmbeddingOp::Fm,
            3 => EmbeddingOp::Ffm,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingOp::Copy => "copy",
            EmbeddingOp::DimensionAwareSum => "das",
            EmbeddingOp::Fm => "fm",
            EmbeddingOp::Ffm => "ffm",
        }
    }
}

impl std::str::FromStr for EmbeddingOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(EmbeddingOp::Copy),
            "das" => Ok(EmbeddingOp::DimensionAwareSum),
            "fm" => Ok(EmbeddingOp::Fm),
            "ffm" => Ok(EmbeddingOp::Ffm),
            other => Err(format!("unknown embedding op `{other}` (expected copy, das, fm or ffm)")),
        }
    }
}

impl std::fmt::Display for EmbeddingOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[inline(always)]
fn tick(n: u64) {
    #[cfg(any(test, feature = "op-count"))]
    super::op_count::add(n);
    #[cfg(not(any(test, feature = "op-count")))]
    let _ = n;
}

fn rows(z_e: &MomentVector, width: usize) -> Result<usize, LayerError> {
    if width == 0 || !z_e.len().is_multiple_of(width) {
        return Err(LayerError::ShapeMismatch(format!(
            "{} embedding moments do not split into rows of {}",
            z_e.len(),
            width
        )));
    }
    Ok(z_e.len() / width)
}

fn check_fields(fields: &[u32], num_fields: usize, m: usize) -> Result<(), LayerError> {
    if fields.len() != m {
        return Err(LayerError::ShapeMismatch(format!(
            "{} field ids for {} features",
            fields.len(),
            m
        )));
    }
    for &field in fields {
        if field == 0 || field as usize > num_fields {
            return Err(LayerError::FieldOutOfRange { field, num_fields });
        }
    }
    Ok(())
}

pub fn copy_op_forward(z_e: &MomentVector) -> MomentVector {
    z_e.clone()
}

/// Places each feature's `K` moments in the block of its field, summing
/// features that share a field. Gives the copy operation a fixed width
/// `F * K` in front of a dense layer.
pub(crate) fn field_slots(
    z_e: &MomentVector,
    fields: &[u32],
    num_fields: usize,
    k: usize,
) -> Result<MomentVector, LayerError> {
    let m = rows(z_e, k)?;
    check_fields(fields, num_fields, m)?;
    let mut out = MomentVector::zeros(num_fields * k);
    for (i, &field) in fields.iter().enumerate() {
        let base = (field as usize - 1) * k;
        for kk in 0..k {
            out.means[base + kk] += z_e.means[i * k + kk];
            out.variances[base + kk] += z_e.variances[i * k + kk];
        }
    }
    Ok(out)
}

pub(crate) fn field_slots_backward(fields: &[u32], k: usize, grad: &MomentGrad) -> MomentGrad {
    let mut out = MomentGrad::zeros(fields.len() * k);
    for (i, &field) in fields.iter().enumerate() {
        let base = (field as usize - 1) * k;
        for kk in 0..k {
            out.means[i * k + kk] = grad.means[base + kk];
            out.variances[i * k + kk] = grad.variances[base + kk];
        }
    }
    out
}

/// Dimension-wise sum over features: independent Gaussians add.
pub fn das_forward(z_e: &MomentVector, k: usize) -> Result<MomentVector, LayerError> {
    let m = rows(z_e, k)?;
    let mut out = MomentVector::zeros(k);
    for i in 0..m {
        for kk in 0..k {
            out.means[kk] += z_e.means[i * k + kk];
            out.variances[kk] += z_e.variances[i * k + kk];
        }
    }
    Ok(out)
}

pub(crate) fn das_backward(m: usize, k: usize, grad: &MomentGrad) -> MomentGrad {
    let mut out = MomentGrad::zeros(m * k);
    for i in 0..m {
        out.means[i * k..(i + 1) * k].copy_from_slice(&grad.means);
        out.variances[i * k..(i + 1) * k].copy_from_slice(&grad.variances);
    }
    out
}

/// Running sums behind the O(M) FM moments of one output dimension.
#[derive(Debug, Clone, Copy, Default)]
struct FmSums {
    /// sum of means
    s1: f64,
    /// sum of squared means
    s2: f64,
    /// sum of second moments
    q1: f64,
    /// sum of squared second moments
    q2: f64,
    /// sum of fourth powers of means
    r2: f64,
}

impl FmSums {
    #[inline]
    fn add(&mut self, mean: f64, variance: f64) {
        let mm = mean * mean;
        let sm = mm + variance;
        self.s1 += mean;
        self.s2 += mm;
        self.q1 += sm;
        self.q2 += sm * sm;
        self.r2 += mm * mm;
    }

    fn mean(&self) -> f64 {
        0.5 * (self.s1 * self.s1 - self.s2)
    }

    /// Raw variance before clamping at zero.
    fn variance(&self) -> f64 {
        0.5 * (self.q1 * self.q1 - self.q2) - 0.5 * (self.s2 * self.s2 - self.r2)
    }

    /// d(mean, variance)/d(m_i, v_i) contracted with upstream `(gm, gv)`.
    #[inline]
    fn backward(&self, mean: f64, variance: f64, gm: f64, gv: f64) -> (f64, f64) {
        let mm = mean * mean;
        let sm = mm + variance;
        let d_mean = gm * (self.s1 - mean)
            + gv * (2.0 * mean * (self.q1 - sm) - 2.0 * mean * (self.s2 - mm));
        let d_var = gv * (self.q1 - sm);
        (d_mean, d_var)
    }
}

/// FM pairwise-interaction moments in O(MK) using second moments.
///
/// Each pair product is moment-matched and pairs are treated as
/// independent. Fewer than two features give the empty sum.
pub fn fm_forward(z_e: &MomentVector, k: usize) -> Result<MomentVector, LayerError> {
    let m = rows(z_e, k)?;
    let mut out = MomentVector::with_capacity(k);
    for kk in 0..k {
        let mut sums = FmSums::default();
        for i in 0..m {
            sums.add(z_e.means[i * k + kk], z_e.variances[i * k + kk]);
            tick(1);
        }
        out.push(sums.mean(), sums.variance().max(0.0));
        tick(1);
    }
    Ok(out)
}

pub(crate) fn fm_backward(z_e: &MomentVector, k: usize, grad: &MomentGrad) -> MomentGrad {
    let m = z_e.len() / k;
    let mut out = MomentGrad::zeros(m * k);
    for kk in 0..k {
        let mut sums = FmSums::default();
        for i in 0..m {
            sums.add(z_e.means[i * k + kk], z_e.variances[i * k + kk]);
        }
        let gm = grad.means[kk];
        let gv = if sums.variance() < 0.0 { 0.0 } else { grad.variances[kk] };
        for i in 0..m {
            let idx = i * k + kk;
            let (dm, dv) = sums.backward(z_e.means[idx], z_e.variances[idx], gm, gv);
            out.means[idx] = dm;
            out.variances[idx] = dv;
        }
    }
    out
}

/// O(M^2 K) pair sum with the same per-pair moment matching as [`fm_forward`].
pub fn fm_forward_bruteforce(z_e: &MomentVector, k: usize) -> Result<MomentVector, LayerError> {
    let m = rows(z_e, k)?;
    let mut out = MomentVector::zeros(k);
    for kk in 0..k {
        for i in 0..m {
            for j in i + 1..m {
                let (mi, vi) = z_e.get(i * k + kk);
                let (mj, vj) = z_e.get(j * k + kk);
                out.means[kk] += mi * mj;
                out.variances[kk] += (mi * mi + vi) * (mj * mj + vj) - mi * mi * mj * mj;
                tick(1);
            }
        }
    }
    Ok(out)
}

/// Per-dimension field sums used by the fast FFM form.
///
/// `p[a][b]`, `pv[a][b]`, `p2[a][b]`: sums over features in field `a` of
/// the mean, variance and squared mean of their field-`b` entry.
struct FfmSums {
    f: usize,
    p: Vec<f64>,
    pv: Vec<f64>,
    p2: Vec<f64>,
    /// Within-field FM sums on the field's own row.
    own: Vec<FmSums>,
}

impl FfmSums {
    fn collect(z_e: &MomentVector, fields: &[u32], f: usize, k: usize, kk: usize) -> Self {
        let mut sums = FfmSums {
            f,
            p: vec![0.0; f * f],
            pv: vec![0.0; f * f],
            p2: vec![0.0; f * f],
            own: vec![FmSums::default(); f],
        };
        let width = f * k;
        for (i, &field) in fields.iter().enumerate() {
            let a = field as usize - 1;
            for b in 0..f {
                let idx = i * width + b * k + kk;
                let (mean, var) = (z_e.means[idx], z_e.variances[idx]);
                sums.p[a * f + b] += mean;
                sums.pv[a * f + b] += var;
                sums.p2[a * f + b] += mean * mean;
                if a == b {
                    sums.own[a].add(mean, var);
                }
                tick(1);
            }
        }
        sums
    }

    fn idx(&self, a: usize, b: usize) -> usize {
        a * self.f + b
    }

    /// Mean and raw variance: within-field FM terms plus cross-field
    /// product-of-sums terms.
    fn moments(&self) -> (f64, f64) {
        let mut mean = 0.0;
        let mut var = 0.0;
        for a in 0..self.f {
            mean += self.own[a].mean();
            var += self.own[a].variance();
            tick(1);
            for b in a + 1..self.f {
                let (ab, ba) = (self.idx(a, b), self.idx(b, a));
                mean += self.p[ab] * self.p[ba];
                var += self.p2[ab] * self.pv[ba] + self.p2[ba] * self.pv[ab] + self.pv[ab] * self.pv[ba];
                tick(1);
            }
        }
        (mean, var)
    }
}

/// Field-aware FM moments in O(FKM + KF^2).
///
/// `fields[i]` is the 1-based field of feature `i`; feature `i`'s row `f`
/// is the vector it uses against features of field `f`.
pub fn ffm_forward(
    z_e: &MomentVector,
    fields: &[u32],
    num_fields: usize,
    k: usize,
) -> Result<MomentVector, LayerError> {
    let m = rows(z_e, num_fields * k)?;
    check_fields(fields, num_fields, m)?;
    let mut out = MomentVector::with_capacity(k);
    for kk in 0..k {
        let (mean, var) = FfmSums::collect(z_e, fields, num_fields, k, kk).moments();
        out.push(mean, var.max(0.0));
    }
    Ok(out)
}

pub(crate) fn ffm_backward(
    z_e: &MomentVector,
    fields: &[u32],
    num_fields: usize,
    k: usize,
    grad: &MomentGrad,
) -> MomentGrad {
    let f = num_fields;
    let width = f * k;
    let mut out = MomentGrad::zeros(z_e.len());
    for kk in 0..k {
        let sums = FfmSums::collect(z_e, fields, f, k, kk);
        let gm = grad.means[kk];
        let gv = if sums.moments().1 < 0.0 { 0.0 } else { grad.variances[kk] };
        for (i, &field) in fields.iter().enumerate() {
            let a = field as usize - 1;
            for b in 0..f {
                let idx = i * width + b * k + kk;
                let (mean, var) = (z_e.means[idx], z_e.variances[idx]);
                let (dm, dv) = if a == b {
                    sums.own[a].backward(mean, var, gm, gv)
                } else {
                    // partner sums: features of field b, their row a
                    let ba = sums.idx(b, a);
                    (
                        gm * sums.p[ba] + gv * 2.0 * mean * sums.pv[ba],
                        gv * (sums.p2[ba] + sums.pv[ba]),
                    )
                };
                out.means[idx] = dm;
                out.variances[idx] = dv;
            }
        }
    }
    out
}

/// Direct O(M^2 K) field-aware pair sum.
pub fn ffm_forward_bruteforce(
    z_e: &MomentVector,
    fields: &[u32],
    num_fields: usize,
    k: usize,
) -> Result<MomentVector, LayerError> {
    let width = num_fields * k;
    let m = rows(z_e, width)?;
    check_fields(fields, num_fields, m)?;
    let mut out = MomentVector::zeros(k);
    for kk in 0..k {
        for i in 0..m {
            for j in i + 1..m {
                // feature i against field f_j, feature j against field f_i
                let x = i * width + (fields[j] as usize - 1) * k + kk;
                let y = j * width + (fields[i] as usize - 1) * k + kk;
                let (mx, vx) = z_e.get(x);
                let (my, vy) = z_e.get(y);
                out.means[kk] += mx * my;
                out.variances[kk] += (mx * mx + vx) * (my * my + vy) - mx * mx * my * my;
                tick(1);
            }
        }
    }
    Ok(out)
}

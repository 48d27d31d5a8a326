//! Named parameter vectors and the algebra the federation runs on.
//!
//! Every network in the simulator is flattened into a [`NamedParams`]: an
//! ordered map from group name (`"encoder"`, `"predictor"`) to a dense `f64`
//! vector. Aggregation, EMA blending and divergence all operate on these.

use std::collections::BTreeMap;

use thiserror::Error;

pub const ENCODER: &str = "encoder";
pub const PREDICTOR: &str = "predictor";

/// Divergences below this are treated as zero by the autoscaler.
pub const DEGENERATE_DIVERGENCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weighted average over an empty list")]
    Empty,
    #[error("aggregation weights must be nonnegative and sum to a positive value")]
    BadWeights,
    #[error("mu = {0} is outside [0, 1]")]
    MuOutOfRange(f64),
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("negative input to compute_mu (lambda = {lambda}, divergence = {divergence})")]
    NegativeInput { lambda: f64, divergence: f64 },
    #[error("tau = {0} is outside [0, 1)")]
    TauOutOfRange(f64),
    #[error("degenerate divergence {0:e} (below {DEGENERATE_DIVERGENCE:e})")]
    DegenerateDivergence(f64),
    #[error("malformed parameter record: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, ParamsError>;

/// Flat parameter vector partitioned into named groups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedParams {
    groups: BTreeMap<String, Vec<f64>>,
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_groups<I, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        Self {
            groups: groups.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    /// Single-group convenience constructor, mostly for tests.
    pub fn single(name: &str, values: Vec<f64>) -> Self {
        Self::from_groups([(name, values)])
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Option<Vec<f64>> {
        self.groups.insert(name.into(), values)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.groups.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.groups.get_mut(name)
    }

    pub fn group(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| ParamsError::UnknownGroup(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn total_len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Group names and lengths agree with `other`.
    pub fn check_same_shape(&self, other: &NamedParams) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(ParamsError::ShapeMismatch(format!(
                "{} groups vs {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.groups.iter().zip(other.groups.iter()) {
            if ka != kb {
                return Err(ParamsError::ShapeMismatch(format!(
                    "group `{ka}` vs `{kb}`"
                )));
            }
            if va.len() != vb.len() {
                return Err(ParamsError::ShapeMismatch(format!(
                    "group `{ka}` has {} vs {} elements",
                    va.len(),
                    vb.len()
                )));
            }
        }
        Ok(())
    }

    /// Copy of the listed groups only.
    pub fn subset(&self, names: &[&str]) -> Result<NamedParams> {
        let mut out = NamedParams::new();
        for name in names {
            out.insert(*name, self.group(name)?.to_vec());
        }
        Ok(out)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &NamedParams) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(other.groups.iter()).all(|((ka, va), (kb, vb))| {
                ka == kb
                    && va.len() == vb.len()
                    && va.iter().zip(vb).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }

    pub fn is_finite(&self) -> bool {
        self.groups.values().flatten().all(|v| v.is_finite())
    }

    /// Serializes to the flat binary checkpoint record.
    ///
    /// Layout (all integers little-endian `u32`): group count, then for each
    /// group its name length, name bytes and element count; then every
    /// element as a little-endian `f64`, groups in the same order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.total_len() * 8);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, values) in &self.groups {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        }
        for values in self.groups.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NamedParams> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let n_groups = cursor.u32()? as usize;
        let mut header = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let name_len = cursor.u32()? as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|e| ParamsError::Decode(format!("group name is not utf-8: {e}")))?
                .to_string();
            let count = cursor.u32()? as usize;
            header.push((name, count));
        }
        let mut out = NamedParams::new();
        for (name, count) in header {
            let raw = cursor.take(count * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if out.insert(name.clone(), values).is_some() {
                return Err(ParamsError::Decode(format!("duplicate group `{name}`")));
            }
        }
        if cursor.pos != bytes.len() {
            return Err(ParamsError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Ok(out)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ParamsError::Decode("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Convex combination of parameter sets. Weights are normalized to sum to one,
/// so raw sample counts can be passed directly.
pub fn weighted_average(entries: &[(&NamedParams, f64)]) -> Result<NamedParams> {
    let (first, _) = entries.first().ok_or(ParamsError::Empty)?;
    for (p, w) in entries {
        first.check_same_shape(p)?;
        if !(w.is_finite() && *w >= 0.0) {
            return Err(ParamsError::BadWeights);
        }
    }
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(ParamsError::BadWeights);
    }

    let mut out = NamedParams::new();
    for (name, values) in &first.groups {
        let mut acc = vec![0.0; values.len()];
        for (p, w) in entries {
            let w = w / total;
            for (a, x) in acc.iter_mut().zip(&p.groups[name]) {
                *a += w * x;
            }
        }
        out.insert(name.clone(), acc);
    }
    Ok(out)
}

/// `mu * local + (1 - mu) * global` on the listed groups; every other group is
/// copied from `global`.
pub fn ema_blend(
    local: &NamedParams,
    global: &NamedParams,
    mu: f64,
    groups: &[&str],
) -> Result<NamedParams> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(ParamsError::MuOutOfRange(mu));
    }
    local.check_same_shape(global)?;
    for g in groups {
        if !global.contains(g) {
            return Err(ParamsError::UnknownGroup(g.to_string()));
        }
    }
    let mut out = global.clone();
    for g in groups {
        let dst = out.groups.get_mut(*g).unwrap();
        blend_into(dst, &local.groups[*g], mu);
    }
    Ok(out)
}

/// In place: `dst <- mu * local + (1 - mu) * dst`. The endpoints copy exactly.
pub(crate) fn blend_into(dst: &mut [f64], local: &[f64], mu: f64) {
    debug_assert_eq!(dst.len(), local.len());
    if mu == 0.0 {
        return;
    }
    if mu == 1.0 {
        dst.copy_from_slice(local);
        return;
    }
    let nu = 1.0 - mu;
    for (d, l) in dst.iter_mut().zip(local) {
        *d = mu * l + nu * *d;
    }
}

/// Euclidean norm of `a - b` over the concatenation of the listed groups.
pub fn divergence(a: &NamedParams, b: &NamedParams, groups: &[&str]) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut sum = 0.0;
    for g in groups {
        let (va, vb) = (a.group(g)?, b.group(g)?);
        sum += va
            .iter()
            .zip(vb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(sum.sqrt())
}

/// Encoder-only divergence, the quantity the decay rate is measured on.
pub fn encoder_divergence(a: &NamedParams, b: &NamedParams) -> Result<f64> {
    divergence(a, b, &[ENCODER])
}

/// Decay rate `min(lambda * divergence, 1)`.
pub fn compute_mu(lambda: f64, divergence: f64) -> Result<f64> {
    if lambda < 0.0 || divergence < 0.0 || lambda.is_nan() || divergence.is_nan() {
        return Err(ParamsError::NegativeInput { lambda, divergence });
    }
    Ok((lambda * divergence).min(1.0))
}

/// Personalized scaler `tau / ||global - local||` over encoders, chosen so that
/// the decay rate equals `tau` at the calibration round.
pub fn autoscale_lambda(global: &NamedParams, local: &NamedParams, tau: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&tau) {
        return Err(ParamsError::TauOutOfRange(tau));
    }
    let div = encoder_divergence(global, local)?;
    autoscale_from_divergence(tau, div)
}

pub fn autoscale_from_divergence(tau: f64, div: f64) -> Result<f64> {
    if div.is_nan() || div <= DEGENERATE_DIVERGENCE {
        return Err(ParamsError::DegenerateDivergence(div));
    }
    Ok(tau / div)
}

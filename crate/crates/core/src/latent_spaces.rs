//! Latent-code containers, editing, style mixing and disentanglement metrics
//! over W / W⁺.
//!
//! A [`LatentCode`] is an `L × d` matrix with one row per style input of the
//! generator. Codes whose rows are all identical lie in W.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatentJson", into = "LatentJson")]
pub struct LatentCode {
    layers: Tensor,
}

#[derive(Serialize, Deserialize)]
struct LatentJson {
    layers: Vec<Vec<f64>>,
}

impl TryFrom<LatentJson> for LatentCode {
    type Error = Error;

    fn try_from(j: LatentJson) -> Result<Self> {
        LatentCode::from_rows(&j.layers)
    }
}

impl From<LatentCode> for LatentJson {
    fn from(c: LatentCode) -> Self {
        LatentJson { layers: c.rows() }
    }
}

impl LatentCode {
    pub fn new(layers: Tensor) -> Result<Self> {
        if layers.ndim() != 2 || layers.shape()[0] == 0 || layers.shape()[1] == 0 {
            return Err(Error::dim(format!(
                "latent code must be a non-empty L x d matrix, got {:?}",
                layers.shape()
            )));
        }
        if !layers.is_finite() {
            return Err(Error::Numeric("latent code has non-finite entries".into()));
        }
        Ok(Self { layers })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let l = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("latent rows have unequal lengths"));
        }
        Self::new(Tensor::new(vec![l, d], rows.concat())?)
    }

    /// Every one of the `l` rows equals `w`.
    pub fn broadcast(w: &[f64], l: usize) -> Result<Self> {
        Self::new(Tensor::new(vec![l, w.len()], w.repeat(l))?)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.layers.shape()[1]
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.layers.row(l)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers())
            .map(|l| self.row(l).to_vec())
            .collect()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.layers
    }

    pub fn into_tensor(self) -> Tensor {
        self.layers
    }

    /// True when all rows are identical.
    pub fn lies_in_w(&self) -> bool {
        let first = self.row(0);
        (1..self.num_layers()).all(|l| self.row(l) == first)
    }

    fn ensure_same_shape(&self, other: &LatentCode) -> Result<()> {
        if self.layers.shape() != other.layers.shape() {
            return Err(Error::dim(format!(
                "latent shapes {:?} and {:?} differ",
                self.layers.shape(),
                other.layers.shape()
            )));
        }
        Ok(())
    }
}

/// The mean mapped latent `w̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageLatent {
    pub value: Vec<f64>,
}

impl AverageLatent {
    pub fn new(value: Vec<f64>) -> Result<Self> {
        if value.is_empty() || value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "average latent must be finite and non-empty".into(),
            ));
        }
        Ok(Self { value })
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub name: String,
    pub delta: LatentCode,
}

impl EditDirection {
    /// A W-space direction applied identically to all `l` layers.
    pub fn from_w(name: impl Into<String>, delta: &[f64], l: usize) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            delta: LatentCode::broadcast(delta, l)?,
        })
    }
}

/// A named set of edit directions with unique names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<EditDirection>", into = "Vec<EditDirection>")]
pub struct DirectionCatalog {
    directions: Vec<EditDirection>,
}

impl TryFrom<Vec<EditDirection>> for DirectionCatalog {
    type Error = Error;

    fn try_from(directions: Vec<EditDirection>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &directions {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::arg(format!("duplicate direction name `{}`", d.name)));
            }
        }
        Ok(Self { directions })
    }
}

impl From<DirectionCatalog> for Vec<EditDirection> {
    fn from(c: DirectionCatalog) -> Self {
        c.directions
    }
}

impl DirectionCatalog {
    pub fn get(&self, name: &str) -> Option<&EditDirection> {
        self.directions.iter().find(|d| d.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.directions.iter().map(|d| d.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &EditDirection> {
        self.directions.iter()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// `w_inv + alpha · dir.delta`.
pub fn apply_edit(w_inv: &LatentCode, dir: &EditDirection, alpha: f64) -> Result<LatentCode> {
    w_inv.ensure_same_shape(&dir.delta)?;
    let layers = w_inv
        .layers
        .zip_map(&dir.delta.layers, |w, d| w + alpha * d)?;
    LatentCode::new(layers)
}

/// Rows `0..k` from `w_r`, the rest from `w_s`.
pub fn style_mix_progressive(w_s: &LatentCode, w_r: &LatentCode, k: usize) -> Result<LatentCode> {
    w_s.ensure_same_shape(w_r)?;
    let l = w_s.num_layers();
    if k > l {
        return Err(Error::arg(format!("k = {k} outside 0..={l}")));
    }
    let rows: Vec<Vec<f64>> = (0..l)
        .map(|i| if i < k { w_r.row(i) } else { w_s.row(i) }.to_vec())
        .collect();
    LatentCode::from_rows(&rows)
}

/// `w_s` with its `k`-th row (1-based) taken from `w_r`.
pub fn style_mix_exchange(w_s: &LatentCode, w_r: &LatentCode, k: usize) -> Result<LatentCode> {
    w_s.ensure_same_shape(w_r)?;
    let l = w_s.num_layers();
    if k == 0 || k > l {
        return Err(Error::arg(format!("k = {k} outside 1..={l}")));
    }
    let rows: Vec<Vec<f64>> = (0..l)
        .map(|i| if i + 1 == k { w_r.row(i) } else { w_s.row(i) }.to_vec())
        .collect();
    LatentCode::from_rows(&rows)
}

/// `(1 − σ)·w_r + σ·w_s`; both endpoints are reproduced exactly.
pub fn style_mix_interpolate(w_r: &LatentCode, w_s: &LatentCode, sigma: f64) -> Result<LatentCode> {
    w_r.ensure_same_shape(w_s)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::arg(format!("sigma = {sigma} outside [0, 1]")));
    }
    let layers = if sigma == 0.0 {
        w_r.layers.clone()
    } else if sigma == 1.0 {
        w_s.layers.clone()
    } else {
        w_r.layers
            .zip_map(&w_s.layers, |r, s| (1.0 - sigma) * r + sigma * s)?
    };
    LatentCode::new(layers)
}

fn ensure_uniform(codes: &[LatentCode]) -> Result<()> {
    if let Some(first) = codes.first() {
        for c in codes {
            first.ensure_same_shape(c)?;
        }
    }
    Ok(())
}

/// Mean over codes of the channel-averaged population standard deviation
/// across layers.
pub fn dispersion(codes: &[LatentCode]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::arg("dispersion of an empty list"));
    }
    ensure_uniform(codes)?;
    let per_code = codes.iter().map(|c| {
        let (l, d) = (c.num_layers(), c.dim());
        let total: f64 = (0..d)
            .map(|ch| {
                // shifted by row 0 so equal rows give exactly zero
                let x0 = c.row(0)[ch];
                let d = |i: usize| c.row(i)[ch] - x0;
                let mean = (0..l).map(d).sum::<f64>() / l as f64;
                let var = (0..l).map(|i| (d(i) - mean).powi(2)).sum::<f64>() / l as f64;
                var.sqrt()
            })
            .sum();
        total / d as f64
    });
    Ok(per_code.sum::<f64>() / codes.len() as f64)
}

/// Mean over pairs of the layer-averaged L1 distance between each code row
/// and its W reference.
pub fn distance_to_w(codes: &[LatentCode], refs: &[LatentCode]) -> Result<f64> {
    if codes.len() != refs.len() {
        return Err(Error::arg(format!(
            "{} codes but {} references",
            codes.len(),
            refs.len()
        )));
    }
    if codes.is_empty() {
        return Err(Error::arg("distance of an empty list"));
    }
    ensure_uniform(codes)?;
    let mut total = 0.0;
    for (c, r) in codes.iter().zip(refs) {
        c.ensure_same_shape(r)?;
        if !r.lies_in_w() {
            return Err(Error::arg("reference code does not lie in W"));
        }
        let w = r.row(0);
        let per_layer: f64 = (0..c.num_layers())
            .map(|i| {
                c.row(i)
                    .iter()
                    .zip(w)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        total += per_layer / c.num_layers() as f64;
    }
    Ok(total / codes.len() as f64)
}

/// Channels `range` of `code` and of `reference`, each `L × |range|`, for plotting
/// per-layer channel values against the W baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTable {
    pub channels: Range<usize>,
    pub code: Tensor,
    pub reference: Tensor,
}

impl CorrelationTable {
    /// CSV with columns `layer,channel,code,reference`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,channel,code,reference\n");
        let width = self.channels.len();
        let layers = self.code.numel().checked_div(width).unwrap_or(0);
        for l in 0..layers {
            for (j, ch) in self.channels.clone().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    l + 1,
                    ch,
                    self.code.data()[l * width + j],
                    self.reference.data()[l * width + j]
                ));
            }
        }
        out
    }
}

pub fn layer_correlation_table(
    code: &LatentCode,
    reference: &LatentCode,
    channels: Range<usize>,
) -> Result<CorrelationTable> {
    code.ensure_same_shape(reference)?;
    if channels.start > channels.end || channels.end > code.dim() {
        return Err(Error::arg(format!(
            "channel range {channels:?} outside 0..{}",
            code.dim()
        )));
    }
    let slice = |c: &LatentCode| {
        let rows: Vec<f64> = (0..c.num_layers())
            .flat_map(|l| c.row(l)[channels.clone()].to_vec())
            .collect();
        Tensor::new(vec![c.num_layers(), channels.len()], rows)
    };
    Ok(CorrelationTable {
        code: slice(code)?,
        reference: slice(reference)?,
        channels,
    })
}

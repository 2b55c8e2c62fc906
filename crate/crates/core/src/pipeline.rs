//! Inversion, editing, style mixing, β sweeps and flow-driven edits over a
//! loaded set of models.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::PyramidFeatures;
use crate::error::{Error, Result};
use crate::generator::RgbCanvas;
use crate::latent_spaces::{
    apply_edit, style_mix_exchange, style_mix_interpolate, style_mix_progressive, EditDirection,
    LatentCode,
};
use crate::models::Models;
use crate::smart::{BetaWeights, Flow};
use crate::tensor::Tensor;

/// Source of the pyramid and latent code for an image.
pub trait LatentEncoder: Send + Sync {
    fn encode(&self, models: &Models, image: &Tensor) -> Result<(PyramidFeatures, LatentCode)>;
}

/// The trained encoder and prediction head.
#[derive(Clone, Copy, Debug, Default)]
pub struct LearnedEncoder;

impl LatentEncoder for LearnedEncoder {
    fn encode(&self, models: &Models, image: &Tensor) -> Result<(PyramidFeatures, LatentCode)> {
        let (pyramid, lat) = models.encoder.encode(&models.params, image)?;
        let w = models
            .encoder
            .predict_latents(&models.params, &lat, &models.w_avg()?)?;
        Ok((pyramid, w))
    }
}

/// Returns known ground-truth codes for known images and the learned
/// pyramid. Unknown images are an argument error.
#[derive(Clone, Debug, Default)]
pub struct OracleEncoder {
    pairs: Vec<(Tensor, LatentCode)>,
}

impl OracleEncoder {
    pub fn new(images: &[Tensor], codes: &[LatentCode]) -> Result<Self> {
        if images.len() != codes.len() {
            return Err(Error::arg("oracle needs one code per image"));
        }
        Ok(Self {
            pairs: images.iter().cloned().zip(codes.iter().cloned()).collect(),
        })
    }
}

impl LatentEncoder for OracleEncoder {
    fn encode(&self, models: &Models, image: &Tensor) -> Result<(PyramidFeatures, LatentCode)> {
        let w = self
            .pairs
            .iter()
            .find(|(img, _)| img.exact_eq(image))
            .map(|(_, w)| w.clone())
            .ok_or_else(|| Error::arg("image unknown to the oracle"))?;
        let (pyramid, _) = models.encoder.encode(&models.params, image)?;
        Ok((pyramid, w))
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub w_inv: LatentCode,
    pub image_baseline: RgbCanvas,
    pub image_refined: RgbCanvas,
    /// Keys and values for every later edit of this image.
    pub pyramid: PyramidFeatures,
}

/// Synthesizes `w` with the refiner applied at the split layer.
fn refined_synthesis(
    models: &Models,
    w: &LatentCode,
    pyramid: &PyramidFeatures,
    beta: BetaWeights,
    flow: Option<&Flow>,
) -> Result<RgbCanvas> {
    let ps = &models.params;
    let l = models.smart_layer();
    let (feat, canvas) = models.generator.synthesize_to_layer(ps, w, l)?;
    let refined = match flow {
        Some(flow) => models
            .smart
            .refine_with_flow(ps, &feat, pyramid, beta, flow)?,
        None => models.smart.refine(ps, &feat, pyramid, beta)?,
    };
    models
        .generator
        .synthesize_from_layer(ps, &refined, &canvas, w, l)
}

pub fn invert(models: &Models, image: &Tensor, beta: BetaWeights) -> Result<InversionResult> {
    invert_with(models, &LearnedEncoder, image, beta)
}

pub fn invert_with(
    models: &Models,
    encoder: &dyn LatentEncoder,
    image: &Tensor,
    beta: BetaWeights,
) -> Result<InversionResult> {
    let (pyramid, w_inv) = encoder.encode(models, image)?;
    let image_baseline = models.generator.synthesize(&models.params, &w_inv)?;
    let image_refined = refined_synthesis(models, &w_inv, &pyramid, beta, None)?;
    Ok(InversionResult {
        w_inv,
        image_baseline,
        image_refined,
        pyramid,
    })
}

/// Encoder, head and plain synthesis without the refiner.
pub fn invert_baseline(models: &Models, image: &Tensor) -> Result<(LatentCode, RgbCanvas)> {
    let (_, w) = LearnedEncoder.encode(models, image)?;
    let img = models.generator.synthesize(&models.params, &w)?;
    Ok((w, img))
}

/// Moves the inverted code along `dir` and refines the edited features
/// against the inversion-time pyramid.
pub fn edit(
    models: &Models,
    inv: &InversionResult,
    dir: &EditDirection,
    alpha: f64,
    beta: BetaWeights,
) -> Result<RgbCanvas> {
    let w = apply_edit(&inv.w_inv, dir, alpha)?;
    refined_synthesis(models, &w, &inv.pyramid, beta, None)
}

/// [`edit`] with every refiner query reading flow-displaced targets.
pub fn pose_edit(
    models: &Models,
    inv: &InversionResult,
    dir: &EditDirection,
    alpha: f64,
    flow: &Flow,
    beta: BetaWeights,
) -> Result<RgbCanvas> {
    let w = apply_edit(&inv.w_inv, dir, alpha)?;
    refined_synthesis(models, &w, &inv.pyramid, beta, Some(flow))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Progressive,
    Exchange,
    Interpolate,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(MixMode::Progressive),
            "exchange" => Ok(MixMode::Exchange),
            "interpolate" => Ok(MixMode::Interpolate),
            other => Err(Error::arg(format!("unknown mix mode {other:?}"))),
        }
    }
}

fn layer_count(param: f64) -> Result<usize> {
    if param < 0.0 || param.fract() != 0.0 || !param.is_finite() {
        return Err(Error::arg(format!(
            "layer index {param} must be a non-negative integer"
        )));
    }
    Ok(param as usize)
}

/// The mixed code of source `s` and reference `r`.
pub fn mix_code(s: &LatentCode, r: &LatentCode, mode: MixMode, param: f64) -> Result<LatentCode> {
    match mode {
        MixMode::Progressive => style_mix_progressive(s, r, layer_count(param)?),
        MixMode::Exchange => style_mix_exchange(s, r, layer_count(param)?),
        MixMode::Interpolate => style_mix_interpolate(r, s, param),
    }
}

/// Synthesizes a mix of two inversions; with `use_smart` the source
/// pyramid refines the mixed features.
pub fn mix(
    models: &Models,
    source: &InversionResult,
    reference: &InversionResult,
    mode: MixMode,
    param: f64,
    use_smart: bool,
) -> Result<RgbCanvas> {
    let w = mix_code(&source.w_inv, &reference.w_inv, mode, param)?;
    if use_smart {
        refined_synthesis(models, &w, &source.pyramid, BetaWeights::ONE, None)
    } else {
        models.generator.synthesize(&models.params, &w)
    }
}

/// Images on a `beta1 × beta2` grid; `cells[i][j]` uses
/// `(beta1[i], beta2[j])`.
#[derive(Clone, Debug)]
pub struct BetaGrid {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub cells: Vec<Vec<RgbCanvas>>,
}

impl BetaGrid {
    pub fn cell(&self, i: usize, j: usize) -> &RgbCanvas {
        &self.cells[i][j]
    }

    /// All cells tiled row-major into one `[3, n1·H, n2·W]` image.
    pub fn mosaic(&self) -> Tensor {
        let first = &self.cells[0][0].tensor;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let (n1, n2) = (self.beta1.len(), self.beta2.len());
        let (hh, ww) = (n1 * h, n2 * w);
        Tensor::from_fn(vec![3, hh, ww], |idx| {
            let c = idx / (hh * ww);
            let y = idx / ww % hh;
            let x = idx % ww;
            self.cells[y / h][x / w].tensor.get(&[c, y % h, x % w])
        })
    }
}

/// Evaluates the inversion (or the edit, when `edit` is given) at every
/// pair of β values.
pub fn beta_sweep(
    models: &Models,
    inv: &InversionResult,
    edit: Option<(&EditDirection, f64)>,
    beta1: &[f64],
    beta2: &[f64],
) -> Result<BetaGrid> {
    if beta1.is_empty() || beta2.is_empty() {
        return Err(Error::arg("β grids must be non-empty"));
    }
    let w = match edit {
        Some((dir, alpha)) => apply_edit(&inv.w_inv, dir, alpha)?,
        None => inv.w_inv.clone(),
    };
    let pairs: Vec<(f64, f64)> = beta1
        .iter()
        .flat_map(|&a| beta2.iter().map(move |&b| (a, b)))
        .collect();
    let flat = crate::par::map(&pairs, |&(b1, b2)| {
        refined_synthesis(models, &w, &inv.pyramid, BetaWeights::new(b1, b2)?, None)
    });
    let mut cells = Vec::with_capacity(beta1.len());
    let mut it = flat.into_iter();
    for _ in beta1 {
        cells.push(it.by_ref().take(beta2.len()).collect::<Result<Vec<_>>>()?);
    }
    Ok(BetaGrid {
        beta1: beta1.to_vec(),
        beta2: beta2.to_vec(),
        cells,
    })
}

//! Reconstruction, perceptual, identity and alignment losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bcast, Graph, Var};
use crate::error::{Error, Result};
use crate::latent_spaces::{AverageLatent, LatentCode};
use crate::tensor::Tensor;

use super::nets::{Embedder, FeatureExtractor, LossPlugins};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.6,
            lambda3: 0.1,
            lambda4: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config(
                "loss weights must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda1: self.lambda1 * k,
            lambda2: self.lambda2 * k,
            lambda3: self.lambda3 * k,
            lambda4: self.lambda4 * k,
        }
    }
}

/// Unweighted loss terms; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l2: f64,
    pub perceptual: f64,
    pub id: f64,
    pub align: f64,
}

impl LossTerms {
    pub fn image(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.l2 + w.lambda2 * self.perceptual + w.lambda3 * self.id
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.image(w) + w.lambda4 * self.align
    }
}

/// Graph handles of the individual terms.
pub struct TermVars {
    pub l2: Var,
    pub perceptual: Option<Var>,
    pub id: Option<Var>,
    pub align: Option<Var>,
}

impl TermVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
        LossTerms {
            l2: g.value(self.l2).data()[0],
            perceptual: v(self.perceptual),
            id: v(self.id),
            align: v(self.align),
        }
    }

    /// Weighted sum as a graph scalar.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<Var> {
        let mut total = g.scale(self.l2, w.lambda1);
        for (term, lambda) in [
            (self.perceptual, w.lambda2),
            (self.id, w.lambda3),
            (self.align, w.lambda4),
        ] {
            if let Some(t) = term {
                let t = g.scale(t, lambda);
                total = g.add(total, t)?;
            }
        }
        Ok(total)
    }
}

pub fn l2_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    g.mse(a, b)
}

/// Mean over layers of the feature MSE.
pub fn perceptual_graph(g: &mut Graph, net: &dyn FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    let fa = net.features_graph(g, a)?;
    let fb = net.features_graph(g, b)?;
    layer_mean(g, fa.into_iter().zip(fb), |g, x, y| g.mse(x, y))
}

fn layer_mean(
    g: &mut Graph,
    pairs: impl IntoIterator<Item = (Var, Var)>,
    mut term: impl FnMut(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut n = 0usize;
    for (x, y) in pairs {
        let t = term(g, x, y)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
        n += 1;
    }
    let acc = acc.ok_or_else(|| Error::config("metric network declares no layers"))?;
    Ok(g.scale(acc, 1.0 / n as f64))
}

fn unit(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let flat = g.reshape(x, &[n])?;
    let sq = g.mul(flat, flat)?;
    let ss = g.sum(sq);
    let norm2 = g.value(ss).data()[0];
    if norm2 == 0.0 || !norm2.is_finite() {
        return Err(Error::Numeric(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    let inv = g.powf(ss, -0.5);
    g.mul_bcast(flat, inv, Bcast::Suffix)
}

/// `1 − cos` averaged over the embedder's layers, computed as
/// `½‖â − b̂‖²` of the normalized layers.
pub fn identity_graph(g: &mut Graph, net: &dyn Embedder, a: Var, b: Var) -> Result<Var> {
    let la = net.layers_graph(g, a)?;
    let lb = net.layers_graph(g, b)?;
    layer_mean(g, la.into_iter().zip(lb), |g, x, y| {
        let (x, y) = (unit(g, x)?, unit(g, y)?);
        let d = g.sub(x, y)?;
        let d2 = g.mul(d, d)?;
        let s = g.sum(d2);
        Ok(g.scale(s, 0.5))
    })
}

/// Mean over layers of `‖w_l − w̄‖₂`.
pub fn align_graph(g: &mut Graph, w: Var, w_bar: Var) -> Result<Var> {
    let neg = g.scale(w_bar, -1.0);
    let d = g.add_bcast(w, neg, Bcast::Suffix)?;
    let d2 = g.mul(d, d)?;
    let rows = g.sum_last_axis(d2);
    let norms = g.powf(rows, 0.5);
    Ok(g.mean(norms))
}

/// Image terms with weights `w`; terms whose weight is zero are skipped.
pub fn image_terms_graph(
    g: &mut Graph,
    plugins: &LossPlugins,
    w: &LossWeights,
    image: Var,
    target: Var,
) -> Result<TermVars> {
    w.validate()?;
    if g.shape(image) != g.shape(target) {
        return Err(Error::dim(format!(
            "image {:?} vs target {:?}",
            g.shape(image),
            g.shape(target)
        )));
    }
    let l2 = l2_graph(g, image, target)?;
    let perceptual = if w.lambda2 > 0.0 {
        let net = plugins
            .perceptual
            .as_deref()
            .ok_or_else(|| Error::config("no perceptual metric registered"))?;
        Some(perceptual_graph(g, net, image, target)?)
    } else {
        None
    };
    let id = if w.lambda3 > 0.0 {
        let net = plugins
            .identity
            .as_deref()
            .ok_or_else(|| Error::config("no identity embedder registered"))?;
        Some(identity_graph(g, net, image, target)?)
    } else {
        None
    };
    Ok(TermVars {
        l2,
        perceptual,
        id,
        align: None,
    })
}

fn pair(a: &Tensor, b: &Tensor) -> Result<(Graph, Var, Var)> {
    a.ensure_same_shape(b)?;
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    Ok((g, x, y))
}

pub fn loss_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (mut g, x, y) = pair(a, b)?;
    let l = l2_graph(&mut g, x, y)?;
    Ok(g.value(l).data()[0])
}

pub fn loss_perceptual(a: &Tensor, b: &Tensor, net: &dyn FeatureExtractor) -> Result<f64> {
    let (mut g, x, y) = pair(a, b)?;
    let l = perceptual_graph(&mut g, net, x, y)?;
    Ok(g.value(l).data()[0])
}

pub fn loss_id(a: &Tensor, b: &Tensor, net: &dyn Embedder) -> Result<f64> {
    let (mut g, x, y) = pair(a, b)?;
    let l = identity_graph(&mut g, net, x, y)?;
    Ok(g.value(l).data()[0])
}

pub fn loss_align(w_inv: &LatentCode, w_bar: &AverageLatent) -> Result<f64> {
    if w_inv.dim() != w_bar.dim() {
        return Err(Error::dim(format!(
            "latent width {} vs average latent width {}",
            w_inv.dim(),
            w_bar.dim()
        )));
    }
    let mut g = Graph::new();
    let w = g.constant(w_inv.as_tensor().clone());
    let b = g.constant(Tensor::new(vec![w_bar.dim()], w_bar.value.clone())?);
    let l = align_graph(&mut g, w, b)?;
    Ok(g.value(l).data()[0])
}

/// Individual image terms (zero-weight terms are not evaluated).
pub fn image_terms(
    a: &Tensor,
    b: &Tensor,
    w: &LossWeights,
    plugins: &LossPlugins,
) -> Result<LossTerms> {
    let (mut g, x, y) = pair(a, b)?;
    let terms = image_terms_graph(&mut g, plugins, w, x, y)?;
    Ok(terms.values(&g))
}

pub fn loss_image(a: &Tensor, b: &Tensor, w: &LossWeights, plugins: &LossPlugins) -> Result<f64> {
    Ok(image_terms(a, b, w, plugins)?.image(w))
}

pub fn loss_base(
    a: &Tensor,
    b: &Tensor,
    w_inv: &LatentCode,
    w_bar: &AverageLatent,
    w: &LossWeights,
    plugins: &LossPlugins,
) -> Result<f64> {
    let mut terms = image_terms(a, b, w, plugins)?;
    terms.align = loss_align(w_inv, w_bar)?;
    Ok(terms.total(w))
}

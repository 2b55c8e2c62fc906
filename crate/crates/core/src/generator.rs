//! A scaled-down style-based generator.
//!
//! Layout for an output of `4·2^(G−1)` pixels: group 0 holds one 3×3
//! modulated conv on a learned 4×4 constant; every later group holds a
//! `conv_up` (bilinear 2× upsample then conv) and a `conv`. Each group ends in
//! a ToRGB whose output is added onto the upsampled running canvas.
//!
//! Non-ToRGB conv layers are numbered `1..L` and conv layer `l` consumes
//! latent row `l`; the ToRGB of group `g` consumes row `2g + 2`, which it
//! shares with the next group's `conv_up`. That gives `L = 2G` style inputs.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bcast, Graph, SparseMap, Var};
use crate::error::{Error, Result};
use crate::latent_spaces::{AverageLatent, LatentCode};
use crate::params::{self, Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "generator";
const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub output_size: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub base_feature_channels: usize,
    /// Zero makes the mapping network the identity (requires `z_dim == w_dim`).
    pub mapping_depth: usize,
    /// Samples used to estimate the average latent at initialization.
    pub w_avg_samples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            output_size: 32,
            z_dim: 32,
            w_dim: 32,
            base_feature_channels: 32,
            mapping_depth: 8,
            w_avg_samples: 4096,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_size < 8 || !self.output_size.is_power_of_two() {
            return Err(Error::config(format!(
                "output_size {} must be a power of two >= 8",
                self.output_size
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.base_feature_channels == 0 {
            return Err(Error::config("generator widths must be positive"));
        }
        if self.mapping_depth == 0 && self.z_dim != self.w_dim {
            return Err(Error::config("identity mapping needs z_dim == w_dim"));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.output_size.trailing_zeros() as usize - 1
    }

    /// Number of style inputs `L = 2·log2(output_size) − 2`.
    pub fn num_ws(&self) -> usize {
        2 * self.num_groups()
    }

    /// Number of non-ToRGB conv layers, `L − 1`.
    pub fn num_conv_layers(&self) -> usize {
        self.num_ws() - 1
    }

    pub fn channels_at(&self, res: usize) -> usize {
        let c = if res <= 8 {
            self.base_feature_channels
        } else {
            self.base_feature_channels * 8 / res
        };
        c.max(4).min(self.base_feature_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    ConvUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    /// 1-based conv layer index, also the latent row it consumes.
    pub index: usize,
    pub kind: ConvKind,
    pub group: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Consumers of a latent row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleTarget {
    Conv(usize),
    ToRgb(usize),
}

/// Channel-wise style code for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub target: StyleTarget,
    pub values: Vec<f64>,
}

/// Output of conv layer `layer`, shaped `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    pub tensor: Tensor,
}

/// Accumulated RGB image, shaped `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbCanvas {
    pub tensor: Tensor,
}

impl RgbCanvas {
    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
    layers: Vec<LayerSpec>,
    im2col: HashMap<(usize, usize), Arc<SparseMap>>,
    upsample: HashMap<(usize, usize), Arc<SparseMap>>,
    expand9: HashMap<usize, Arc<SparseMap>>,
    rows: Vec<Arc<SparseMap>>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator").field("cfg", &self.cfg).finish()
    }
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = vec![LayerSpec {
            index: 1,
            kind: ConvKind::Conv,
            group: 0,
            resolution: 4,
            in_channels: cfg.channels_at(4),
            out_channels: cfg.channels_at(4),
        }];
        for g in 1..cfg.num_groups() {
            let res = 4 << g;
            let (cin, cout) = (cfg.channels_at(res / 2), cfg.channels_at(res));
            layers.push(LayerSpec {
                index: 2 * g,
                kind: ConvKind::ConvUp,
                group: g,
                resolution: res,
                in_channels: cin,
                out_channels: cout,
            });
            layers.push(LayerSpec {
                index: 2 * g + 1,
                kind: ConvKind::Conv,
                group: g,
                resolution: res,
                in_channels: cout,
                out_channels: cout,
            });
        }
        let mut im2col = HashMap::new();
        let mut upsample = HashMap::new();
        let mut expand9 = HashMap::new();
        for spec in &layers {
            let (c, r) = (spec.in_channels, spec.resolution);
            im2col
                .entry((c, r))
                .or_insert_with(|| Arc::new(im2col_3x3(c, r)));
            expand9
                .entry(c)
                .or_insert_with(|| Arc::new(repeat_each(c, 9)));
            if spec.kind == ConvKind::ConvUp {
                upsample
                    .entry((c, r / 2))
                    .or_insert_with(|| Arc::new(bilinear_up2(c, r / 2)));
            }
        }
        for g in 1..cfg.num_groups() {
            let r = 4 << (g - 1);
            upsample
                .entry((3, r))
                .or_insert_with(|| Arc::new(bilinear_up2(3, r)));
        }
        let rows = (0..cfg.num_ws())
            .map(|l| Arc::new(SparseMap::gather_rows(cfg.num_ws(), cfg.w_dim, &[Some(l)])))
            .collect();
        Ok(Self {
            cfg,
            layers,
            im2col,
            upsample,
            expand9,
            rows,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn num_ws(&self) -> usize {
        self.cfg.num_ws()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Result<&LayerSpec> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::arg(format!(
                "conv layer {l} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }

    /// Random initialization; also estimates `generator.w_avg`.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = self.init_weights(rng);
        let seed = rng.random();
        let w_avg = self.average_latent(&store, self.cfg.w_avg_samples.max(1), seed)?;
        store.insert(
            format!("{PREFIX}.w_avg"),
            Tensor::new(vec![self.cfg.w_dim], w_avg.value)?,
        );
        Ok(store)
    }

    /// Every parameter name and shape, with placeholder values.
    pub fn param_layout(&self) -> Result<ParamStore> {
        let mut store = self.init_weights(&mut ChaCha8Rng::seed_from_u64(0));
        store.insert(
            format!("{PREFIX}.w_avg"),
            Tensor::zeros(vec![self.cfg.w_dim]),
        );
        Ok(store)
    }

    fn init_weights<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let cfg = &self.cfg;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let c4 = cfg.channels_at(4);
        init.normal(&format!("{PREFIX}.const"), vec![c4, 4, 4], 1.0);
        for i in 0..cfg.mapping_depth {
            let fan_in = if i == 0 { cfg.z_dim } else { cfg.w_dim };
            init.linear(
                &format!("{PREFIX}.mapping.{i}"),
                fan_in,
                cfg.w_dim,
                2f64.sqrt(),
            );
        }
        for spec in &self.layers {
            let p = format!("{PREFIX}.conv.{}", spec.index);
            init.normal(
                &format!("{p}.weight"),
                vec![spec.out_channels, spec.in_channels * 9],
                1.0,
            );
            init.constant(&format!("{p}.bias"), Tensor::zeros(vec![spec.out_channels]));
            self.init_affine(&mut init, &format!("{p}.affine"), spec.in_channels);
        }
        for g in 0..cfg.num_groups() {
            let c = cfg.channels_at(4 << g);
            let p = format!("{PREFIX}.torgb.{g}");
            init.normal(&format!("{p}.weight"), vec![3, c], 0.25 / (c as f64).sqrt());
            init.constant(&format!("{p}.bias"), Tensor::zeros(vec![3]));
            self.init_affine(&mut init, &format!("{p}.affine"), c);
        }
        store
    }

    fn init_affine<R: Rng>(&self, init: &mut Init<'_, R>, prefix: &str, width: usize) {
        init.linear(prefix, self.cfg.w_dim, width, 1.0);
        init.constant(&format!("{prefix}.bias"), Tensor::full(vec![width], 1.0));
    }

    pub fn w_avg(&self, ps: &ParamStore) -> Result<AverageLatent> {
        AverageLatent::new(ps.require(&format!("{PREFIX}.w_avg"))?.data().to_vec())
    }

    pub fn map_z_to_w(&self, ps: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.z_dim {
            return Err(Error::dim(format!(
                "z has length {}, expected {}",
                z.len(),
                self.cfg.z_dim
            )));
        }
        let mut g = Graph::new();
        let mut x = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        for i in 0..self.cfg.mapping_depth {
            x = params::linear(&mut g, ps, &format!("{PREFIX}.mapping.{i}"), x)?;
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        Ok(g.value(x).data().to_vec())
    }

    pub fn broadcast_w(&self, w: &[f64]) -> Result<LatentCode> {
        if w.len() != self.cfg.w_dim {
            return Err(Error::dim(format!(
                "w has length {}, expected {}",
                w.len(),
                self.cfg.w_dim
            )));
        }
        LatentCode::broadcast(w, self.num_ws())
    }

    /// Mean of mapped standard-normal samples drawn from `seed`.
    pub fn average_latent(&self, ps: &ParamStore, n: usize, seed: u64) -> Result<AverageLatent> {
        if n == 0 {
            return Err(Error::arg("average_latent needs n >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; self.cfg.w_dim];
        for _ in 0..n {
            let z = Tensor::randn(vec![self.cfg.z_dim], 1.0, &mut rng);
            let w = self.map_z_to_w(ps, z.data())?;
            for (a, v) in acc.iter_mut().zip(w) {
                *a += v;
            }
        }
        AverageLatent::new(acc.into_iter().map(|v| v / n as f64).collect())
    }

    /// Samples `z ~ N(0, I)` from `rng` and maps it into W.
    pub fn sample_w<R: Rng>(&self, ps: &ParamStore, rng: &mut R) -> Result<Vec<f64>> {
        let z = Tensor::randn(vec![self.cfg.z_dim], 1.0, rng);
        self.map_z_to_w(ps, z.data())
    }

    fn affine_prefix(&self, target: StyleTarget) -> Result<(String, usize)> {
        match target {
            StyleTarget::Conv(l) => {
                let spec = self.layer(l)?;
                Ok((format!("{PREFIX}.conv.{l}.affine"), spec.in_channels))
            }
            StyleTarget::ToRgb(g) if g < self.cfg.num_groups() => Ok((
                format!("{PREFIX}.torgb.{g}.affine"),
                self.cfg.channels_at(4 << g),
            )),
            StyleTarget::ToRgb(g) => Err(Error::arg(format!("ToRGB group {g} does not exist"))),
        }
    }

    /// Latent row (0-based) consumed by `target`.
    pub fn style_row(&self, target: StyleTarget) -> usize {
        match target {
            StyleTarget::Conv(l) => l - 1,
            StyleTarget::ToRgb(g) => 2 * g + 1,
        }
    }

    pub fn affine_style(
        &self,
        ps: &ParamStore,
        w_l: &[f64],
        target: StyleTarget,
    ) -> Result<StyleCode> {
        let (prefix, width) = self.affine_prefix(target)?;
        if w_l.len() != self.cfg.w_dim {
            return Err(Error::dim(format!("w row has length {}", w_l.len())));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, w_l.len()], w_l.to_vec())?);
        let s = params::linear(&mut g, ps, &prefix, x)?;
        debug_assert_eq!(g.value(s).numel(), width);
        Ok(StyleCode {
            target,
            values: g.value(s).data().to_vec(),
        })
    }

    fn style_var(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        wplus: Var,
        target: StyleTarget,
    ) -> Result<Var> {
        let (prefix, width) = self.affine_prefix(target)?;
        let row = g.sparse(wplus, &self.rows[self.style_row(target)])?;
        let s = params::linear(g, ps, &prefix, row)?;
        g.reshape(s, &[width])
    }

    fn conv_layer(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        spec: &LayerSpec,
        x: Var,
        wplus: Var,
    ) -> Result<Var> {
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let res = spec.resolution;
        let x = match spec.kind {
            ConvKind::ConvUp => g.sparse(x, &self.upsample[&(cin, res / 2)])?,
            ConvKind::Conv => x,
        };
        let p = format!("{PREFIX}.conv.{}", spec.index);
        let style = self.style_var(g, ps, wplus, StyleTarget::Conv(spec.index))?;
        let style = g.sparse(style, &self.expand9[&cin])?;
        let weight = g.param(ps, &format!("{p}.weight"))?;
        let modulated = g.mul_bcast(weight, style, Bcast::Suffix)?;
        let sq = g.mul(modulated, modulated)?;
        let norm = g.sum_last_axis(sq);
        let norm = g.add_scalar(norm, DEMOD_EPS);
        let demod = g.powf(norm, -0.5);
        let w = g.mul_bcast(modulated, demod, Bcast::Prefix)?;
        let cols = g.sparse(x, &self.im2col[&(cin, res)])?;
        let y = g.matmul(w, cols)?;
        let bias = g.param(ps, &format!("{p}.bias"))?;
        let y = g.add_bcast(y, bias, Bcast::Prefix)?;
        let y = g.leaky_relu(y, LRELU_SLOPE);
        let y = g.scale(y, std::f64::consts::SQRT_2);
        g.reshape(y, &[cout, res, res])
    }

    fn to_rgb(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        group: usize,
        x: Var,
        wplus: Var,
        canvas: Var,
    ) -> Result<Var> {
        let res = 4 << group;
        let c = self.cfg.channels_at(res);
        let p = format!("{PREFIX}.torgb.{group}");
        let style = self.style_var(g, ps, wplus, StyleTarget::ToRgb(group))?;
        let weight = g.param(ps, &format!("{p}.weight"))?;
        let w = g.mul_bcast(weight, style, Bcast::Suffix)?;
        let flat = g.reshape(x, &[c, res * res])?;
        let y = g.matmul(w, flat)?;
        let bias = g.param(ps, &format!("{p}.bias"))?;
        let y = g.add_bcast(y, bias, Bcast::Prefix)?;
        let rgb = g.reshape(y, &[3, res, res])?;
        let base = if group == 0 {
            canvas
        } else {
            g.sparse(canvas, &self.upsample[&(3, res / 2)])?
        };
        g.add(base, rgb)
    }

    fn check_wplus(&self, g: &Graph, wplus: Var) -> Result<()> {
        let expected = [self.num_ws(), self.cfg.w_dim];
        if g.shape(wplus) != expected {
            return Err(Error::dim(format!(
                "W+ code has shape {:?}, expected {expected:?}",
                g.shape(wplus)
            )));
        }
        Ok(())
    }

    /// Runs conv layers `1..=l`; returns `F_l` and the canvas accumulated by
    /// groups finished before layer `l`'s group.
    pub fn to_layer_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        wplus: Var,
        l: usize,
    ) -> Result<(Var, Var)> {
        self.check_wplus(g, wplus)?;
        self.layer(l)?;
        let mut x = g.param(ps, &format!("{PREFIX}.const"))?;
        let mut canvas = g.constant(Tensor::zeros(vec![3, 4, 4]));
        for spec in &self.layers[..l] {
            if spec.kind == ConvKind::ConvUp {
                canvas = self.to_rgb(g, ps, spec.group - 1, x, wplus, canvas)?;
            }
            x = self.conv_layer(g, ps, spec, x, wplus)?;
        }
        Ok((x, canvas))
    }

    /// Continues synthesis from a (possibly replaced) `F_l`.
    pub fn from_layer_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        feat: Var,
        canvas: Var,
        wplus: Var,
        l: usize,
    ) -> Result<Var> {
        self.check_wplus(g, wplus)?;
        let spec = *self.layer(l)?;
        let expected = [spec.out_channels, spec.resolution, spec.resolution];
        if g.shape(feat) != expected {
            return Err(Error::dim(format!(
                "feature for layer {l} has shape {:?}, expected {expected:?}",
                g.shape(feat)
            )));
        }
        let canvas_side = if spec.group == 0 {
            4
        } else {
            spec.resolution / 2
        };
        if g.shape(canvas) != [3, canvas_side, canvas_side] {
            return Err(Error::dim(format!(
                "partial canvas for layer {l} has shape {:?}, expected [3, {canvas_side}, {canvas_side}]",
                g.shape(canvas)
            )));
        }
        let mut x = feat;
        let mut canvas = canvas;
        for spec in &self.layers[l..] {
            if spec.kind == ConvKind::ConvUp {
                canvas = self.to_rgb(g, ps, spec.group - 1, x, wplus, canvas)?;
            }
            x = self.conv_layer(g, ps, spec, x, wplus)?;
        }
        self.to_rgb(g, ps, self.cfg.num_groups() - 1, x, wplus, canvas)
    }

    pub fn synthesize_graph(&self, g: &mut Graph, ps: &ParamStore, wplus: Var) -> Result<Var> {
        let last = self.cfg.num_conv_layers();
        let (feat, canvas) = self.to_layer_graph(g, ps, wplus, last)?;
        self.from_layer_graph(g, ps, feat, canvas, wplus, last)
    }

    pub fn synthesize(&self, ps: &ParamStore, wplus: &LatentCode) -> Result<RgbCanvas> {
        let mut g = Graph::new();
        let w = g.constant(wplus.as_tensor().clone());
        let img = self.synthesize_graph(&mut g, ps, w)?;
        Ok(RgbCanvas {
            tensor: g.value(img).clone(),
        })
    }

    pub fn synthesize_to_layer(
        &self,
        ps: &ParamStore,
        wplus: &LatentCode,
        l: usize,
    ) -> Result<(FeatureMap, RgbCanvas)> {
        let mut g = Graph::new();
        let w = g.constant(wplus.as_tensor().clone());
        let (feat, canvas) = self.to_layer_graph(&mut g, ps, w, l)?;
        Ok((
            FeatureMap {
                layer: l,
                tensor: g.value(feat).clone(),
            },
            RgbCanvas {
                tensor: g.value(canvas).clone(),
            },
        ))
    }

    pub fn synthesize_from_layer(
        &self,
        ps: &ParamStore,
        feat: &FeatureMap,
        partial: &RgbCanvas,
        wplus: &LatentCode,
        l: usize,
    ) -> Result<RgbCanvas> {
        if feat.layer != l {
            return Err(Error::arg(format!(
                "feature map is from layer {}, resuming at {l}",
                feat.layer
            )));
        }
        let mut g = Graph::new();
        let w = g.constant(wplus.as_tensor().clone());
        let f = g.constant(feat.tensor.clone());
        let c = g.constant(partial.tensor.clone());
        let img = self.from_layer_graph(&mut g, ps, f, c, w, l)?;
        Ok(RgbCanvas {
            tensor: g.value(img).clone(),
        })
    }
}

/// 3×3, stride 1, zero-padded patches of a `[c, r, r]` map as `[c·9, r·r]`.
fn im2col_3x3(c: usize, r: usize) -> SparseMap {
    let mut src = Vec::with_capacity(c * 9 * r * r);
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        let (sy, sx) = (y as isize + ky - 1, x as isize + kx - 1);
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < r && (sx as usize) < r;
                        src.push(inside.then(|| (ch * r + sy as usize) * r + sx as usize));
                    }
                }
            }
        }
    }
    SparseMap::gather(c * r * r, vec![c * 9, r * r], &src)
}

/// Repeats each of `n` entries `times` times.
fn repeat_each(n: usize, times: usize) -> SparseMap {
    let src: Vec<Option<usize>> = (0..n * times).map(|i| Some(i / times)).collect();
    SparseMap::gather(n, vec![n * times], &src)
}

/// Half-pixel-centred bilinear weights for doubling a length-`n` axis.
fn bilinear_weights_1d(n: usize) -> Vec<Vec<(usize, f64)>> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            if i0 + 1 < n && frac > 0.0 {
                vec![(i0, 1.0 - frac), (i0 + 1, frac)]
            } else {
                vec![(i0.min(n - 1), 1.0)]
            }
        })
        .collect()
}

/// Bilinear 2× upsampling of a `[c, r, r]` map.
pub fn bilinear_up2(c: usize, r: usize) -> SparseMap {
    let w1 = bilinear_weights_1d(r);
    let out = 2 * r;
    let mut rows = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for y in 0..out {
            for x in 0..out {
                let mut entries = Vec::with_capacity(4);
                for &(sy, wy) in &w1[y] {
                    for &(sx, wx) in &w1[x] {
                        entries.push(((ch * r + sy) * r + sx, wy * wx));
                    }
                }
                rows.push(entries);
            }
        }
    }
    SparseMap::weighted(c * r * r, vec![c, out, out], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Generator, ParamStore) {
        let cfg = GeneratorConfig {
            output_size: 16,
            z_dim: 8,
            w_dim: 8,
            base_feature_channels: 8,
            mapping_depth: 2,
            w_avg_samples: 64,
        };
        let gen = Generator::new(cfg).unwrap();
        let ps = gen.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (gen, ps)
    }

    fn random_wplus(gen: &Generator, seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentCode::new(Tensor::randn(
            vec![gen.num_ws(), gen.config().w_dim],
            1.0,
            &mut rng,
        ))
        .unwrap()
    }

    #[test]
    fn layout_counts() {
        let gen = Generator::new(GeneratorConfig::default()).unwrap();
        assert_eq!(gen.num_ws(), 8);
        assert_eq!(gen.layers().len(), 7);
        let kinds: Vec<_> = gen
            .layers()
            .iter()
            .map(|s| (s.kind, s.resolution))
            .collect();
        assert_eq!(kinds[0], (ConvKind::Conv, 4));
        assert_eq!(kinds[1], (ConvKind::ConvUp, 8));
        assert_eq!(kinds[2], (ConvKind::Conv, 8));
        assert_eq!(kinds[6], (ConvKind::Conv, 32));
        let big = GeneratorConfig {
            output_size: 1024,
            ..GeneratorConfig::default()
        };
        assert_eq!(big.num_ws(), 18);
        assert!(GeneratorConfig {
            output_size: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            output_size: 24,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bilinear_preserves_constants_and_mass() {
        let map = bilinear_up2(1, 4);
        let out = map.apply(&[2.5; 16]);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-15));
        let w = bilinear_weights_1d(3);
        assert_eq!(w[0], vec![(0, 1.0)]);
        assert_eq!(w[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(w[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(w[5], vec![(2, 1.0)]);
    }

    #[test]
    fn mapping_by_hand() {
        let cfg = GeneratorConfig {
            output_size: 8,
            z_dim: 2,
            w_dim: 2,
            base_feature_channels: 4,
            mapping_depth: 2,
            w_avg_samples: 1,
        };
        let gen = Generator::new(cfg).unwrap();
        let mut ps = gen.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..2 {
            ps.insert(
                format!("generator.mapping.{i}.weight"),
                Tensor::zeros(vec![2, 2]),
            );
            ps.insert(
                format!("generator.mapping.{i}.bias"),
                Tensor::zeros(vec![2]),
            );
        }
        ps.insert(
            "generator.mapping.1.bias",
            Tensor::new(vec![2], vec![1.5, -2.0]).unwrap(),
        );
        // layer 0 outputs lrelu(0) = 0; layer 1 outputs lrelu(b) = (1.5, -0.4)
        let w = gen.map_z_to_w(&ps, &[0.7, -3.0]).unwrap();
        assert_eq!(w, vec![1.5, -0.4]);
        assert!(matches!(
            gen.map_z_to_w(&ps, &[1.0]),
            Err(Error::Dimension(_))
        ));
        assert_eq!(
            gen.map_z_to_w(&ps, &[0.1, 0.2]).unwrap(),
            gen.map_z_to_w(&ps, &[0.1, 0.2]).unwrap()
        );
    }

    #[test]
    fn affine_style_contract() {
        let (gen, mut ps) = small();
        let w: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let s1 = gen.affine_style(&ps, &w, StyleTarget::Conv(2)).unwrap();
        assert_eq!(s1.values.len(), gen.layer(2).unwrap().in_channels);
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let s2 = gen.affine_style(&ps, &w2, StyleTarget::Conv(2)).unwrap();
        let a = ps.get("generator.conv.2.affine.weight").unwrap().clone();
        for c in 0..s1.values.len() {
            let aw: f64 = (0..8).map(|i| w[i] * a.get(&[i, c])).sum();
            assert!((s2.values[c] - s1.values[c] - aw).abs() < 1e-12);
        }
        ps.insert(
            "generator.conv.2.affine.weight",
            Tensor::zeros(a.shape().to_vec()),
        );
        let ones = gen.affine_style(&ps, &w, StyleTarget::Conv(2)).unwrap();
        assert!(ones.values.iter().all(|&v| v == 1.0));
        assert!(gen.affine_style(&ps, &w, StyleTarget::Conv(9)).is_err());
        assert!(gen.affine_style(&ps, &w, StyleTarget::ToRgb(3)).is_err());
    }

    #[test]
    fn synthesis_shapes_and_determinism() {
        let (gen, ps) = small();
        let w = random_wplus(&gen, 3);
        let a = gen.synthesize(&ps, &w).unwrap();
        let b = gen.synthesize(&ps, &w).unwrap();
        assert_eq!(a.tensor.shape(), &[3, 16, 16]);
        assert!(a.tensor.exact_eq(&b.tensor));
        let bad = LatentCode::new(Tensor::zeros(vec![3, 8])).unwrap();
        assert!(matches!(
            gen.synthesize(&ps, &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn split_and_resume_at_every_layer() {
        let (gen, ps) = small();
        let w = random_wplus(&gen, 4);
        let full = gen.synthesize(&ps, &w).unwrap();
        for l in 1..=gen.config().num_conv_layers() {
            let (feat, canvas) = gen.synthesize_to_layer(&ps, &w, l).unwrap();
            let spec = gen.layer(l).unwrap();
            assert_eq!(
                feat.tensor.shape(),
                &[spec.out_channels, spec.resolution, spec.resolution]
            );
            let resumed = gen
                .synthesize_from_layer(&ps, &feat, &canvas, &w, l)
                .unwrap();
            assert!(
                resumed.tensor.max_abs_diff(&full.tensor) <= 1e-6,
                "layer {l}"
            );
        }
        assert!(gen.synthesize_to_layer(&ps, &w, 0).is_err());
        assert!(gen.synthesize_to_layer(&ps, &w, 6).is_err());
    }

    #[test]
    fn resumed_synthesis_is_sensitive_to_features() {
        let (gen, ps) = small();
        let w = random_wplus(&gen, 5);
        let (mut feat, canvas) = gen.synthesize_to_layer(&ps, &w, 3).unwrap();
        let base = gen
            .synthesize_from_layer(&ps, &feat, &canvas, &w, 3)
            .unwrap();
        let u = Tensor::randn(
            feat.tensor.shape().to_vec(),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        for (f, d) in feat.tensor.data_mut().iter_mut().zip(u.data()) {
            *f += 1e-2 * d;
        }
        let moved = gen
            .synthesize_from_layer(&ps, &feat, &canvas, &w, 3)
            .unwrap();
        assert!(moved.tensor.max_abs_diff(&base.tensor) > 0.0);
        let wrong = FeatureMap {
            layer: 3,
            tensor: Tensor::zeros(vec![1, 8, 8]),
        };
        assert!(matches!(
            gen.synthesize_from_layer(&ps, &wrong, &canvas, &w, 3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn style_rows_are_local() {
        let (gen, ps) = small();
        let w = random_wplus(&gen, 7);
        for l in 2..=gen.config().num_conv_layers() {
            let mut t = w.as_tensor().clone();
            for v in &mut t.data_mut()[(l - 1) * 8..l * 8] {
                *v += 0.5;
            }
            let w2 = LatentCode::new(t).unwrap();
            let (a, _) = gen.synthesize_to_layer(&ps, &w, l - 1).unwrap();
            let (b, _) = gen.synthesize_to_layer(&ps, &w2, l - 1).unwrap();
            assert!(a.tensor.exact_eq(&b.tensor));
        }
    }

    #[test]
    fn zeroed_torgb_freezes_canvas() {
        let (gen, mut ps) = small();
        let w = random_wplus(&gen, 8);
        // groups: 0 (4x4), 1 (8x8), 2 (16x16); silence group 2's ToRGB
        ps.insert(
            "generator.torgb.2.weight",
            Tensor::zeros(vec![3, gen.config().channels_at(16)]),
        );
        let img = gen.synthesize(&ps, &w).unwrap();
        let (_, canvas) = gen.synthesize_to_layer(&ps, &w, 4).unwrap();
        assert_eq!(canvas.size(), 8);
        let up = bilinear_up2(3, 8).apply(canvas.tensor.data());
        let up = Tensor::new(vec![3, 16, 16], up).unwrap();
        assert!(img.tensor.max_abs_diff(&up) < 1e-12);
    }

    #[test]
    fn average_latent_contract() {
        let (gen, ps) = small();
        let one = gen.average_latent(&ps, 1, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(vec![8], 1.0, &mut rng);
        assert_eq!(one.value, gen.map_z_to_w(&ps, z.data()).unwrap());
        assert_eq!(
            gen.average_latent(&ps, 10, 2).unwrap(),
            gen.average_latent(&ps, 10, 2).unwrap()
        );
        assert!(gen.average_latent(&ps, 0, 2).is_err());
    }

    #[test]
    fn identity_mapping_average_shrinks() {
        let cfg = GeneratorConfig {
            output_size: 8,
            z_dim: 16,
            w_dim: 16,
            base_feature_channels: 4,
            mapping_depth: 0,
            w_avg_samples: 1,
        };
        let gen = Generator::new(cfg).unwrap();
        let ps = gen.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = 16f64;
        for (n, seed) in [(100usize, 1u64), (400, 2), (1600, 3)] {
            let w = gen.average_latent(&ps, n, seed).unwrap();
            let norm = w.value.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                norm <= 3.0 * d.sqrt() / (n as f64).sqrt(),
                "n={n} norm={norm}"
            );
        }
    }
}

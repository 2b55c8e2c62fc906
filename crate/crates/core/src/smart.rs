//! Softmax-free local cross-attention from a generator feature map into the
//! encoder pyramid, with gated residual branches.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SparseMap, Var};
use crate::encoder::{EncoderConfig, PyramidFeatures};
use crate::error::{Error, Result};
use crate::generator::{FeatureMap, Generator};
use crate::params::{linear, Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "smart";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for BetaWeights {
    fn default() -> Self {
        Self::ONE
    }
}

impl BetaWeights {
    pub const ONE: Self = Self {
        beta1: 1.0,
        beta2: 1.0,
    };
    pub const ZERO: Self = Self {
        beta1: 0.0,
        beta2: 0.0,
    };

    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if !beta1.is_finite() || !beta2.is_finite() {
            return Err(Error::arg("beta weights must be finite"));
        }
        Ok(Self { beta1, beta2 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmartConfig {
    /// Generator conv layer whose output is refined.
    pub smart_layer: usize,
    /// Query/key width shared by all stages.
    pub attn_dim: usize,
    pub head_count: usize,
    pub ffn_ratio: usize,
}

impl Default for SmartConfig {
    fn default() -> Self {
        Self {
            smart_layer: 3,
            attn_dim: 16,
            head_count: 1,
            ffn_ratio: 2,
        }
    }
}

/// Targets of every query position on one pyramid stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub h_f: usize,
    pub h_p: usize,
    /// Flattened target positions per flattened query position.
    pub targets: Vec<Vec<usize>>,
}

impl IndexMap {
    pub fn targets_of(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        self.targets[i * self.h_f + j]
            .iter()
            .map(|&t| (t / self.h_p, t % self.h_p))
            .collect()
    }

    /// Targets per query (constant across queries).
    pub fn fan_out(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

/// Queries on an `h_f × h_f` grid map to keys on `h_p × h_p`. With
/// `R = h_f/h_p ≥ 1` query `(i, j)` reads `(⌊i/R⌋, ⌊j/R⌋)`; with `1/R`
/// integral it reads the `1/R × 1/R` block starting at `(i/R, j/R)`.
pub fn local_index_map(h_f: usize, h_p: usize) -> Result<IndexMap> {
    if h_f == 0 || h_p == 0 {
        return Err(Error::config("grid sides must be positive"));
    }
    let targets = if h_f.is_multiple_of(h_p) {
        let r = h_f / h_p;
        (0..h_f * h_f)
            .map(|q| vec![(q / h_f / r) * h_p + (q % h_f) / r])
            .collect()
    } else if h_p.is_multiple_of(h_f) {
        let inv = h_p / h_f;
        (0..h_f * h_f)
            .map(|q| {
                let (i, j) = (q / h_f, q % h_f);
                let mut t = Vec::with_capacity(inv * inv);
                for a in 0..inv {
                    for b in 0..inv {
                        t.push((i * inv + a) * h_p + j * inv + b);
                    }
                }
                t
            })
            .collect()
    } else {
        return Err(Error::config(format!(
            "feature side {h_f} and pyramid side {h_p} have no integral ratio"
        )));
    };
    Ok(IndexMap { h_f, h_p, targets })
}

/// Integer per-position offsets `(Δx, Δy)` on an `h × w` grid; `Δx` moves
/// along columns and `Δy` along rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flow {
    pub h: usize,
    pub w: usize,
    pub dx: Vec<i64>,
    pub dy: Vec<i64>,
}

impl Flow {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            dx: vec![0; h * w],
            dy: vec![0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, dx: i64, dy: i64) -> Self {
        Self {
            h,
            w,
            dx: vec![dx; h * w],
            dy: vec![dy; h * w],
        }
    }

    /// From a `[2, h, w]` tensor (channel 0 `Δx`, channel 1 `Δy`), rounding
    /// half away from zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.shape()[0] != 2 {
            return Err(Error::arg(format!(
                "flow must be [2, H, W], got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::arg("flow contains non-finite offsets"));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let round = |v: &f64| v.round() as i64;
        Ok(Self {
            h,
            w,
            dx: t.data()[..h * w].iter().map(round).collect(),
            dy: t.data()[h * w..].iter().map(round).collect(),
        })
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0)
    }

    /// Position whose targets query `q` reads, clamped to the grid.
    pub fn source(&self, q: usize) -> usize {
        let (i, j) = ((q / self.w) as i64, (q % self.w) as i64);
        let y = (i + self.dy[q]).clamp(0, self.h as i64 - 1) as usize;
        let x = (j + self.dx[q]).clamp(0, self.w as i64 - 1) as usize;
        y * self.w + x
    }
}

/// Pyramid stage shape as seen by the refiner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub side: usize,
    pub channels: usize,
}

struct StageGather {
    map: IndexMap,
    keys: Arc<SparseMap>,
    values: Arc<SparseMap>,
}

pub struct Smart {
    cfg: SmartConfig,
    feat_side: usize,
    feat_channels: usize,
    stages: Vec<StageShape>,
    gathers: Vec<StageGather>,
}

impl std::fmt::Debug for Smart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smart")
            .field("cfg", &self.cfg)
            .field("feat_side", &self.feat_side)
            .field("feat_channels", &self.feat_channels)
            .field("stages", &self.stages)
            .finish()
    }
}

/// Row gathers `[h_p², width] → [h_f²·n, width]` reading the targets of
/// `source(q)` for each query `q`.
fn gather_for(map: &IndexMap, width: usize, source: impl Fn(usize) -> usize) -> SparseMap {
    let src: Vec<Option<usize>> = (0..map.h_f * map.h_f)
        .flat_map(|q| map.targets[source(q)].iter().map(|&t| Some(t)))
        .collect();
    SparseMap::gather_rows(map.h_p * map.h_p, width, &src)
}

impl Smart {
    pub fn new(
        cfg: SmartConfig,
        feat_side: usize,
        feat_channels: usize,
        stages: Vec<StageShape>,
    ) -> Result<Self> {
        if cfg.attn_dim == 0 || cfg.head_count == 0 || cfg.ffn_ratio == 0 {
            return Err(Error::config(
                "attn_dim, head_count and ffn_ratio must be positive",
            ));
        }
        if !cfg.attn_dim.is_multiple_of(cfg.head_count)
            || !feat_channels.is_multiple_of(cfg.head_count)
        {
            return Err(Error::config(format!(
                "{} heads must divide attn_dim {} and feature channels {feat_channels}",
                cfg.head_count, cfg.attn_dim
            )));
        }
        if stages.is_empty() {
            return Err(Error::config("at least one pyramid stage is required"));
        }
        let gathers = stages
            .iter()
            .map(|st| {
                let map = local_index_map(feat_side, st.side)?;
                Ok(StageGather {
                    keys: Arc::new(gather_for(&map, cfg.attn_dim, |q| q)),
                    values: Arc::new(gather_for(&map, feat_channels, |q| q)),
                    map,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            feat_side,
            feat_channels,
            stages,
            gathers,
        })
    }

    /// Sizes the refiner for `gen`'s layer `cfg.smart_layer` and the
    /// encoder's pyramid.
    pub fn for_models(cfg: SmartConfig, gen: &Generator, enc: &EncoderConfig) -> Result<Self> {
        let spec = *gen.layer(cfg.smart_layer).map_err(|_| {
            Error::config(format!(
                "smart_layer {} is not a generator conv layer",
                cfg.smart_layer
            ))
        })?;
        let stages = (0..enc.stages)
            .map(|s| StageShape {
                side: enc.stage_grid(s),
                channels: enc.stage_channels(s),
            })
            .collect();
        Self::new(cfg, spec.resolution, spec.out_channels, stages)
    }

    pub fn config(&self) -> &SmartConfig {
        &self.cfg
    }

    pub fn feature_side(&self) -> usize {
        self.feat_side
    }

    pub fn feature_channels(&self) -> usize {
        self.feat_channels
    }

    pub fn index_maps(&self) -> Vec<&IndexMap> {
        self.gathers.iter().map(|g| &g.map).collect()
    }

    /// Total targets per query over all stages.
    pub fn fan_out(&self) -> usize {
        self.gathers.iter().map(|g| g.map.fan_out()).sum()
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let (a, c) = (self.cfg.attn_dim, self.feat_channels);
        init.linear(&format!("{PREFIX}.q"), c, a, 1.0);
        for (s, st) in self.stages.iter().enumerate() {
            init.linear(&format!("{PREFIX}.k.{s}"), st.channels, a, 1.0);
            init.linear(&format!("{PREFIX}.v.{s}"), st.channels, c, 0.0);
        }
        let hidden = c * self.cfg.ffn_ratio;
        init.linear(&format!("{PREFIX}.ffn.fc1"), c, hidden, 2f64.sqrt());
        init.linear(&format!("{PREFIX}.ffn.fc2"), hidden, c, 0.0);
        store
    }

    fn check_pyramid(&self, shapes: &[Vec<usize>]) -> Result<()> {
        if shapes.len() != self.stages.len() {
            return Err(Error::dim(format!(
                "refiner expects {} pyramid stages, got {}",
                self.stages.len(),
                shapes.len()
            )));
        }
        for (s, (shape, st)) in shapes.iter().zip(&self.stages).enumerate() {
            if shape[..] != [st.side * st.side, st.channels] {
                return Err(Error::dim(format!(
                    "pyramid stage {s} has shape {shape:?}, expected [{}, {}]",
                    st.side * st.side,
                    st.channels
                )));
            }
        }
        Ok(())
    }

    fn gathers_for(&self, flow: Option<&Flow>) -> Result<Vec<(Arc<SparseMap>, Arc<SparseMap>)>> {
        match flow {
            None => Ok(self
                .gathers
                .iter()
                .map(|g| (Arc::clone(&g.keys), Arc::clone(&g.values)))
                .collect()),
            Some(flow) => {
                if flow.h != self.feat_side || flow.w != self.feat_side {
                    return Err(Error::arg(format!(
                        "flow must be [2, {0}, {0}], got [2, {1}, {2}]",
                        self.feat_side, flow.h, flow.w
                    )));
                }
                Ok(self
                    .gathers
                    .iter()
                    .map(|g| {
                        (
                            Arc::new(gather_for(&g.map, self.cfg.attn_dim, |q| flow.source(q))),
                            Arc::new(gather_for(&g.map, self.feat_channels, |q| flow.source(q))),
                        )
                    })
                    .collect())
            }
        }
    }

    /// Per-position projections: `q [HW, A]`, and per stage `k [HP², A]`,
    /// `v [HP², C]`.
    fn project_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        f: Var,
        pyramid: &[Var],
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let q = linear(g, ps, &format!("{PREFIX}.q"), f)?;
        let mut ks = Vec::with_capacity(pyramid.len());
        let mut vs = Vec::with_capacity(pyramid.len());
        for (s, &p) in pyramid.iter().enumerate() {
            ks.push(linear(g, ps, &format!("{PREFIX}.k.{s}"), p)?);
            vs.push(linear(g, ps, &format!("{PREFIX}.v.{s}"), p)?);
        }
        Ok((q, ks, vs))
    }

    /// Σ over mapped targets of `(q·k)·(β₁v)`, per head.
    fn attend(
        &self,
        g: &mut Graph,
        q: Var,
        ks: &[Var],
        vs: &[Var],
        gathers: &[(Arc<SparseMap>, Arc<SparseMap>)],
        beta1: f64,
    ) -> Result<Var> {
        let hw = self.feat_side * self.feat_side;
        let h = self.cfg.head_count;
        let (a, c) = (self.cfg.attn_dim, self.feat_channels);
        let n = self.fan_out();
        let mut kparts = Vec::with_capacity(ks.len());
        let mut vparts = Vec::with_capacity(vs.len());
        for ((&k, &v), (gk, gv)) in ks.iter().zip(vs).zip(gathers) {
            let ns = gk.out_shape()[0] / hw;
            let kg = g.sparse(k, gk)?;
            kparts.push(g.reshape(kg, &[hw, ns, a])?);
            let vg = g.sparse(v, gv)?;
            vparts.push(g.reshape(vg, &[hw, ns, c])?);
        }
        let k = g.concat(&kparts, 1)?;
        let v = g.concat(&vparts, 1)?;
        let v = g.scale(v, beta1);
        let heads = |g: &mut Graph, x: Var, rows: usize, width: usize| -> Result<Var> {
            let x = g.reshape(x, &[hw, rows, h, width / h])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[hw * h, rows, width / h])
        };
        let q = heads(g, q, 1, a)?;
        let k = heads(g, k, n, a)?;
        let v = heads(g, v, n, c)?;
        let scores = g.bmm(q, k, true)?;
        let out = g.bmm(scores, v, false)?;
        g.reshape(out, &[hw, c])
    }

    /// Refines `feat [C, H, W]` against pyramid maps `[side², C_s]`.
    pub fn refine_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        feat: Var,
        pyramid: &[Var],
        beta: BetaWeights,
        flow: Option<&Flow>,
    ) -> Result<Var> {
        let (c, side) = (self.feat_channels, self.feat_side);
        if g.shape(feat) != [c, side, side] {
            return Err(Error::dim(format!(
                "refiner expects a [{c}, {side}, {side}] feature map, got {:?}",
                g.shape(feat)
            )));
        }
        let shapes: Vec<Vec<usize>> = pyramid.iter().map(|&p| g.shape(p).to_vec()).collect();
        self.check_pyramid(&shapes)?;
        let gathers = self.gathers_for(flow)?;
        let f = g.reshape(feat, &[c, side * side])?;
        let f = g.permute(f, &[1, 0])?;
        let (q, ks, vs) = self.project_graph(g, ps, f, pyramid)?;
        let attn = self.attend(g, q, &ks, &vs, &gathers, beta.beta1)?;
        let fh = g.add(attn, f)?;
        let h = linear(g, ps, &format!("{PREFIX}.ffn.fc1"), fh)?;
        let h = g.relu(h);
        let h = linear(g, ps, &format!("{PREFIX}.ffn.fc2"), h)?;
        let h = g.scale(h, beta.beta2);
        let out = g.add(h, fh)?;
        let out = g.permute(out, &[1, 0])?;
        g.reshape(out, &[c, side, side])
    }

    fn run(
        &self,
        ps: &ParamStore,
        feat: &FeatureMap,
        pyramid: &PyramidFeatures,
        beta: BetaWeights,
        flow: Option<&Flow>,
    ) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let f = g.constant(feat.tensor.clone());
        let p: Vec<Var> = pyramid
            .maps
            .iter()
            .map(|m| g.constant(m.tensor.clone()))
            .collect();
        let out = self.refine_graph(&mut g, ps, f, &p, beta, flow)?;
        let tensor = g.value(out).clone();
        if !tensor.is_finite() {
            return Err(Error::Numeric("non-finite refined features".into()));
        }
        Ok(FeatureMap {
            layer: feat.layer,
            tensor,
        })
    }

    pub fn refine(
        &self,
        ps: &ParamStore,
        feat: &FeatureMap,
        pyramid: &PyramidFeatures,
        beta: BetaWeights,
    ) -> Result<FeatureMap> {
        self.run(ps, feat, pyramid, beta, None)
    }

    /// Like [`Smart::refine`] with every query reading the targets of its
    /// flow-displaced position.
    pub fn refine_with_flow(
        &self,
        ps: &ParamStore,
        feat: &FeatureMap,
        pyramid: &PyramidFeatures,
        beta: BetaWeights,
        flow: &Flow,
    ) -> Result<FeatureMap> {
        self.run(ps, feat, pyramid, beta, Some(flow))
    }

    /// Projected queries `[HW, A]` plus gathered keys `[HW·n_s, A]` and
    /// values `[HW·n_s, C]` per stage.
    pub fn project_qkv(
        &self,
        ps: &ParamStore,
        feat: &FeatureMap,
        pyramid: &PyramidFeatures,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
        let (c, side) = (self.feat_channels, self.feat_side);
        let mut g = Graph::new();
        let f = g.constant(feat.tensor.clone());
        if g.shape(f) != [c, side, side] {
            return Err(Error::dim(format!(
                "feature map shape {:?}",
                feat.tensor.shape()
            )));
        }
        let p: Vec<Var> = pyramid
            .maps
            .iter()
            .map(|m| g.constant(m.tensor.clone()))
            .collect();
        let shapes: Vec<Vec<usize>> = p.iter().map(|&v| g.shape(v).to_vec()).collect();
        self.check_pyramid(&shapes)?;
        let f = g.reshape(f, &[c, side * side])?;
        let f = g.permute(f, &[1, 0])?;
        let (q, ks, vs) = self.project_graph(&mut g, ps, f, &p)?;
        let mut kout = Vec::new();
        let mut vout = Vec::new();
        for ((k, v), st) in ks.into_iter().zip(vs).zip(&self.gathers) {
            let kg = g.sparse(k, &st.keys)?;
            let vg = g.sparse(v, &st.values)?;
            kout.push(g.value(kg).clone());
            vout.push(g.value(vg).clone());
        }
        Ok((g.value(q).clone(), kout, vout))
    }
}

/// Tensor-level local cross-attention: `q [HW, A]`, per-stage `k [HP², A]`
/// and `v [HP², C]` with their index maps.
pub fn local_cross_attention(
    q: &Tensor,
    ks: &[Tensor],
    vs: &[Tensor],
    maps: &[IndexMap],
    beta1: f64,
    head_count: usize,
) -> Result<Tensor> {
    if q.ndim() != 2 || ks.len() != maps.len() || vs.len() != maps.len() || maps.is_empty() {
        return Err(Error::dim(
            "queries, keys, values and index maps are inconsistent",
        ));
    }
    let (hw, a) = (q.shape()[0], q.shape()[1]);
    let c = vs[0].shape().get(1).copied().unwrap_or(0);
    for ((k, v), m) in ks.iter().zip(vs).zip(maps) {
        let hp2 = m.h_p * m.h_p;
        if m.h_f * m.h_f != hw || k.shape() != [hp2, a] || v.shape() != [hp2, c] {
            return Err(Error::dim(format!(
                "stage with map {}→{} has keys {:?}, values {:?} for {hw} queries",
                m.h_f,
                m.h_p,
                k.shape(),
                v.shape()
            )));
        }
    }
    let stages = maps
        .iter()
        .zip(ks)
        .map(|(m, k)| StageShape {
            side: m.h_p,
            channels: k.shape()[1],
        })
        .collect();
    let cfg = SmartConfig {
        attn_dim: a,
        head_count,
        ..SmartConfig::default()
    };
    let smart = Smart::new(cfg, maps[0].h_f, c, stages)?;
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kv: Vec<Var> = ks.iter().map(|k| g.constant(k.clone())).collect();
    let vv: Vec<Var> = vs.iter().map(|v| g.constant(v.clone())).collect();
    let gathers = smart.gathers_for(None)?;
    let out = smart.attend(&mut g, qv, &kv, &vv, &gathers, beta1)?;
    Ok(g.value(out).clone())
}

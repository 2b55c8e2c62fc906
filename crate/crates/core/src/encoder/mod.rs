//! Hierarchical windowed-attention encoder with latent tokens appended to
//! every window, producing a feature pyramid and one latent row per
//! generator style input.

mod complexity;
mod window;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bcast, Graph, SparseMap, Var};
use crate::error::{Error, Result};
use crate::latent_spaces::{AverageLatent, LatentCode};
use crate::params::{layer_norm, linear, linear_no_bias, Init, ParamStore};
use crate::tensor::Tensor;

pub use complexity::{complexity, AttentionKind};
pub use window::{
    attach_latent_tokens, partition_order, window_partition, window_reverse, LatentTokens,
    PatchTokens, SHIFT_MASK_VALUE,
};

pub const PREFIX: &str = "encoder";
pub const LATENT_TOKEN_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub stages: usize,
    pub stage_depths: Vec<usize>,
    pub base_channels: usize,
    pub latent_token_count: usize,
    pub heads_per_stage: Vec<usize>,
    /// Width of the predicted latent rows.
    pub latent_dim: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 2,
            window_size: 4,
            stages: 4,
            stage_depths: vec![2, 2, 2, 2],
            base_channels: 16,
            latent_token_count: 8,
            heads_per_stage: vec![1, 2, 4, 8],
            latent_dim: 32,
            mlp_ratio: 2,
            head_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn stage_grid(&self, s: usize) -> usize {
        self.grid() >> s
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Window side used at stage `s`: `M`, or the whole grid once the grid
    /// is smaller than `M`.
    pub fn stage_window(&self, s: usize) -> usize {
        self.window_size.min(self.stage_grid(s))
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels(self.stages.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.window_size == 0 {
            return bad("image_size, patch_size and window_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.stage_depths.len() != self.stages || self.heads_per_stage.len() != self.stages {
            return bad(format!(
                "{} stages need {0} depths and head counts, got {} and {}",
                self.stages,
                self.stage_depths.len(),
                self.heads_per_stage.len()
            ));
        }
        if self.base_channels == 0
            || self.latent_dim == 0
            || self.mlp_ratio == 0
            || self.head_hidden == 0
        {
            return bad("channel widths must be positive".into());
        }
        for s in 0..self.stages {
            let g = self.stage_grid(s);
            if g == 0 || (s + 1 < self.stages && !g.is_multiple_of(2)) {
                return bad(format!("stage {s} grid {g} cannot be halved"));
            }
            if !g.is_multiple_of(self.stage_window(s)) {
                return bad(format!(
                    "stage {s} grid {g} is not divisible by window {}",
                    self.stage_window(s)
                ));
            }
            let h = self.heads_per_stage[s];
            if h == 0 || !self.stage_channels(s).is_multiple_of(h) {
                return bad(format!(
                    "stage {s}: {} channels cannot be split into {h} heads",
                    self.stage_channels(s)
                ));
            }
        }
        Ok(())
    }
}

/// Patch-token maps of every stage. Stage `s` has side `grid/2^s` and
/// `C·2^s` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub maps: Vec<PatchTokens>,
}

impl PyramidFeatures {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn exact_eq(&self, other: &PyramidFeatures) -> bool {
        self.maps.len() == other.maps.len()
            && self.maps.iter().zip(&other.maps).all(|(a, b)| {
                a.grid_h == b.grid_h && a.grid_w == b.grid_w && a.tensor.exact_eq(&b.tensor)
            })
    }
}

/// Output of [`Encoder::windowed_self_attention`].
#[derive(Clone, Debug)]
pub struct WindowAttention {
    /// `M² × c` per window, after the residual MLP path.
    pub patches: Vec<Tensor>,
    /// `T × c` per window, residual added, not yet merged.
    pub latents: Vec<Tensor>,
    /// `[N, heads, n, n]` softmax weights.
    pub weights: Tensor,
}

/// Graph handles produced by [`Encoder::encode_graph`].
pub struct EncodedVars {
    pub pyramid: Vec<Var>,
    pub latents: Var,
}

struct StagePlan {
    grid: usize,
    channels: usize,
    window: usize,
    shift: usize,
    windows: usize,
    heads: usize,
    depth: usize,
    partition: [Arc<SparseMap>; 2],
    reverse: [Arc<SparseMap>; 2],
    replicate: Arc<SparseMap>,
    merge: Arc<SparseMap>,
    patch_rows: Arc<SparseMap>,
    latent_rows: Arc<SparseMap>,
    bias: Arc<SparseMap>,
    bias_plain: Arc<SparseMap>,
    mask: Option<Tensor>,
    mask_plain: Option<Tensor>,
    downsample: Option<Arc<SparseMap>>,
}

impl StagePlan {
    fn new(cfg: &EncoderConfig, s: usize) -> Result<Self> {
        let grid = cfg.stage_grid(s);
        let channels = cfg.stage_channels(s);
        let window = cfg.stage_window(s);
        let shift = if window < grid { window / 2 } else { 0 };
        let windows = (grid / window) * (grid / window);
        let heads = cfg.heads_per_stage[s];
        let t = cfg.latent_token_count;
        let p = window * window;
        let n = p + t;
        let shared = |m: SparseMap| Arc::new(m);
        Ok(Self {
            grid,
            channels,
            window,
            shift,
            windows,
            heads,
            depth: cfg.stage_depths[s],
            partition: [
                shared(window::partition_map(grid, window, 0, channels)?),
                shared(window::partition_map(grid, window, shift, channels)?),
            ],
            reverse: [
                shared(window::reverse_map(grid, window, 0, channels)?),
                shared(window::reverse_map(grid, window, shift, channels)?),
            ],
            replicate: shared(window::replicate_map(t, windows, channels)),
            merge: shared(window::merge_map(t, windows, channels)),
            patch_rows: shared(window::block_rows_map(windows, n, 0, p, channels)),
            latent_rows: shared(window::block_rows_map(windows, n, p, t, channels)),
            bias: shared(window::relative_bias_map(window, t, heads)),
            bias_plain: shared(window::relative_bias_map(window, 0, heads)),
            mask: (shift > 0).then(|| window::shift_mask(grid, window, shift, t, heads)),
            mask_plain: (shift > 0).then(|| window::shift_mask(grid, window, shift, 0, heads)),
            downsample: (s + 1 < cfg.stages).then(|| shared(downsample_map(grid, channels))),
        })
    }

    fn shifted(&self, block: usize) -> bool {
        self.shift > 0 && block % 2 == 1
    }
}

/// `[g², C] → [(g/2)², 4C]`, concatenating each 2×2 neighbourhood in the
/// order (0,0), (1,0), (0,1), (1,1).
fn downsample_map(grid: usize, c: usize) -> SparseMap {
    let half = grid / 2;
    let mut src = Vec::with_capacity(half * half * 4 * c);
    for i in 0..half {
        for j in 0..half {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let row = (2 * i + dy) * grid + 2 * j + dx;
                src.extend((0..c).map(|k| Some(row * c + k)));
            }
        }
    }
    SparseMap::gather(grid * grid * c, vec![half * half, 4 * c], &src)
}

/// `[3, H, W] → [(H/p)·(W/p), 3p²]`.
fn patch_embed_map(size: usize, p: usize) -> SparseMap {
    let g = size / p;
    let mut src = Vec::with_capacity(size * size * 3);
    for py in 0..g {
        for px in 0..g {
            for ch in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        src.push(Some(ch * size * size + (py * p + dy) * size + px * p + dx));
                    }
                }
            }
        }
    }
    SparseMap::gather(3 * size * size, vec![g * g, 3 * p * p], &src)
}

pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<StagePlan>,
    embed: Arc<SparseMap>,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder").field("cfg", &self.cfg).finish()
    }
}

fn block_prefix(s: usize, b: usize) -> String {
    format!("{PREFIX}.stages.{s}.blocks.{b}")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = (0..cfg.stages)
            .map(|s| StagePlan::new(&cfg, s))
            .collect::<Result<Vec<_>>>()?;
        let embed = Arc::new(patch_embed_map(cfg.image_size, cfg.patch_size));
        Ok(Self { cfg, stages, embed })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let cfg = &self.cfg;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let c0 = cfg.base_channels;
        let p = cfg.patch_size;
        init.linear(&format!("{PREFIX}.patch_embed"), 3 * p * p, c0, 1.0);
        init.layer_norm(&format!("{PREFIX}.patch_norm"), c0);
        init.normal(
            &format!("{PREFIX}.latent_tokens"),
            vec![cfg.latent_token_count, c0],
            LATENT_TOKEN_STD,
        );
        for (s, st) in self.stages.iter().enumerate() {
            let c = st.channels;
            let side = 2 * st.window - 1;
            for b in 0..st.depth {
                let pre = block_prefix(s, b);
                for name in ["q", "k", "v", "proj"] {
                    init.linear(&format!("{pre}.{name}"), c, c, 1.0);
                }
                init.normal(
                    &format!("{pre}.rel_bias"),
                    vec![side * side, st.heads],
                    0.02,
                );
                init.layer_norm(&format!("{pre}.norm1"), c);
                init.linear(&format!("{pre}.mlp.fc1"), c, c * cfg.mlp_ratio, 1.0);
                init.linear(&format!("{pre}.mlp.fc2"), c * cfg.mlp_ratio, c, 1.0);
                init.layer_norm(&format!("{pre}.norm2"), c);
                init.layer_norm(&format!("{pre}.latent_norm"), c);
            }
            if st.downsample.is_some() {
                let pre = format!("{PREFIX}.stages.{s}");
                init.linear_no_bias(&format!("{pre}.merge.reduction"), 4 * c, 2 * c, 1.0);
                init.layer_norm(&format!("{pre}.merge.norm"), 2 * c);
                init.linear(&format!("{pre}.latent_proj.fc"), c, 2 * c, 1.0);
                init.layer_norm(&format!("{pre}.latent_proj.norm"), 2 * c);
            }
        }
        let cf = cfg.final_channels();
        init.linear(&format!("{PREFIX}.head.0"), cf, cfg.head_hidden, 1.0);
        init.linear(
            &format!("{PREFIX}.head.1"),
            cfg.head_hidden,
            cfg.head_hidden,
            1.0,
        );
        init.linear(
            &format!("{PREFIX}.head.2"),
            cfg.head_hidden,
            cfg.latent_dim,
            1.0,
        );
        store
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::arg(format!(
                "encoder expects a [3, {s}, {s}] image, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, ps: &ParamStore, image: Var) -> Result<Var> {
        let patches = g.sparse(image, &self.embed)?;
        let x = linear(g, ps, &format!("{PREFIX}.patch_embed"), patches)?;
        layer_norm(g, ps, &format!("{PREFIX}.patch_norm"), x)
    }

    /// Scaled dot-product attention inside `nwin` windows of `n` tokens.
    /// Returns the projected output `[nwin·n, c]` and the weights
    /// `[nwin·heads, n, n]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        pre: &str,
        z: Var,
        nwin: usize,
        n: usize,
        heads: usize,
        bias_map: &Arc<SparseMap>,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let c = *g.shape(z).last().unwrap_or(&0);
        let dh = c / heads;
        let zf = g.reshape(z, &[nwin * n, c])?;
        let split = |g: &mut Graph, name: &str| -> Result<Var> {
            let y = linear(g, ps, &format!("{pre}.{name}"), zf)?;
            let y = g.reshape(y, &[nwin, n, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[nwin * heads, n, dh])
        };
        let q = split(g, "q")?;
        let k = split(g, "k")?;
        let v = split(g, "v")?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.reshape(scores, &[nwin, heads, n, n])?;
        let table = g.param(ps, &format!("{pre}.rel_bias"))?;
        let bias = g.sparse(table, bias_map)?;
        let mut scores = g.add_bcast(scores, bias, Bcast::Suffix)?;
        if let Some(mask) = mask {
            let m = g.constant(mask.clone());
            scores = g.add(scores, m)?;
        }
        let scores = g.reshape(scores, &[nwin * heads, n, n])?;
        let weights = g.softmax(scores);
        let out = g.bmm(weights, v, false)?;
        let out = g.reshape(out, &[nwin, heads, n, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[nwin * n, c])?;
        let out = linear(g, ps, &format!("{pre}.proj"), out)?;
        Ok((out, weights))
    }

    /// Post-norm residual path for patch tokens: `y = x + LN(a)`,
    /// `y + LN(MLP(y))`.
    fn patch_path(&self, g: &mut Graph, ps: &ParamStore, pre: &str, x: Var, a: Var) -> Result<Var> {
        let n1 = layer_norm(g, ps, &format!("{pre}.norm1"), a)?;
        let y = g.add(x, n1)?;
        let h = linear(g, ps, &format!("{pre}.mlp.fc1"), y)?;
        let h = g.gelu(h);
        let h = linear(g, ps, &format!("{pre}.mlp.fc2"), h)?;
        let n2 = layer_norm(g, ps, &format!("{pre}.norm2"), h)?;
        g.add(y, n2)
    }

    /// Attention plus residual paths over augmented windows `z [N, M²+T, c]`.
    /// Returns window-ordered patch outputs `[N·M², c]`, latent replicas
    /// `[N·T, c]` and the attention weights.
    fn block_core(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        s: usize,
        b: usize,
        z: Var,
        shifted: bool,
    ) -> Result<(Var, Var, Var)> {
        let st = &self.stages[s];
        let pre = block_prefix(s, b);
        let n = st.window * st.window + self.cfg.latent_token_count;
        let mask = if shifted { st.mask.as_ref() } else { None };
        let (a, weights) =
            self.attention(g, ps, &pre, z, st.windows, n, st.heads, &st.bias, mask)?;
        let zf = g.reshape(z, &[st.windows * n, st.channels])?;
        let xw = g.sparse(zf, &st.patch_rows)?;
        let lw = g.sparse(zf, &st.latent_rows)?;
        let ap = g.sparse(a, &st.patch_rows)?;
        let al = g.sparse(a, &st.latent_rows)?;
        let patches = self.patch_path(g, ps, &pre, xw, ap)?;
        let replicas = g.add(lw, al)?;
        Ok((patches, replicas, weights))
    }

    fn block(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        s: usize,
        b: usize,
        x: Var,
        lat: Var,
    ) -> Result<(Var, Var)> {
        let st = &self.stages[s];
        let t = self.cfg.latent_token_count;
        let p = st.window * st.window;
        let sh = usize::from(st.shifted(b));
        let xw = g.sparse(x, &st.partition[sh])?;
        let xw = g.reshape(xw, &[st.windows, p, st.channels])?;
        let lr = g.sparse(lat, &st.replicate)?;
        let lr = g.reshape(lr, &[st.windows, t, st.channels])?;
        let z = g.concat(&[xw, lr], 1)?;
        let (patches, replicas, _) = self.block_core(g, ps, s, b, z, sh == 1)?;
        let x = g.sparse(patches, &st.reverse[sh])?;
        let merged = g.sparse(replicas, &st.merge)?;
        let lat = layer_norm(
            g,
            ps,
            &format!("{}.latent_norm", block_prefix(s, b)),
            merged,
        )?;
        Ok((x, lat))
    }

    fn block_plain(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        s: usize,
        b: usize,
        x: Var,
    ) -> Result<Var> {
        let st = &self.stages[s];
        let pre = block_prefix(s, b);
        let p = st.window * st.window;
        let sh = usize::from(st.shifted(b));
        let xw = g.sparse(x, &st.partition[sh])?;
        let z = g.reshape(xw, &[st.windows, p, st.channels])?;
        let mask = if sh == 1 {
            st.mask_plain.as_ref()
        } else {
            None
        };
        let (a, _) = self.attention(
            g,
            ps,
            &pre,
            z,
            st.windows,
            p,
            st.heads,
            &st.bias_plain,
            mask,
        )?;
        let out = self.patch_path(g, ps, &pre, xw, a)?;
        g.sparse(out, &st.reverse[sh])
    }

    fn transition(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        s: usize,
        x: Var,
        lat: Var,
    ) -> Result<(Var, Var)> {
        let st = &self.stages[s];
        let down = st
            .downsample
            .as_ref()
            .ok_or_else(|| Error::config(format!("stage {s} is the last stage")))?;
        let pre = format!("{PREFIX}.stages.{s}");
        let x = self.merge_patches(g, ps, &pre, x, down)?;
        let lat = linear(g, ps, &format!("{pre}.latent_proj.fc"), lat)?;
        let lat = layer_norm(g, ps, &format!("{pre}.latent_proj.norm"), lat)?;
        Ok((x, lat))
    }

    fn merge_patches(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        pre: &str,
        x: Var,
        down: &Arc<SparseMap>,
    ) -> Result<Var> {
        let x = g.sparse(x, down)?;
        let x = linear_no_bias(g, ps, &format!("{pre}.merge.reduction"), x)?;
        layer_norm(g, ps, &format!("{pre}.merge.norm"), x)
    }

    /// Full encoder on `image [3, H, W]` inside `g`.
    pub fn encode_graph(&self, g: &mut Graph, ps: &ParamStore, image: Var) -> Result<EncodedVars> {
        if g.shape(image) != [3, self.cfg.image_size, self.cfg.image_size] {
            self.check_image(g.value(image))?;
        }
        let mut x = self.embed(g, ps, image)?;
        let mut lat = g.param(ps, &format!("{PREFIX}.latent_tokens"))?;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            for b in 0..self.stages[s].depth {
                (x, lat) = self.block(g, ps, s, b, x, lat)?;
            }
            pyramid.push(x);
            if s + 1 < self.stages.len() {
                (x, lat) = self.transition(g, ps, s, x, lat)?;
            }
        }
        Ok(EncodedVars {
            pyramid,
            latents: lat,
        })
    }

    /// Head MLP plus `w̄` on latent tokens `[T, 8C]` inside `g`.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        lat: Var,
        w_bar: Var,
    ) -> Result<Var> {
        let width = g.shape(lat).last().copied().unwrap_or(0);
        if width != self.cfg.final_channels() {
            return Err(Error::dim(format!(
                "head expects {}-wide latent tokens, got {width}",
                self.cfg.final_channels()
            )));
        }
        let h = linear(g, ps, &format!("{PREFIX}.head.0"), lat)?;
        let h = g.tanh(h);
        let h = linear(g, ps, &format!("{PREFIX}.head.1"), h)?;
        let h = g.tanh(h);
        let out = linear(g, ps, &format!("{PREFIX}.head.2"), h)?;
        g.add_bcast(out, w_bar, Bcast::Suffix)
    }

    fn pyramid_from(&self, g: &Graph, vars: &[Var]) -> Result<PyramidFeatures> {
        let maps = vars
            .iter()
            .zip(&self.stages)
            .map(|(&v, st)| PatchTokens::new(st.grid, st.grid, g.value(v).clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidFeatures { maps })
    }

    fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn encode(
        &self,
        ps: &ParamStore,
        image: &Tensor,
    ) -> Result<(PyramidFeatures, LatentTokens)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let out = self.encode_graph(&mut g, ps, img)?;
        let pyramid = self.pyramid_from(&g, &out.pyramid)?;
        let lat = g.value(out.latents).clone();
        Self::ensure_finite(&lat, "latent tokens")?;
        for m in &pyramid.maps {
            Self::ensure_finite(&m.tensor, "pyramid features")?;
        }
        Ok((pyramid, LatentTokens { tensor: lat }))
    }

    /// The backbone without any latent tokens.
    pub fn encode_backbone(&self, ps: &ParamStore, image: &Tensor) -> Result<PyramidFeatures> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let mut x = self.embed(&mut g, ps, img)?;
        let mut vars = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            for b in 0..self.stages[s].depth {
                x = self.block_plain(&mut g, ps, s, b, x)?;
            }
            vars.push(x);
            if let Some(down) = &self.stages[s].downsample {
                x = self.merge_patches(&mut g, ps, &format!("{PREFIX}.stages.{s}"), x, down)?;
            }
        }
        self.pyramid_from(&g, &vars)
    }

    pub fn predict_latents(
        &self,
        ps: &ParamStore,
        lat: &LatentTokens,
        w_bar: &AverageLatent,
    ) -> Result<LatentCode> {
        let mut g = Graph::new();
        let l = g.constant(lat.tensor.clone());
        let w = g.constant(Tensor::new(vec![w_bar.value.len()], w_bar.value.clone())?);
        let out = self.predict_graph(&mut g, ps, l, w)?;
        LatentCode::new(g.value(out).clone())
    }

    /// Self-attention over already augmented windows of stage `s`, block
    /// `b`. No shift mask is applied.
    pub fn windowed_self_attention(
        &self,
        ps: &ParamStore,
        s: usize,
        b: usize,
        aug_windows: &[Tensor],
    ) -> Result<WindowAttention> {
        let st = self
            .stages
            .get(s)
            .filter(|st| b < st.depth)
            .ok_or_else(|| Error::arg(format!("no block {b} in stage {s}")))?;
        let t = self.cfg.latent_token_count;
        let p = st.window * st.window;
        let n = p + t;
        if aug_windows.len() != st.windows {
            return Err(Error::dim(format!(
                "stage {s} has {} windows, got {}",
                st.windows,
                aug_windows.len()
            )));
        }
        let mut data = Vec::with_capacity(st.windows * n * st.channels);
        for w in aug_windows {
            if w.shape() != [n, st.channels] {
                return Err(Error::dim(format!(
                    "augmented window must be [{n}, {}], got {:?}",
                    st.channels,
                    w.shape()
                )));
            }
            data.extend_from_slice(w.data());
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![st.windows, n, st.channels], data)?);
        let (patches, replicas, weights) = self.block_core(&mut g, ps, s, b, z, false)?;
        let split = |t: &Tensor, rows: usize| -> Result<Vec<Tensor>> {
            t.data()
                .chunks(rows * st.channels)
                .map(|c| Tensor::new(vec![rows, st.channels], c.to_vec()))
                .collect()
        };
        let patch_out = g.value(patches);
        let lat_out = g.value(replicas);
        Self::ensure_finite(patch_out, "window attention")?;
        Self::ensure_finite(lat_out, "window attention")?;
        let patches = split(patch_out, p)?;
        let latents = if t == 0 {
            vec![Tensor::zeros(vec![0, st.channels]); st.windows]
        } else {
            split(lat_out, t)?
        };
        let weights = g
            .value(weights)
            .clone()
            .reshape(vec![st.windows, st.heads, n, n])?;
        Ok(WindowAttention {
            patches,
            latents,
            weights,
        })
    }

    /// Patch merging and latent projection from stage `s` to `s + 1`.
    pub fn stage_transition(
        &self,
        ps: &ParamStore,
        s: usize,
        patches: &PatchTokens,
        lat: &LatentTokens,
    ) -> Result<(PatchTokens, LatentTokens)> {
        let st = self
            .stages
            .get(s)
            .ok_or_else(|| Error::arg(format!("no stage {s}")))?;
        if !patches.grid_h.is_multiple_of(2) || !patches.grid_w.is_multiple_of(2) {
            return Err(Error::config(format!(
                "cannot merge a {}x{} grid",
                patches.grid_h, patches.grid_w
            )));
        }
        if patches.grid_h != st.grid
            || patches.grid_w != st.grid
            || patches.channels() != st.channels
        {
            return Err(Error::dim(format!(
                "stage {s} expects a {0}x{0} grid of {1} channels",
                st.grid, st.channels
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(patches.tensor.clone());
        let l = g.constant(lat.tensor.clone());
        let (x, l) = self.transition(&mut g, ps, s, x, l)?;
        Ok((
            PatchTokens::new(st.grid / 2, st.grid / 2, g.value(x).clone())?,
            LatentTokens {
                tensor: g.value(l).clone(),
            },
        ))
    }

    /// Multiply-add count of one attention layer at stage `s` for `kind`.
    pub fn stage_complexity(&self, s: usize, kind: AttentionKind) -> Result<u128> {
        let st = self
            .stages
            .get(s)
            .ok_or_else(|| Error::arg(format!("no stage {s}")))?;
        complexity(
            kind,
            st.grid as u64,
            st.grid as u64,
            st.channels as u64,
            st.window as u64,
            self.cfg.latent_token_count as u64,
        )
    }
}

/// Sums per-window latent replicas and layer-normalizes each token with unit
/// scale and zero shift.
pub fn merge_latent_replicas(replicas: &[Tensor]) -> Result<LatentTokens> {
    let first = replicas
        .first()
        .ok_or_else(|| Error::arg("no latent replicas to merge"))?;
    if first.ndim() != 2 {
        return Err(Error::dim(format!("replica shape {:?}", first.shape())));
    }
    let (t, c) = (first.shape()[0], first.shape()[1]);
    let mut sum = vec![0.0; t * c];
    for r in replicas {
        if r.shape() != first.shape() {
            return Err(Error::dim(format!(
                "replica {:?} vs {:?}",
                r.shape(),
                first.shape()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(r.data()) {
            *acc += v;
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![t, c], sum)?);
    let gamma = g.constant(Tensor::full(vec![c], 1.0));
    let beta = g.constant(Tensor::zeros(vec![c]));
    let y = g.layer_norm(x, gamma, beta)?;
    Ok(LatentTokens {
        tensor: g.value(y).clone(),
    })
}

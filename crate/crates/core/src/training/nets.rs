//! Fixed random convolutional networks standing in for learned perceptual
//! and identity metrics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bcast, Graph, SparseMap, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

/// Image features at several depths, differentiable w.r.t. the image.
pub trait FeatureExtractor: Send + Sync {
    fn features_graph(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>>;
}

/// Maps an image to embedding layers; the last layer is the embedding
/// itself.
pub trait Embedder: Send + Sync {
    fn layers_graph(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>>;

    /// Unit-norm embedding of `image`.
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let layers = self.layers_graph(&mut g, x)?;
        let last = layers
            .last()
            .ok_or_else(|| Error::config("embedder declares no layers"))?;
        let v = g.value(*last).data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(
                "embedding has zero or non-finite norm".into(),
            ));
        }
        Ok(v.iter().map(|x| x / norm).collect())
    }
}

/// 3×3 zero-padded patches of a `[c, h, h]` map at `stride`, as
/// `[c·9, ho·ho]`.
pub fn im2col(c: usize, h: usize, stride: usize) -> SparseMap {
    let ho = (h - 1) / stride + 1;
    let mut src = Vec::with_capacity(c * 9 * ho * ho);
    for ci in 0..c {
        for dy in 0..3 {
            for dx in 0..3 {
                for oy in 0..ho {
                    for ox in 0..ho {
                        let iy = (oy * stride + dy) as isize - 1;
                        let ix = (ox * stride + dx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < h;
                        src.push(inside.then(|| ci * h * h + iy as usize * h + ix as usize));
                    }
                }
            }
        }
    }
    SparseMap::gather(c * h * h, vec![c * 9, ho * ho], &src)
}

struct ConvLayer {
    name: String,
    out: usize,
    side_out: usize,
    cols: Arc<SparseMap>,
}

/// A stack of 3×3 convolutions with leaky ReLU, weights drawn once from a
/// seed.
pub struct RandomConvNet {
    params: ParamStore,
    size: usize,
    layers: Vec<ConvLayer>,
}

impl RandomConvNet {
    /// `spec` lists `(out_channels, stride)` per layer.
    pub fn new(prefix: &str, size: usize, spec: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let mut layers = Vec::with_capacity(spec.len());
        let (mut c, mut h) = (3, size);
        for (i, &(out, stride)) in spec.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            init.normal(
                &format!("{name}.weight"),
                vec![out, c * 9],
                (2.0 / (c * 9) as f64).sqrt(),
            );
            init.normal(&format!("{name}.bias"), vec![out], 0.1);
            let side_out = (h - 1) / stride + 1;
            layers.push(ConvLayer {
                name,
                out,
                side_out,
                cols: Arc::new(im2col(c, h, stride)),
            });
            c = out;
            h = side_out;
        }
        Self {
            params,
            size,
            layers,
        }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        if g.shape(image) != [3, self.size, self.size] {
            return Err(Error::dim(format!(
                "metric network expects [3, {0}, {0}] images, got {1:?}",
                self.size,
                g.shape(image)
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cols = g.sparse(x, &layer.cols)?;
            let w = g.param(&self.params, &format!("{}.weight", layer.name))?;
            let b = g.param(&self.params, &format!("{}.bias", layer.name))?;
            let y = g.matmul(w, cols)?;
            let y = g.add_bcast(y, b, Bcast::Prefix)?;
            let y = g.leaky_relu(y, SLOPE);
            x = g.reshape(y, &[layer.out, layer.side_out, layer.side_out])?;
            outs.push(x);
        }
        Ok(outs)
    }
}

/// Random perceptual feature stack: 3→8 (stride 1), 8→16 (stride 2),
/// 16→16 (stride 2).
pub struct RandomPerceptual {
    net: RandomConvNet,
}

impl RandomPerceptual {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            net: RandomConvNet::new("perceptual", size, &[(8, 1), (16, 2), (16, 2)], seed),
        }
    }
}

impl FeatureExtractor for RandomPerceptual {
    fn features_graph(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        self.net.forward(g, image)
    }
}

/// Random identity embedder: two strided convolutions followed by a linear
/// projection to `dim`. Layers are the flattened second conv output and the
/// projection.
pub struct RandomEmbedder {
    net: RandomConvNet,
    proj: ParamStore,
    dim: usize,
}

impl RandomEmbedder {
    pub fn new(size: usize, dim: usize, seed: u64) -> Self {
        let net = RandomConvNet::new("identity", size, &[(8, 2), (16, 2)], seed);
        let flat = 16 * net.layers[1].side_out * net.layers[1].side_out;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut proj = ParamStore::default();
        Init {
            store: &mut proj,
            rng: &mut rng,
        }
        .normal(
            "identity.proj.weight",
            vec![flat, dim],
            1.0 / (flat as f64).sqrt(),
        );
        Self { net, proj, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for RandomEmbedder {
    fn layers_graph(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let feats = self.net.forward(g, image)?;
        let last = *feats.last().expect("two conv layers");
        let n = g.value(last).numel();
        let flat = g.reshape(last, &[1, n])?;
        let w = g.param(&self.proj, "identity.proj.weight")?;
        let e = g.matmul(flat, w)?;
        Ok(vec![flat, e])
    }
}

/// Optional metric networks used by the image loss.
#[derive(Clone, Default)]
pub struct LossPlugins {
    pub perceptual: Option<Arc<dyn FeatureExtractor>>,
    pub identity: Option<Arc<dyn Embedder>>,
}

impl LossPlugins {
    /// The fixed-seed random metrics at image side `size`.
    pub fn random(size: usize, seed: u64) -> Self {
        Self {
            perceptual: Some(Arc::new(RandomPerceptual::new(size, seed))),
            identity: Some(Arc::new(RandomEmbedder::new(
                size,
                32,
                seed.wrapping_add(7),
            ))),
        }
    }
}

//! Two-stage self-inversion training: encoder and head first, then the
//! refiner with everything else frozen.

pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::PyramidFeatures;
use crate::error::{Error, Result};
use crate::generator::{FeatureMap, RgbCanvas};
use crate::latent_spaces::LatentCode;
use crate::models::Models;
use crate::par;
use crate::smart::BetaWeights;
use crate::tensor::Tensor;

pub use gradcheck::{gradient_check, input_gradient_check, probe_loss, GradCheck};
pub use losses::{
    image_terms, loss_align, loss_base, loss_id, loss_image, loss_l2, loss_perceptual, LossTerms,
    LossWeights,
};
pub use nets::{Embedder, FeatureExtractor, LossPlugins, RandomEmbedder, RandomPerceptual};
pub use optim::{Ranger, RangerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Smart,
}

impl Stage {
    /// Name prefix of the parameters this stage updates.
    pub fn trainable_prefix(self) -> &'static str {
        match self {
            Stage::Baseline => "encoder.",
            Stage::Smart => "smart.",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "smart" => Ok(Stage::Smart),
            other => Err(Error::arg(format!("unknown training stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Steps per plateau window; zero disables early stopping.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub optimizer: RangerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Baseline,
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            plateau_window: 200,
            plateau_tolerance: 1e-3,
            optimizer: RangerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `stage`; the refiner stage drops the alignment term.
    pub fn for_stage(stage: Stage) -> Self {
        let mut cfg = Self {
            stage,
            ..Self::default()
        };
        if stage == Stage::Smart {
            cfg.weights.lambda4 = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config(
                "batch_size and learning_rate must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l2: f64,
    pub perceptual: f64,
    pub id: f64,
    pub align: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub stopped_early: bool,
}

pub const SMOOTH_HEAD: usize = 10;
pub const SMOOTH_TAIL: usize = 50;

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl TrainReport {
    /// Mean total loss over the first steps.
    pub fn initial_smoothed(&self) -> f64 {
        mean(self.records.iter().take(SMOOTH_HEAD).map(|r| r.total))
    }

    /// Mean total loss over the last steps.
    pub fn final_smoothed(&self) -> f64 {
        let n = self.records.len();
        mean(
            self.records[n.saturating_sub(SMOOTH_TAIL)..]
                .iter()
                .map(|r| r.total),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l2,perceptual,id,align,total\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.l2, r.perceptual, r.id, r.align, r.total
            ));
        }
        out
    }
}

/// Parameter gradients, loss terms and total loss of one sample.
type SampleGrads = (Vec<(String, Tensor)>, LossTerms, f64);

/// Images synthesized from W-space samples, with their codes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub codes: Vec<LatentCode>,
}

impl Dataset {
    pub fn from_generator(models: &Models, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::arg("dataset must not be empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        for _ in 0..n {
            let w = models.generator.sample_w(&models.params, &mut rng)?;
            let code = models.generator.broadcast_w(&w)?;
            images.push(models.generator.synthesize(&models.params, &code)?.tensor);
            codes.push(code);
        }
        Ok(Self { images, codes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Frozen encoder and generator outputs reused by every refiner step.
struct SmartInputs {
    pyramid: PyramidFeatures,
    w_inv: LatentCode,
    feat: FeatureMap,
    canvas: RgbCanvas,
}

fn smart_inputs(models: &Models, image: &Tensor) -> Result<SmartInputs> {
    let ps = &models.params;
    let (pyramid, lat) = models.encoder.encode(ps, image)?;
    let w_inv = models.encoder.predict_latents(ps, &lat, &models.w_avg()?)?;
    let (feat, canvas) = models
        .generator
        .synthesize_to_layer(ps, &w_inv, models.smart_layer())?;
    Ok(SmartInputs {
        pyramid,
        w_inv,
        feat,
        canvas,
    })
}

/// Per-sample loss graph for the baseline stage.
pub fn baseline_loss_graph(
    g: &mut Graph,
    models: &Models,
    plugins: &LossPlugins,
    weights: &LossWeights,
    image: &Tensor,
) -> Result<(Var, LossTerms)> {
    let ps = &models.params;
    let w_bar = Tensor::new(vec![models.config.generator.w_dim], models.w_avg()?.value)?;
    let x = g.constant(image.clone());
    let enc = models.encoder.encode_graph(g, ps, x)?;
    let wb = g.constant(w_bar);
    let w = models.encoder.predict_graph(g, ps, enc.latents, wb)?;
    let out = models.generator.synthesize_graph(g, ps, w)?;
    let mut terms = losses::image_terms_graph(g, plugins, weights, out, x)?;
    terms.align = Some(losses::align_graph(g, w, wb)?);
    let total = terms.total(g, weights)?;
    Ok((total, terms.values(g)))
}

fn smart_loss_graph(
    g: &mut Graph,
    models: &Models,
    plugins: &LossPlugins,
    weights: &LossWeights,
    inputs: &SmartInputs,
    image: &Tensor,
) -> Result<(Var, LossTerms)> {
    let ps = &models.params;
    let f = g.constant(inputs.feat.tensor.clone());
    let canvas = g.constant(inputs.canvas.tensor.clone());
    let w = g.constant(inputs.w_inv.as_tensor().clone());
    let pyr: Vec<Var> = inputs
        .pyramid
        .maps
        .iter()
        .map(|m| g.constant(m.tensor.clone()))
        .collect();
    let refined = models
        .smart
        .refine_graph(g, ps, f, &pyr, BetaWeights::ONE, None)?;
    let out = models
        .generator
        .from_layer_graph(g, ps, refined, canvas, w, models.smart_layer())?;
    let target = g.constant(image.clone());
    let terms = losses::image_terms_graph(g, plugins, weights, out, target)?;
    let total = terms.total(g, weights)?;
    Ok((total, terms.values(g)))
}

fn plateaued(records: &[LossRecord], window: usize, tol: f64) -> bool {
    if window == 0 || records.len() < 2 * window {
        return false;
    }
    let n = records.len();
    let prev = mean(records[n - 2 * window..n - window].iter().map(|r| r.total));
    let last = mean(records[n - window..].iter().map(|r| r.total));
    (prev - last) / prev.abs().max(f64::MIN_POSITIVE) < tol
}

/// Runs `cfg.steps` minibatch updates of the stage's trainable parameters.
/// Per-sample gradients are computed in parallel and summed in batch order.
pub fn train(
    models: &mut Models,
    data: &Dataset,
    cfg: &TrainConfig,
    plugins: &LossPlugins,
) -> Result<TrainReport> {
    train_with(models, data, cfg, plugins, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    models: &mut Models,
    data: &Dataset,
    cfg: &TrainConfig,
    plugins: &LossPlugins,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("dataset must not be empty"));
    }
    let prefix = cfg.stage.trainable_prefix();
    let smart_cache = match cfg.stage {
        Stage::Smart => Some(
            data.images
                .iter()
                .map(|img| smart_inputs(models, img))
                .collect::<Result<Vec<_>>>()?,
        ),
        Stage::Baseline => None,
    };
    let mut opt = Ranger::new(RangerConfig {
        lr: cfg.learning_rate,
        ..cfg.optimizer
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled")
            })
            .collect();
        let models_ref: &Models = models;
        let results = par::map(&batch, |&i| -> Result<SampleGrads> {
            let mut g = Graph::with_trainable([prefix]);
            let (total, terms) = match &smart_cache {
                Some(cache) => smart_loss_graph(
                    &mut g,
                    models_ref,
                    plugins,
                    &cfg.weights,
                    &cache[i],
                    &data.images[i],
                )?,
                None => {
                    baseline_loss_graph(&mut g, models_ref, plugins, &cfg.weights, &data.images[i])?
                }
            };
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Ok((Vec::new(), terms, value));
            }
            g.backward(total)?;
            Ok((g.param_grads(), terms, value))
        });
        let mut sum: Vec<(String, Tensor)> = Vec::new();
        let mut rec = LossRecord {
            step,
            l2: 0.0,
            perceptual: 0.0,
            id: 0.0,
            align: 0.0,
            total: 0.0,
        };
        let scale = 1.0 / batch.len() as f64;
        for r in results {
            let (grads, terms, value) = r.map_err(|e| match e {
                Error::Numeric(detail) => Error::Training { step, detail },
                e => e,
            })?;
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("loss is {value}"),
                });
            }
            rec.l2 += terms.l2 * scale;
            rec.perceptual += terms.perceptual * scale;
            rec.id += terms.id * scale;
            rec.align += terms.align * scale;
            rec.total += value * scale;
            if sum.is_empty() {
                sum = grads;
            } else {
                for ((_, acc), (_, g)) in sum.iter_mut().zip(&grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        for (_, g) in &mut sum {
            for v in g.data_mut() {
                *v *= scale;
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
        }
        opt.step(&mut models.params, &sum)?;
        on_step(&rec);
        report.records.push(rec);
        if plateaued(&report.records, cfg.plateau_window, cfg.plateau_tolerance) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// Mean image loss over `data` with or without the refiner.
pub fn evaluate_image_loss(
    models: &Models,
    data: &Dataset,
    plugins: &LossPlugins,
    weights: &LossWeights,
    use_smart: bool,
) -> Result<f64> {
    let losses = par::map(&data.images, |img| -> Result<f64> {
        let r = crate::pipeline::invert(models, img, BetaWeights::ONE)?;
        let out = if use_smart {
            &r.image_refined
        } else {
            &r.image_baseline
        };
        loss_image(&out.tensor, img, weights, plugins)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

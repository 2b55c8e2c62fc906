//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use styleprompter::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use styleprompter::encoder::{
    complexity, AttentionKind, Encoder, EncoderConfig, PatchTokens, PyramidFeatures,
};
use styleprompter::generator::FeatureMap;
use styleprompter::latent_spaces::{
    dispersion, distance_to_w, style_mix_exchange, style_mix_interpolate, style_mix_progressive,
    EditDirection, LatentCode,
};
use styleprompter::models::{ModelConfig, Models};
use styleprompter::params::ParamStore;
use styleprompter::pipeline::{edit, invert, pose_edit};
use styleprompter::smart::{local_cross_attention, local_index_map, BetaWeights, Flow};
use styleprompter::training::{
    evaluate_image_loss, gradient_check, input_gradient_check, probe_loss, train, Dataset,
    LossPlugins, LossWeights, Stage, TrainConfig,
};
use styleprompter::{Error, Tensor};

type Check = Result<String, String>;

fn err(e: Error) -> String {
    e.to_string()
}

fn perturb(ps: &mut ParamStore, prefix: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ps.with_prefix(prefix).map(|(n, _)| n.clone()).collect();
    for n in names {
        let t = ps.get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape().to_vec(), std, &mut rng);
        *t = t.zip_map(&noise, |a, b| a + b).unwrap();
    }
}

fn random_pyramid(models: &Models, rng: &mut ChaCha8Rng) -> PyramidFeatures {
    let enc = &models.config.encoder;
    let maps = (0..enc.stages)
        .map(|s| {
            let side = enc.stage_grid(s);
            let t = Tensor::randn(vec![side * side, enc.stage_channels(s)], 1.0, rng);
            PatchTokens::new(side, side, t).unwrap()
        })
        .collect();
    PyramidFeatures { maps }
}

fn random_feature(models: &Models, rng: &mut ChaCha8Rng) -> FeatureMap {
    let s = models.smart.feature_side();
    FeatureMap {
        layer: models.smart_layer(),
        tensor: Tensor::randn(vec![models.smart.feature_channels(), s, s], 1.0, rng),
    }
}

fn refiner_models(seed: u64) -> Models {
    let mut m = Models::init(ModelConfig::default(), seed).unwrap();
    perturb(&mut m.params, "smart.", 0.3, seed + 100);
    m
}

fn smart_identity() -> Check {
    let t0 = Instant::now();
    let m = refiner_models(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let f = random_feature(&m, &mut rng);
        let p = random_pyramid(&m, &mut rng);
        let out = m
            .smart
            .refine(&m.params, &f, &p, BetaWeights::ZERO)
            .map_err(err)?;
        worst = worst.max(out.tensor.max_abs_diff(&f.tensor));
    }
    let secs = t0.elapsed().as_secs_f64();
    let side = m.smart.feature_side();
    let detail = format!("{side}x{side}, 100 draws, max abs diff {worst:e}, {secs:.2} s");
    if worst == 0.0 && secs < 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn beta1_homogeneity() -> Check {
    let m = refiner_models(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_feature(&m, &mut rng);
    let p = random_pyramid(&m, &mut rng);
    let delta = |b1: f64| -> Result<Tensor, String> {
        let out = m
            .smart
            .refine(&m.params, &f, &p, BetaWeights::new(b1, 0.0).map_err(err)?)
            .map_err(err)?;
        out.tensor.zip_map(&f.tensor, |a, b| a - b).map_err(err)
    };
    let unit = delta(1.0)?;
    let scale = unit.norm();
    let mut worst = 0.0f64;
    for b1 in [0.25, 0.5, 1.0, 2.0] {
        let d = delta(b1)?;
        let expect = unit.map(|v| v * b1);
        let diff = d.zip_map(&expect, |a, b| a - b).map_err(err)?.norm();
        worst = worst.max(diff / (b1 * scale));
    }
    let detail = format!("max relative error {worst:e}");
    if worst <= 1e-5 && scale > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Targets of query `(i, j)` by direct application of the mapping rules.
fn rule_targets(hf: usize, hp: usize, i: usize, j: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for p in 0..hp {
        for q in 0..hp {
            let hit = if hf >= hp {
                let r = hf / hp;
                p == i / r && q == j / r
            } else {
                let r = hp / hf;
                p / r == i && q / r == j
            };
            if hit {
                out.push((p, q));
            }
        }
    }
    out
}

const SIDES: [usize; 4] = [1, 2, 4, 8];

fn attention_oracle() -> Check {
    let (a, c, heads, beta1) = (4, 6, 2, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for hf in SIDES {
        for hp in SIDES {
            let q = Tensor::randn(vec![hf * hf, a], 1.0, &mut rng);
            let k = Tensor::randn(vec![hp * hp, a], 1.0, &mut rng);
            let v = Tensor::randn(vec![hp * hp, c], 1.0, &mut rng);
            let map = local_index_map(hf, hp).map_err(err)?;
            let fast = local_cross_attention(
                &q,
                std::slice::from_ref(&k),
                std::slice::from_ref(&v),
                &[map],
                beta1,
                heads,
            )
            .map_err(err)?;
            let (ah, ch) = (a / heads, c / heads);
            for i in 0..hf {
                for j in 0..hf {
                    let qi = i * hf + j;
                    for h in 0..heads {
                        for ci in 0..ch {
                            let mut acc = 0.0;
                            for (p, pq) in rule_targets(hf, hp, i, j) {
                                let t = p * hp + pq;
                                let score: f64 = (0..ah)
                                    .map(|x| q.get(&[qi, h * ah + x]) * k.get(&[t, h * ah + x]))
                                    .sum();
                                acc += score * beta1 * v.get(&[t, h * ch + ci]);
                            }
                            let d = (acc - fast.get(&[qi, h * ch + ci])).abs();
                            worst = worst.max(d);
                        }
                    }
                }
            }
        }
    }
    let detail = format!("16 grid pairs, max abs diff {worst:e}");
    if worst <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn index_map_oracle() -> Check {
    let mut checked = 0;
    for hf in SIDES {
        for hp in SIDES {
            let map = local_index_map(hf, hp).map_err(err)?;
            for i in 0..hf {
                for j in 0..hf {
                    let mut got = map.targets_of(i, j);
                    got.sort_unstable();
                    let want = rule_targets(hf, hp, i, j);
                    if got != want {
                        return Err(format!("{hf}->{hp} query ({i},{j}): {got:?} vs {want:?}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("16 grid pairs, {checked} queries, exact"))
}

fn complexity_formulas() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let h: u64 = rng.random_range(1..200);
        let w: u64 = rng.random_range(1..200);
        let c: u64 = rng.random_range(1..1024);
        let m: u64 = rng.random_range(1..32);
        let t: u64 = rng.random_range(0..32);
        let (hw, c2) = ((h * w) as u128, (c as u128).pow(2));
        let (m2, t, c1) = ((m * m) as u128, t as u128, c as u128);
        let msa = 4 * hw * c2 + 2 * hw * hw * c1;
        let wmsa = 4 * hw * c2 + 2 * m2 * hw * c1;
        let star = 4 * (hw + t) * c2 + 2 * m2 * (hw + t) * c1;
        let got = |k| complexity(k, h, w, c, m, t as u64).map_err(err);
        if got(AttentionKind::Msa)? != msa
            || got(AttentionKind::WMsa)? != wmsa
            || got(AttentionKind::WMsaLatent)? != star
        {
            return Err(format!("mismatch at h={h} w={w} C={c} M={m} T={t}"));
        }
        if got(AttentionKind::WMsaLatent)? - got(AttentionKind::WMsa)?
            != 4 * t * c2 + 2 * m2 * t * c1
        {
            return Err(format!(
                "latent overhead wrong at h={h} w={w} C={c} M={m} T={t}"
            ));
        }
    }
    let hand = complexity(AttentionKind::Msa, 8, 8, 4, 1, 0).map_err(err)?;
    if hand != 36864 {
        return Err(format!("MSA(8, 8, 4) = {hand}"));
    }
    Ok("1000 random draws exact; MSA(8, 8, 4) = 36864".into())
}

fn latent_token_transparency() -> Check {
    let cfg = EncoderConfig {
        latent_token_count: 0,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps = enc.init_params(&mut rng);
    for _ in 0..5 {
        let img = Tensor::randn(vec![3, 32, 32], 0.5, &mut rng);
        let (with, _) = enc.encode(&ps, &img).map_err(err)?;
        let plain = enc.encode_backbone(&ps, &img).map_err(err)?;
        if !with.exact_eq(&plain) {
            return Err("pyramid differs from the plain backbone".into());
        }
    }
    Ok("5 images, all stages bitwise equal".into())
}

fn random_wplus(m: &Models, rng: &mut ChaCha8Rng) -> LatentCode {
    let rows: Vec<Vec<f64>> = (0..m.generator.num_ws())
        .map(|_| m.generator.sample_w(&m.params, rng).unwrap())
        .collect();
    LatentCode::from_rows(&rows).unwrap()
}

fn split_resume() -> Check {
    let m = Models::init(ModelConfig::default(), 8).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layers = m.config.generator.num_conv_layers();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = random_wplus(&m, &mut rng);
        let full = m.generator.synthesize(&m.params, &w).map_err(err)?;
        for l in 1..=layers {
            let (f, c) = m
                .generator
                .synthesize_to_layer(&m.params, &w, l)
                .map_err(err)?;
            let back = m
                .generator
                .synthesize_from_layer(&m.params, &f, &c, &w, l)
                .map_err(err)?;
            worst = worst.max(back.tensor.max_abs_diff(&full.tensor));
        }
    }
    let detail = format!("20 codes x {layers} split layers, max abs diff {worst:e}");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Small models for finite-difference checks; the refiner sits on a 4×4 map.
fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.generator.output_size = 16;
    cfg.generator.w_dim = 8;
    cfg.generator.z_dim = 8;
    cfg.generator.base_feature_channels = 8;
    cfg.generator.mapping_depth = 2;
    cfg.generator.w_avg_samples = 16;
    cfg.encoder = EncoderConfig {
        image_size: 16,
        patch_size: 2,
        window_size: 4,
        stages: 3,
        stage_depths: vec![2, 1, 1],
        base_channels: 4,
        latent_token_count: 6,
        heads_per_stage: vec![1, 2, 2],
        latent_dim: 8,
        mlp_ratio: 2,
        head_hidden: 8,
    };
    cfg.smart.smart_layer = 1;
    cfg.smart.attn_dim = 4;
    cfg
}

fn gradient_checks() -> Check {
    let t0 = Instant::now();
    let mut m = Models::init(gradcheck_config(), 10).map_err(err)?;
    perturb(&mut m.params, "smart.", 0.3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Tensor::randn(vec![3, 16, 16], 0.5, &mut rng);
    let (eps, samples) = (1e-5, 20);
    let mut lines = Vec::new();
    let mut worst = 0.0f64;

    let enc = &m.encoder;
    let r = gradient_check(
        &m.params,
        "encoder.",
        |g, ps| {
            let x = g.constant(img.clone());
            let out = enc.encode_graph(g, ps, x)?;
            let mut loss = probe_loss(g, out.latents, 1)?;
            for (s, &p) in out.pyramid.iter().enumerate() {
                let l = probe_loss(g, p, 2 + s as u64)?;
                loss = g.add(loss, l)?;
            }
            Ok(loss)
        },
        samples,
        eps,
        13,
    )
    .map_err(err)?;
    lines.push(format!("encoder {:.1e}", r.max_rel_error));
    worst = worst.max(r.max_rel_error);

    let (_, lat) = m.encoder.encode(&m.params, &img).map_err(err)?;
    let w_bar = m.w_avg().map_err(err)?;
    let r = gradient_check(
        &m.params,
        "encoder.head.",
        |g, ps| {
            let l = g.constant(lat.tensor.clone());
            let wb = g.constant(Tensor::new(vec![w_bar.dim()], w_bar.value.clone())?);
            let w = enc.predict_graph(g, ps, l, wb)?;
            probe_loss(g, w, 3)
        },
        samples,
        eps,
        14,
    )
    .map_err(err)?;
    lines.push(format!("head {:.1e}", r.max_rel_error));
    worst = worst.max(r.max_rel_error);

    let w0 = random_wplus(&m, &mut rng);
    let target = Tensor::randn(vec![3, 16, 16], 0.5, &mut rng);
    let gen = &m.generator;
    let ps = &m.params;
    let r = input_gradient_check(
        &[w0.as_tensor().clone()],
        |g, v| {
            let out = gen.synthesize_graph(g, ps, v[0])?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        },
        samples,
        eps,
        15,
    )
    .map_err(err)?;
    lines.push(format!("generator path {:.1e}", r.max_rel_error));
    worst = worst.max(r.max_rel_error);

    let feat = random_feature(&m, &mut rng);
    let pyr = random_pyramid(&m, &mut rng);
    let smart = &m.smart;
    let r = gradient_check(
        &m.params,
        "smart.",
        |g, ps| {
            let f = g.constant(feat.tensor.clone());
            let p: Vec<_> = pyr
                .maps
                .iter()
                .map(|t| g.constant(t.tensor.clone()))
                .collect();
            let out = smart.refine_graph(g, ps, f, &p, BetaWeights::ONE, None)?;
            probe_loss(g, out, 4)
        },
        samples,
        eps,
        16,
    )
    .map_err(err)?;
    lines.push(format!("smart {:.1e}", r.max_rel_error));
    worst = worst.max(r.max_rel_error);

    let secs = t0.elapsed().as_secs_f64();
    let detail = format!("{}; {secs:.1} s", lines.join(", "));
    if worst <= 1e-4 && secs <= 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn style_mixing_identities() -> Check {
    let m = Models::init(ModelConfig::default(), 17).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let l = m.generator.num_ws();
    for _ in 0..10 {
        let s = random_wplus(&m, &mut rng);
        let r = random_wplus(&m, &mut rng);
        let ok = style_mix_progressive(&s, &r, 0).map_err(err)? == s
            && style_mix_progressive(&s, &r, l).map_err(err)? == r
            && style_mix_interpolate(&r, &s, 0.0).map_err(err)? == r
            && style_mix_interpolate(&r, &s, 1.0).map_err(err)? == s
            && (1..=l).all(|k| style_mix_exchange(&s, &s, k).unwrap() == s);
        if !ok {
            return Err("an endpoint identity does not hold exactly".into());
        }
    }
    Ok("progressive k in {0, L}, interpolation in {0, 1}, exchange with identical sources".into())
}

fn metric_identities() -> Check {
    let m = Models::init(ModelConfig::default(), 19).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let codes: Vec<LatentCode> = (0..8)
        .map(|_| {
            let w = m.generator.sample_w(&m.params, &mut rng).unwrap();
            m.generator.broadcast_w(&w).unwrap()
        })
        .collect();
    let d0 = dispersion(&codes).map_err(err)?;
    let t0 = distance_to_w(&codes, &codes).map_err(err)?;
    let c = |rows: &[Vec<f64>]| LatentCode::from_rows(rows).unwrap();
    let cases = [
        (dispersion(&[c(&[vec![0.0], vec![2.0]])]).map_err(err)?, 1.0),
        (
            dispersion(&[c(&[vec![1.0, 4.0], vec![3.0, 0.0]])]).map_err(err)?,
            1.5,
        ),
        (
            distance_to_w(
                &[c(&[vec![1.0, 2.0], vec![0.0, 0.0]])],
                &[c(&[vec![0.0, 0.0], vec![0.0, 0.0]])],
            )
            .map_err(err)?,
            1.5,
        ),
        (
            distance_to_w(
                &[c(&[vec![1.0, -1.0], vec![2.0, 0.5]])],
                &[c(&[vec![0.5, 0.5], vec![0.5, 0.5]])],
            )
            .map_err(err)?,
            1.75,
        ),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let detail =
        format!("dispersion(W) = {d0}, distance(identical) = {t0}, hand cases max diff {worst:e}");
    if d0 == 0.0 && t0 == 0.0 && worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn self_inversion_training() -> Check {
    let t0 = Instant::now();
    let mut m = Models::init(ModelConfig::default(), 21).map_err(err)?;
    let plugins = LossPlugins::random(m.config.generator.output_size, 22);
    let train_set = Dataset::from_generator(&m, 64, 23).map_err(err)?;
    let held_out = Dataset::from_generator(&m, 16, 24).map_err(err)?;
    let stage1 = TrainConfig {
        seed: 25,
        ..TrainConfig::for_stage(Stage::Baseline)
    };
    let r1 = train(&mut m, &train_set, &stage1, &plugins).map_err(err)?;
    let (init, fin) = (r1.initial_smoothed(), r1.final_smoothed());
    let image_weights = LossWeights {
        lambda4: 0.0,
        ..stage1.weights
    };
    let baseline =
        evaluate_image_loss(&m, &held_out, &plugins, &image_weights, false).map_err(err)?;
    let stage2 = TrainConfig {
        seed: 26,
        ..TrainConfig::for_stage(Stage::Smart)
    };
    let r2 = train(&mut m, &train_set, &stage2, &plugins).map_err(err)?;
    let refined =
        evaluate_image_loss(&m, &held_out, &plugins, &image_weights, true).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "stage 1: {} steps, smoothed L_base {init:.4} -> {fin:.4} (ratio {:.3}); \
         stage 2: {} steps; held-out L_image baseline {baseline:.4} vs refined {refined:.4}; {:.0} s",
        r1.records.len(),
        fin / init,
        r2.records.len(),
        secs
    );
    if fin < 0.5 * init && refined < baseline && secs < 1800.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Refiner output computed query by query with explicit flow remapping.
fn remap_oracle(m: &Models, f: &FeatureMap, p: &PyramidFeatures, flow: &Flow) -> Tensor {
    let ps = &m.params;
    let w = |n: &str| ps.get(n).unwrap();
    let linear = |x: &[f64], prefix: &str| -> Vec<f64> {
        let (wt, b) = (w(&format!("{prefix}.weight")), w(&format!("{prefix}.bias")));
        let (i, o) = (wt.shape()[0], wt.shape()[1]);
        (0..o)
            .map(|c| b.data()[c] + (0..i).map(|r| x[r] * wt.data()[r * o + c]).sum::<f64>())
            .collect()
    };
    let side = m.smart.feature_side();
    let c = m.smart.feature_channels();
    let heads = m.config.smart.head_count;
    let a = m.config.smart.attn_dim;
    let (ah, ch) = (a / heads, c / heads);
    let mut out = Tensor::zeros(vec![c, side, side]);
    for qi in 0..side * side {
        let fq: Vec<f64> = (0..c)
            .map(|ci| f.tensor.data()[ci * side * side + qi])
            .collect();
        let q = linear(&fq, "smart.q");
        let (sy, sx) = (
            (qi / side) as i64 + flow.dy[qi],
            (qi % side) as i64 + flow.dx[qi],
        );
        let src = (
            sy.clamp(0, side as i64 - 1) as usize,
            sx.clamp(0, side as i64 - 1) as usize,
        );
        let mut attn = vec![0.0; c];
        for (s, map) in p.maps.iter().enumerate() {
            let hp = map.grid_h;
            for (ty, tx) in rule_targets(side, hp, src.0, src.1) {
                let row = map.tensor.row(ty * hp + tx);
                let k = linear(row, &format!("smart.k.{s}"));
                let v = linear(row, &format!("smart.v.{s}"));
                for h in 0..heads {
                    let score: f64 = (0..ah).map(|x| q[h * ah + x] * k[h * ah + x]).sum();
                    for x in 0..ch {
                        attn[h * ch + x] += score * v[h * ch + x];
                    }
                }
            }
        }
        let fh: Vec<f64> = fq.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = linear(&fh, "smart.ffn.fc1")
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let ffn = linear(&hidden, "smart.ffn.fc2");
        for ci in 0..c {
            out.data_mut()[ci * side * side + qi] = fh[ci] + ffn[ci];
        }
    }
    out
}

fn flow_identity() -> Check {
    let m = refiner_models(27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let img = m
        .generator
        .synthesize(&m.params, &random_wplus(&m, &mut rng))
        .map_err(err)?
        .tensor;
    let inv = invert(&m, &img, BetaWeights::ONE).map_err(err)?;
    let delta = Tensor::randn(vec![m.config.generator.w_dim], 1.0, &mut rng);
    let dir = EditDirection::from_w("probe", delta.data(), m.generator.num_ws()).map_err(err)?;
    let side = m.smart.feature_side();
    let a = pose_edit(
        &m,
        &inv,
        &dir,
        0.8,
        &Flow::zeros(side, side),
        BetaWeights::ONE,
    )
    .map_err(err)?;
    let b = edit(&m, &inv, &dir, 0.8, BetaWeights::ONE).map_err(err)?;
    if !a.tensor.exact_eq(&b.tensor) {
        return Err("zero flow differs from the plain edit".into());
    }
    let f = random_feature(&m, &mut rng);
    let p = random_pyramid(&m, &mut rng);
    let mut worst = 0.0f64;
    for (dx, dy) in [(1, 0), (0, -2), (3, 2), (-1, -1), (9, -9)] {
        let flow = Flow::constant(side, side, dx, dy);
        let fast = m
            .smart
            .refine_with_flow(&m.params, &f, &p, BetaWeights::ONE, &flow)
            .map_err(err)?;
        worst = worst.max(fast.tensor.max_abs_diff(&remap_oracle(&m, &f, &p, &flow)));
    }
    let detail =
        format!("zero flow bit-exact; 5 constant shifts vs remap oracle, max abs diff {worst:e}");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = refiner_models(29);
    let bundle = CheckpointBundle::from_models(&m, Some(29));
    let (a, b) = (dir.path().join("a.spck"), dir.path().join("b.spck"));
    save_checkpoint(&bundle, &a).map_err(err)?;
    let loaded = load_checkpoint(&a).map_err(err)?;
    save_checkpoint(&loaded, &b).map_err(err)?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    if ba != bb {
        return Err("save -> load -> save changed the file".into());
    }
    let mut rejected = 0;
    let mut corrupt_inputs: Vec<Vec<u8>> = [7, 100, ba.len() / 3, ba.len() - 1]
        .iter()
        .map(|&n| ba[..n].to_vec())
        .collect();
    for at in [ba.len() / 2, ba.len() - 40] {
        let mut x = ba.clone();
        x[at] ^= 0x10;
        corrupt_inputs.push(x);
    }
    for bytes in &corrupt_inputs {
        match CheckpointBundle::from_bytes(bytes) {
            Err(Error::Checkpoint { entry, .. }) if !entry.is_empty() => rejected += 1,
            other => return Err(format!("corrupt input accepted or misreported: {other:?}")),
        }
    }
    Ok(format!(
        "{} bytes byte-identical; {rejected}/{} corrupted files rejected with the entry named",
        ba.len(),
        corrupt_inputs.len()
    ))
}

type CheckFn = fn() -> Check;

fn main() -> ExitCode {
    let checks: [(&str, CheckFn); 13] = [
        ("smart identity at zero gates", smart_identity),
        ("beta1 homogeneity", beta1_homogeneity),
        ("local attention vs brute force", attention_oracle),
        ("index map vs enumeration", index_map_oracle),
        ("complexity formulas", complexity_formulas),
        ("latent-token transparency", latent_token_transparency),
        ("split/resume synthesis", split_resume),
        ("gradient checks", gradient_checks),
        ("style-mixing identities", style_mixing_identities),
        ("metric identities", metric_identities),
        ("self-inversion training", self_inversion_training),
        ("flow identity and remap oracle", flow_identity),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 13 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

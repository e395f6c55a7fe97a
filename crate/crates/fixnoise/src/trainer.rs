//! Source pretraining and transfer fine-tuning loops.
//!
//! Training is a pure function of (configs, dataset bytes, seed): latents,
//! noise, data order and initialization each draw from their own named
//! stream, so toggling the anchored pass never desynchronizes the rest.
//! Single ownership: one logical thread drives the loop; kernels may use
//! the rayon pool internally without changing results.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta, FullScaleReference};
use crate::error::Result;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, fixnoise_fm_term, r1_penalty_from_scores, LossConfig,
};
use crate::nets::{
    discriminate, ladder_layers, map_latent, mapping_param_names, sample_noise, synthesize,
    DiscriminatorModel, GeneratorConfig, GeneratorModel, NoiseMode, Params, SynthTaps,
};
use crate::optim::{ema_decay, ema_update, AdamConfig, AdamState};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::Tape;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Plain,
    FixNoise,
    FreezeG(usize),
    FreezeMapping,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Plain => write!(f, "plain"),
            TrainMode::FixNoise => write!(f, "fixnoise"),
            TrainMode::FreezeG(i) => write!(f, "freezeg={i}"),
            TrainMode::FreezeMapping => write!(f, "freeze-mapping"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TrainMode::Plain),
            "fixnoise" => Ok(TrainMode::FixNoise),
            "freeze-mapping" => Ok(TrainMode::FreezeMapping),
            other => {
                if let Some(i) = other.strip_prefix("freezeg=") {
                    let i = i
                        .parse::<usize>()
                        .map_err(|_| err_config!("bad freeze index in mode '{other}'"))?;
                    Ok(TrainMode::FreezeG(i))
                } else {
                    Err(err_config!(
                        "unknown mode '{other}' (expected plain, fixnoise, freezeg=N, freeze-mapping)"
                    ))
                }
            }
        }
    }
}

impl Serialize for TrainMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TrainMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_images: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_halflife_images: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written
    /// by the harness.
    #[serde(default)]
    pub checkpoint_interval_images: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_images: 200_000,
            learning_rate: 0.0025,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            ema_halflife_images: 10_000.0,
            mode: TrainMode::Plain,
            seed: 0,
            checkpoint_interval_images: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gen_cfg: &GeneratorConfig) -> Result<()> {
        if self.batch_size < 2 {
            return Err(err_config!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.total_images == 0 {
            return Err(err_config!("total_images must be positive"));
        }
        if let TrainMode::FreezeG(i) = self.mode {
            let max = ladder_layers(gen_cfg).len();
            if i > max {
                return Err(err_config!("freezeg index {i} exceeds ladder length {max}"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: 1e-8,
        }
    }
}

// ── State ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainState {
    pub g: GeneratorModel,
    pub g_ema: GeneratorModel,
    pub d: DiscriminatorModel,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub step: u64,
    pub images_seen: u64,
}

/// Freshly initialized models and optimizers.
pub fn fresh_state(config: GeneratorConfig, init_seed: u64, anchor_seed: u64) -> TrainState {
    let g = GeneratorModel::init(config.clone(), init_seed, anchor_seed);
    let g_ema = g.clone();
    let d = DiscriminatorModel::init(config, init_seed);
    let opt_g = AdamState::new(&g.params);
    let opt_d = AdamState::new(&d.params);
    TrainState { g, g_ema, d, opt_g, opt_d, step: 0, images_seen: 0 }
}

/// One line of the JSONL metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub images_seen: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub fm_loss: Option<f64>,
    pub r1: Option<f64>,
}

fn frozen_mask(g: &GeneratorModel, mode: TrainMode) -> Vec<bool> {
    let mut frozen_names: Vec<String> = Vec::new();
    match mode {
        TrainMode::Plain | TrainMode::FixNoise => {}
        TrainMode::FreezeG(i) => {
            for (_, names) in ladder_layers(&g.config).into_iter().take(i) {
                frozen_names.extend(names);
            }
        }
        TrainMode::FreezeMapping => frozen_names.extend(mapping_param_names(&g.config)),
    }
    g.params
        .names()
        .map(|n| frozen_names.iter().any(|f| f == n))
        .collect()
}

struct Streams {
    latent: rand_chacha::ChaCha8Rng,
    noise: rand_chacha::ChaCha8Rng,
    data: rand_chacha::ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            latent: stream_rng(seed, "latent"),
            noise: stream_rng(seed, "noise"),
            data: stream_rng(seed, "data"),
        }
    }
}

struct DataOrder {
    order: Vec<usize>,
    cursor: usize,
}

impl DataOrder {
    fn new(n: usize) -> Self {
        DataOrder { order: (0..n).collect(), cursor: n }
    }

    fn next_batch(&mut self, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

// ── Core loop ───────────────────────────────────────────────────────────

pub struct TrainDriver<'a> {
    pub gen_cfg: GeneratorConfig,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    /// Frozen source generator for the anchored matching term.
    pub source: Option<&'a GeneratorModel>,
    pub images: &'a [Vec<f64>],
    pub out_dir: PathBuf,
}

impl<'a> TrainDriver<'a> {
    pub fn run(&self, mut state: TrainState) -> Result<TrainState> {
        self.train_cfg.validate(&self.gen_cfg)?;
        self.loss_cfg.validate()?;
        let res = self.gen_cfg.final_resolution;
        let img_len = 3 * res * res;
        if self.images.is_empty() {
            return Err(err_contract!("training dataset is empty"));
        }
        if self.images.iter().any(|im| im.len() != img_len) {
            return Err(err_contract!(
                "dataset images do not match the configured resolution {res}x{res}"
            ));
        }
        if matches!(self.train_cfg.mode, TrainMode::FixNoise) && self.source.is_none() {
            return Err(err_config!("fixnoise mode requires a source model"));
        }
        if let Some(src) = self.source {
            if src.anchor_seed != state.g.anchor_seed {
                return Err(err_config!(
                    "anchor seed mismatch between source ({}) and trainee ({})",
                    src.anchor_seed,
                    state.g.anchor_seed
                ));
            }
        }

        std::fs::create_dir_all(&self.out_dir)?;
        let mut log = BufWriter::new(File::create(self.out_dir.join("metrics.jsonl"))?);
        let mut streams = Streams::new(self.train_cfg.seed);
        let mut order = DataOrder::new(self.images.len());
        let frozen = frozen_mask(&state.g, self.train_cfg.mode);
        let no_freeze_d = vec![false; state.d.params.len()];
        let adam = self.train_cfg.adam();
        let batch = self.train_cfg.batch_size;
        let decay = ema_decay(batch, self.train_cfg.ema_halflife_images);
        let steps = self.train_cfg.total_images.div_ceil(batch as u64);
        let mut next_ckpt = if self.train_cfg.checkpoint_interval_images > 0 {
            self.train_cfg.checkpoint_interval_images
        } else {
            u64::MAX
        };

        for local_step in 0..steps {
            let rec = self.train_step(&mut state, &mut streams, &mut order, &adam, &frozen, &no_freeze_d, decay)?;
            if !rec.d_loss.is_finite() || !rec.g_loss.is_finite() {
                let snap = self.out_dir.join("nan_snapshot.fxnz");
                let meta = self.meta(&state);
                save_checkpoint(&state, &meta, &snap)?;
                return Err(err_numeric!(
                    "non-finite loss at step {} (d={}, g={}); snapshot at {}",
                    rec.step,
                    rec.d_loss,
                    rec.g_loss,
                    snap.display()
                ));
            }
            serde_json::to_writer(&mut log, &rec).map_err(|e| err_numeric!("log encode: {e}"))?;
            log.write_all(b"\n")?;
            let _ = local_step;
            if state.images_seen >= next_ckpt {
                let meta = self.meta(&state);
                save_checkpoint(
                    &state,
                    &meta,
                    &self.out_dir.join(format!("ckpt_{:07}.fxnz", state.images_seen)),
                )?;
                next_ckpt += self.train_cfg.checkpoint_interval_images;
            }
        }
        log.flush()?;
        Ok(state)
    }

    pub fn meta(&self, state: &TrainState) -> CheckpointMeta {
        CheckpointMeta {
            generator_config: self.gen_cfg.clone(),
            anchor_seed: state.g.anchor_seed,
            step: state.step,
            images_seen: state.images_seen,
            opt_g_step: state.opt_g.step,
            opt_d_step: state.opt_d.step,
            train_mode: Some(self.train_cfg.mode.to_string()),
            train_config: Some(self.train_cfg.clone()),
            loss_config: Some(self.loss_cfg.clone()),
            parents: None,
            swap_index: None,
            full_scale_reference: Some(FullScaleReference::recorded()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &self,
        state: &mut TrainState,
        streams: &mut Streams,
        order: &mut DataOrder,
        adam: &AdamConfig,
        frozen_g: &[bool],
        frozen_d: &[bool],
        decay: f64,
    ) -> Result<StepRecord> {
        let batch = self.train_cfg.batch_size;
        let zd = self.gen_cfg.z_dim;
        let res = self.gen_cfg.final_resolution;
        let do_r1 = state.step % self.loss_cfg.r1_interval as u64 == 0;

        // ---- critic step
        let z_d = normal_vec(&mut streams.latent, batch * zd);
        let noise_d = sample_noise(&mut streams.noise, &state.g, NoiseMode::Random)?;
        let fake = {
            let mut tape = Tape::new();
            let gp = state.g.params.stage(&mut tape, false);
            let z = tape.leaf(z_d, vec![batch, zd], false);
            let w = map_latent(&mut tape, &self.gen_cfg, &gp, z)?;
            let out = synthesize(&mut tape, &self.gen_cfg, &gp, w, &noise_d, SynthTaps::default())?;
            tape.data(out.image).to_vec()
        };
        let real_idx = order.next_batch(batch, &mut streams.data);
        let mut real = Vec::with_capacity(batch * 3 * res * res);
        for &i in &real_idx {
            real.extend_from_slice(&self.images[i]);
        }

        let nan_record = |state: &TrainState| StepRecord {
            step: state.step + 1,
            images_seen: state.images_seen + batch as u64,
            d_loss: f64::NAN,
            g_loss: f64::NAN,
            fm_loss: None,
            r1: None,
        };

        let (d_loss_v, r1_v) = {
            let mut tape = Tape::new();
            let dp = state.d.params.stage(&mut tape, true);
            let real_t = tape.leaf(real, vec![batch, 3, res, res], do_r1);
            let fake_t = tape.leaf(fake, vec![batch, 3, res, res], false);
            let real_scores = discriminate(&mut tape, &self.gen_cfg, &dp, real_t)?;
            let fake_scores = discriminate(&mut tape, &self.gen_cfg, &dp, fake_t)?;
            if tape.data(real_scores).iter().chain(tape.data(fake_scores)).any(|v| !v.is_finite()) {
                return Ok(nan_record(state));
            }
            let d_loss = adversarial_d_loss(&mut tape, real_scores, fake_scores)?;
            let (total, r1_v) = if do_r1 {
                let pen = r1_penalty_from_scores(
                    &mut tape,
                    real_t,
                    real_scores,
                    self.loss_cfg.r1_gamma,
                )?;
                // lazy regularization: scale by the interval so the
                // effective strength matches an every-step penalty
                let pen_lazy = tape.scale(pen, self.loss_cfg.r1_interval as f64);
                (tape.add(d_loss, pen_lazy)?, Some(tape.value(pen)))
            } else {
                (d_loss, None)
            };
            tape.backward(total)?;
            let grads: Vec<Option<Vec<f64>>> =
                dp.ids().iter().map(|id| tape.grad(*id).map(|g| g.to_vec())).collect();
            state.opt_d.apply(adam, &mut state.d.params, &grads, frozen_d)?;
            (tape.value(d_loss), r1_v)
        };

        // ---- generator step (shared z batch for both terms)
        let z_g = normal_vec(&mut streams.latent, batch * zd);
        let noise_g = sample_noise(&mut streams.noise, &state.g, NoiseMode::Random)?;
        let (g_loss_v, fm_v) = {
            let mut tape = Tape::new();
            let gp = state.g.params.stage(&mut tape, true);
            let dp = state.d.params.stage(&mut tape, false);
            let z = tape.leaf(z_g, vec![batch, zd], false);
            let w = map_latent(&mut tape, &self.gen_cfg, &gp, z)?;
            let out = synthesize(&mut tape, &self.gen_cfg, &gp, w, &noise_g, SynthTaps::default())?;
            let fake_scores = discriminate(&mut tape, &self.gen_cfg, &dp, out.image)?;
            if tape.data(fake_scores).iter().any(|v| !v.is_finite()) {
                return Ok(nan_record(state));
            }
            let g_adv = adversarial_g_loss(&mut tape, fake_scores)?;
            let (total, fm_v) = if matches!(self.train_cfg.mode, TrainMode::FixNoise) {
                let src = self.source.expect("checked in run()");
                let fm = fixnoise_fm_term(
                    &mut tape,
                    src,
                    &state.g,
                    &gp,
                    z,
                    self.loss_cfg.matching_space,
                )?;
                let fm_value = tape.value(fm);
                if self.loss_cfg.lambda_fm > 0.0 {
                    let weighted = tape.scale(fm, self.loss_cfg.lambda_fm);
                    (tape.add(g_adv, weighted)?, Some(fm_value))
                } else {
                    (g_adv, Some(fm_value))
                }
            } else {
                (g_adv, None)
            };
            tape.backward(total)?;
            let grads: Vec<Option<Vec<f64>>> =
                gp.ids().iter().map(|id| tape.grad(*id).map(|g| g.to_vec())).collect();
            state.opt_g.apply(adam, &mut state.g.params, &grads, frozen_g)?;
            (tape.value(g_adv), fm_v)
        };

        ema_update(&mut state.g_ema.params, &state.g.params, decay)?;
        state.step += 1;
        state.images_seen += batch as u64;
        Ok(StepRecord {
            step: state.step,
            images_seen: state.images_seen,
            d_loss: d_loss_v,
            g_loss: g_loss_v,
            fm_loss: fm_v,
            r1: r1_v,
        })
    }
}

/// Adversarial pretraining on the source dataset from fresh weights.
pub fn pretrain_source(
    gen_cfg: &GeneratorConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    images: &[Vec<f64>],
    out_dir: &Path,
) -> Result<TrainState> {
    let mut anchor_rng = stream_rng(train_cfg.seed, "anchor-seed");
    let anchor_seed = rand::RngCore::next_u64(&mut anchor_rng);
    let state = fresh_state(gen_cfg.clone(), train_cfg.seed, anchor_seed);
    let driver = TrainDriver {
        gen_cfg: gen_cfg.clone(),
        train_cfg: train_cfg.clone(),
        loss_cfg: loss_cfg.clone(),
        source: None,
        images,
        out_dir: out_dir.to_path_buf(),
    };
    driver.run(state)
}

/// Fine-tune on the target dataset starting from a source state. The
/// source EMA generator is both the initialization and the frozen
/// reference for the anchored matching term; the anchor seed is inherited.
pub fn transfer(
    gen_cfg: &GeneratorConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    source_state: &TrainState,
    images: &[Vec<f64>],
    out_dir: &Path,
) -> Result<TrainState> {
    if source_state.g.config != *gen_cfg {
        return Err(err_config!("source checkpoint config does not match the experiment config"));
    }
    let source = source_state.g_ema.clone();
    let state = TrainState {
        g: source.clone(),
        g_ema: source.clone(),
        d: DiscriminatorModel { config: gen_cfg.clone(), params: source_state.d.params.clone() },
        opt_g: AdamState::new(&source.params),
        opt_d: AdamState::new(&source_state.d.params),
        step: 0,
        images_seen: 0,
    };
    let driver = TrainDriver {
        gen_cfg: gen_cfg.clone(),
        train_cfg: train_cfg.clone(),
        loss_cfg: loss_cfg.clone(),
        source: Some(&source),
        images,
        out_dir: out_dir.to_path_buf(),
    };
    driver.run(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(res: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, "test-data");
        (0..n)
            .map(|_| {
                normal_vec(&mut rng, 3 * res * res)
                    .into_iter()
                    .map(|v| (v * 0.3).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect()
    }

    fn tiny_train_cfg(images: u64, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_images: images,
            mode,
            seed: 33,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_string_round_trip() {
        for m in [TrainMode::Plain, TrainMode::FixNoise, TrainMode::FreezeG(3), TrainMode::FreezeMapping] {
            let s = m.to_string();
            assert_eq!(s.parse::<TrainMode>().unwrap(), m);
        }
        assert!("freezeg=x".parse::<TrainMode>().is_err());
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = GeneratorConfig::toy();
        let data = tiny_dataset(cfg.final_resolution, 16, 1);
        let tc = tiny_train_cfg(24, TrainMode::Plain);
        let lc = LossConfig { r1_interval: 2, ..LossConfig::default() };
        let run = |dir: &Path| {
            pretrain_source(&cfg, &tc, &lc, &data, dir).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = run(d1.path());
        let s2 = run(d2.path());
        for ((_, a), (_, b)) in s1.g.params.iter().zip(s2.g.params.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for ((_, a), (_, b)) in s1.d.params.iter().zip(s2.d.params.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn fixnoise_step0_fm_is_zero_and_freeze_masks_hold() {
        let cfg = GeneratorConfig::toy();
        let data = tiny_dataset(cfg.final_resolution, 16, 2);
        let dir = tempfile::tempdir().unwrap();
        let pre = pretrain_source(
            &cfg,
            &tiny_train_cfg(8, TrainMode::Plain),
            &LossConfig::default(),
            &data,
            dir.path(),
        )
        .unwrap();

        // fixnoise transfer: step-0 fm must be exactly 0
        let tdir = tempfile::tempdir().unwrap();
        let _ = transfer(
            &cfg,
            &tiny_train_cfg(8, TrainMode::FixNoise),
            &LossConfig::default(),
            &pre,
            &data,
            tdir.path(),
        )
        .unwrap();
        let log = std::fs::read_to_string(tdir.path().join("metrics.jsonl")).unwrap();
        let first: StepRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.fm_loss, Some(0.0));

        // freezeg: frozen payloads bitwise stable over the run
        let fdir = tempfile::tempdir().unwrap();
        let frozen_layers = 2;
        let post = transfer(
            &cfg,
            &tiny_train_cfg(40, TrainMode::FreezeG(frozen_layers)),
            &LossConfig::default(),
            &pre,
            &data,
            fdir.path(),
        )
        .unwrap();
        let frozen_names: Vec<String> = ladder_layers(&cfg)
            .into_iter()
            .take(frozen_layers)
            .flat_map(|(_, names)| names)
            .collect();
        for name in &frozen_names {
            let a = &pre.g_ema.params.get(name).unwrap().data;
            let b = &post.g.params.get(name).unwrap().data;
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} drifted");
        }
        // and at least one unfrozen parameter moved
        let moved = post
            .g
            .params
            .iter()
            .filter(|(n, _)| !frozen_names.iter().any(|f| f == n))
            .any(|(n, t)| {
                let before = &pre.g_ema.params.get(n).unwrap().data;
                t.data.iter().zip(before.iter()).any(|(x, y)| x != y)
            });
        assert!(moved);
    }

    #[test]
    fn fixnoise_with_zero_lambda_matches_plain_bitwise() {
        let cfg = GeneratorConfig::toy();
        let data = tiny_dataset(cfg.final_resolution, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        let pre = pretrain_source(
            &cfg,
            &tiny_train_cfg(8, TrainMode::Plain),
            &LossConfig::default(),
            &data,
            dir.path(),
        )
        .unwrap();

        let run = |mode: TrainMode, lambda: f64| {
            let d = tempfile::tempdir().unwrap();
            let lc = LossConfig { lambda_fm: lambda, ..LossConfig::default() };
            transfer(&cfg, &tiny_train_cfg(16, mode), &lc, &pre, &data, d.path()).unwrap()
        };
        let plain = run(TrainMode::Plain, 0.05);
        let fx0 = run(TrainMode::FixNoise, 0.0);
        for ((_, a), (_, b)) in plain.g.params.iter().zip(fx0.g.params.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn freeze_mapping_keeps_mapping_and_w_space() {
        let cfg = GeneratorConfig::toy();
        let data = tiny_dataset(cfg.final_resolution, 16, 4);
        let dir = tempfile::tempdir().unwrap();
        let pre = pretrain_source(
            &cfg,
            &tiny_train_cfg(8, TrainMode::Plain),
            &LossConfig::default(),
            &data,
            dir.path(),
        )
        .unwrap();
        let tdir = tempfile::tempdir().unwrap();
        let post = transfer(
            &cfg,
            &tiny_train_cfg(24, TrainMode::FreezeMapping),
            &LossConfig::default(),
            &pre,
            &data,
            tdir.path(),
        )
        .unwrap();
        for name in mapping_param_names(&cfg) {
            let a = &pre.g_ema.params.get(&name).unwrap().data;
            let b = &post.g.params.get(&name).unwrap().data;
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn nan_in_dataset_aborts_with_snapshot() {
        let cfg = GeneratorConfig::toy();
        let mut data = tiny_dataset(cfg.final_resolution, 8, 5);
        data[0][0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = pretrain_source(
            &cfg,
            &tiny_train_cfg(16, TrainMode::Plain),
            &LossConfig::default(),
            &data,
            dir.path(),
        );
        match err {
            Err(crate::error::Error::Numeric(m)) => {
                assert!(m.contains("snapshot"), "{m}");
                assert!(dir.path().join("nan_snapshot.fxnz").exists());
            }
            other => panic!("expected numeric abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ema_tracks_live_generator() {
        let cfg = GeneratorConfig::toy();
        let data = tiny_dataset(cfg.final_resolution, 16, 6);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            total_images: 40,
            ema_halflife_images: 8.0,
            mode: TrainMode::Plain,
            seed: 9,
            ..TrainConfig::default()
        };
        let state = pretrain_source(&cfg, &tc, &LossConfig::default(), &data, dir.path()).unwrap();
        // ema differs from live weights but stays in the same ballpark
        let mut any_diff = false;
        for ((_, a), (_, b)) in state.g.params.iter().zip(state.g_ema.params.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                if x != y {
                    any_diff = true;
                }
                assert!((x - y).abs() < 1.0);
            }
        }
        assert!(any_diff);
    }
}

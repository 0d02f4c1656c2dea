//! Flow-matching training of the velocity model.
//!
//! For each sample the two target frames `z0` (future proprioception, value)
//! are paired with standard Gaussian noise `z1` and a flow time `tau ~ U[0,1]`
//! shared by both targets. The network sees `z_tau = (1 - tau) z0 + tau z1` in
//! the target slots and regresses the constant velocity `z1 - z0`:
//!
//! ```text
//! loss = lambda_prop * mean((v_q - (z1_q - z0_q))^2) + lambda_val * mean((v_v - (z1_v - z0_v))^2)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Blob, Container, RngState, VIVA_MAGIC};
use crate::codec::{CodecConfig, LatentCodec, NormalizationSpec};
use crate::episode::{read_dataset, Episode, Manifest};
use crate::error::{Error, Result};
use crate::model::{
    param_entries, tokenize, untokenize, ModelConfig, VelocityModel, SEQ_FRAMES, TARGET_SLOTS,
};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::Real;

pub const CONDITIONING_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub prop: f64,
    pub val: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { prop: 1.0, val: 0.5 }
    }
}

impl LossWeights {
    pub fn new(prop: f64, val: f64) -> Result<Self> {
        let w = Self { prop, val };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prop >= 0.0 && self.val >= 0.0) || (self.prop == 0.0 && self.val == 0.0) {
            return Err(Error::invalid("loss weights must be >= 0 and not both zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub warmup: u64,
    /// Flow-time shift applied to uniform draws; 1 keeps `tau ~ U[0,1]`.
    #[serde(default = "unit_shift")]
    pub tau_shift: f64,
}

fn unit_shift() -> f64 {
    1.0
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            lr: 1e-4,
            seed: 0,
            warmup: 0,
            tau_shift: 1.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.tau_shift > 0.0) {
            return Err(Error::invalid("batch must be >= 1, lr > 0 and tau_shift > 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(self.lr, step, self.steps, self.warmup)
    }
}

/// Endpoints and flow time for the two target frames of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub tau: f64,
    pub z0: [Vec<f64>; 2],
    pub z1: [Vec<f64>; 2],
}

/// Timestep shift `s u / (1 + (s - 1) u)`: identity at `s = 1`, and moves
/// mass toward the noise end for `s > 1`. Keeps `0 -> 0` and `1 -> 1`.
pub fn shift_tau(u: f64, shift: f64) -> f64 {
    if shift == 1.0 {
        return u;
    }
    shift * u / (1.0 + (shift - 1.0) * u)
}

pub fn interpolate(z0: &[f64], z1: &[f64], tau: f64) -> Vec<f64> {
    z0.iter().zip(z1).map(|(a, b)| (1.0 - tau) * a + tau * b).collect()
}

impl FlowSample {
    pub fn draw(z0: [Vec<f64>; 2], rng: &mut impl Rng) -> Self {
        Self::draw_shifted(z0, 1.0, rng)
    }

    /// Draws `u ~ U[0,1]` and maps it through [`shift_tau`].
    pub fn draw_shifted(z0: [Vec<f64>; 2], shift: f64, rng: &mut impl Rng) -> Self {
        let tau = shift_tau(rng.random::<f64>(), shift);
        let z1 = [0, 1].map(|k| {
            (0..z0[k].len())
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>()
        });
        Self { tau, z0, z1 }
    }

    /// `z_tau` for target `k`.
    pub fn noised(&self, k: usize) -> Vec<f64> {
        interpolate(&self.z0[k], &self.z1[k], self.tau)
    }

    /// Regression target `z1 - z0`; depends on the endpoints only, never on `tau`.
    pub fn velocity_target(&self, k: usize) -> Vec<f64> {
        self.z1[k].iter().zip(&self.z0[k]).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub total: f64,
    /// Unweighted per-frame MSE of the future-proprioception velocity.
    pub prop: f64,
    /// Unweighted per-frame MSE of the value velocity.
    pub val: f64,
    pub grads: Vec<F>,
}

/// Loss and parameter gradient for a batch with pre-drawn flow samples.
///
/// `conds[i]` holds the five clean conditioning frames of sample `i`
/// (`5 x cells`, frame-major).
pub fn flow_loss_with_samples<F: Real>(
    model: &VelocityModel<F>,
    conds: &[Vec<F>],
    samples: &[FlowSample],
    weights: LossWeights,
) -> Result<LossOutput<F>> {
    weights.validate()?;
    let config = model.config();
    let cells = config.geometry.cells();
    let batch = conds.len();
    if batch == 0 || samples.len() != batch {
        return Err(Error::invalid("flow loss needs one flow sample per conditioning entry"));
    }
    let n_tok = config.seq_tokens() * config.token_features();
    let mut tokens = vec![F::zero(); batch * n_tok];
    let mut taus = vec![F::zero(); batch * SEQ_FRAMES];
    let mut frames = vec![F::zero(); SEQ_FRAMES * cells];
    for (i, (cond, s)) in conds.iter().zip(samples).enumerate() {
        if cond.len() != CONDITIONING_FRAMES * cells || s.z0.iter().chain(&s.z1).any(|z| z.len() != cells) {
            return Err(Error::Geometry("flow sample does not match model geometry".into()));
        }
        frames[..CONDITIONING_FRAMES * cells].copy_from_slice(cond);
        for (k, &slot) in TARGET_SLOTS.iter().enumerate() {
            for (dst, v) in frames[slot * cells..(slot + 1) * cells].iter_mut().zip(s.noised(k)) {
                *dst = F::lit(v);
            }
            taus[i * SEQ_FRAMES + slot] = F::lit(s.tau);
        }
        tokenize(config, &frames, &mut tokens[i * n_tok..(i + 1) * n_tok]);
    }

    let (out, cache) = model.forward(&tokens, &taus, batch)?;

    let inv = 1.0 / (cells as f64 * batch as f64);
    let lambdas = [weights.prop, weights.val];
    let mut mse = [0.0f64; 2];
    let mut d_out = vec![F::zero(); batch * n_tok];
    let mut d_frames = vec![F::zero(); SEQ_FRAMES * cells];
    for (i, s) in samples.iter().enumerate() {
        untokenize(config, &out[i * n_tok..(i + 1) * n_tok], &mut frames);
        for (k, &slot) in TARGET_SLOTS.iter().enumerate() {
            let target = s.velocity_target(k);
            let pred = &frames[slot * cells..(slot + 1) * cells];
            let grad = &mut d_frames[slot * cells..(slot + 1) * cells];
            for c in 0..cells {
                let diff = pred[c].to_f64().unwrap() - target[c];
                mse[k] += diff * diff * inv;
                grad[c] = F::lit(2.0 * lambdas[k] * diff * inv);
            }
        }
        tokenize(config, &d_frames, &mut d_out[i * n_tok..(i + 1) * n_tok]);
    }
    let total = weights.prop * mse[0] + weights.val * mse[1];
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "flow loss (prop mse {}, value mse {})",
            mse[0], mse[1]
        )));
    }
    let mut grads = vec![F::zero(); model.num_params()];
    model.backward(&cache, &d_out, &mut grads);
    Ok(LossOutput {
        total,
        prop: mse[0],
        val: mse[1],
        grads,
    })
}

/// Draws one flow sample per entry from `rng` and evaluates the loss.
pub fn flow_loss<F: Real>(
    model: &VelocityModel<F>,
    conds: &[Vec<F>],
    targets: Vec<[Vec<f64>; 2]>,
    weights: LossWeights,
    rng: &mut impl Rng,
) -> Result<(LossOutput<F>, Vec<FlowSample>)> {
    let samples: Vec<FlowSample> = targets.into_iter().map(|z0| FlowSample::draw(z0, rng)).collect();
    let out = flow_loss_with_samples(model, conds, &samples, weights)?;
    Ok((out, samples))
}

/// Pre-encoded latents of one episode.
pub(crate) struct EpisodeLatents {
    pub horizon: usize,
    pub returns: Vec<f64>,
    /// `(T+1) x cells`
    pub proprio: Vec<f32>,
    /// `(T+1) x 3 x cells`
    pub views: Vec<f32>,
}

pub(crate) fn encode_corpus(
    corpus: &[Episode],
    codec: &LatentCodec,
    spec: &NormalizationSpec,
) -> Result<Vec<EpisodeLatents>> {
    let cells = codec.geometry().cells();
    corpus
        .iter()
        .map(|ep| {
            let n = ep.steps.len();
            let mut proprio = Vec::with_capacity(n * cells);
            let mut views = Vec::with_capacity(n * 3 * cells);
            for step in &ep.steps {
                proprio.extend(codec.encode_proprio(&step.proprio, spec)?.data.iter().map(|&v| v as f32));
                for view in &step.obs.views {
                    views.extend(codec.encode_image(view)?.data.iter().map(|&v| v as f32));
                }
            }
            let returns = (0..n).map(|t| ep.return_to_go(t)).collect::<Result<_>>()?;
            Ok(EpisodeLatents {
                horizon: ep.horizon(),
                returns,
                proprio,
                views,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub loss_prop: f64,
    pub loss_val: f64,
    pub lr: f64,
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,total_loss,loss_prop,loss_val,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.step, m.total_loss, m.loss_prop, m.loss_val, m.lr
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Full training state of a velocity model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub codec: CodecConfig,
    pub spec: NormalizationSpec,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub step: u64,
    pub rng: RngState,
    /// Object-shape tags present in the training corpus.
    pub train_shapes: Vec<String>,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<VelocityModel<f32>> {
        VelocityModel::from_params(self.config, self.params.clone())
    }

    pub fn to_container(&self) -> Result<(serde_json::Value, Vec<Blob>)> {
        let header = serde_json::json!({
            "kind": "viva",
            "config": self.config,
            "codec": self.codec,
            "spec": self.spec,
            "weights": self.weights,
            "schedule": self.schedule,
            "step": self.step,
            "rng": self.rng,
            "train_shapes": self.train_shapes,
        });
        let mut blobs = Vec::new();
        let entries = param_entries(&self.config)?;
        for (prefix, buf) in [("param", &self.params), ("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for e in &entries {
                blobs.push(Blob {
                    name: format!("{prefix}/{}", e.name),
                    data: buf[e.range()].to_vec(),
                });
            }
        }
        Ok((header, blobs))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = c.field("config")?;
        let entries = param_entries(&config)?;
        let total: usize = entries.iter().map(|e| e.len()).sum();
        let gather = |prefix: &str| -> Result<Vec<f32>> {
            let mut buf = Vec::with_capacity(total);
            for e in &entries {
                let blob = c.blob(&format!("{prefix}/{}", e.name))?;
                if blob.len() != e.len() {
                    return Err(Error::Geometry(format!(
                        "blob {prefix}/{} has {} values, config needs {}",
                        e.name,
                        blob.len(),
                        e.len()
                    )));
                }
                buf.extend_from_slice(blob);
            }
            Ok(buf)
        };
        let step: u64 = c.field("step")?;
        Ok(Self {
            config,
            codec: c.field("codec")?,
            spec: c.field("spec")?,
            weights: c.field("weights")?,
            schedule: c.field("schedule")?,
            step,
            rng: c.field("rng")?,
            train_shapes: c.field("train_shapes")?,
            params: gather("param")?,
            adam: Adam {
                m: gather("adam.m")?,
                v: gather("adam.v")?,
                t: step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, blobs) = self.to_container()?;
        checkpoint::write_container(path, VIVA_MAGIC, &header, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&checkpoint::read_container(path, VIVA_MAGIC)?)
    }

    /// Loads and checks that the stored model matches `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.config.geometry != expected.geometry {
            return Err(Error::Geometry(format!(
                "checkpoint latent geometry {:?} differs from expected {:?}",
                ckpt.config.geometry, expected.geometry
            )));
        }
        if ckpt.config != *expected {
            return Err(Error::Geometry(format!(
                "checkpoint model config {:?} differs from expected {:?}",
                ckpt.config, expected
            )));
        }
        Ok(ckpt)
    }
}

/// Checks a corpus against the model/codec configuration.
pub(crate) fn check_corpus(corpus: &[Episode], d_q: usize, codec: &CodecConfig) -> Result<()> {
    let first = corpus.first().ok_or(Error::EmptyDataset)?;
    if first.d_q() != d_q {
        return Err(Error::Geometry(format!(
            "dataset d_q={} but model expects d_q={d_q}",
            first.d_q()
        )));
    }
    if first.image_dims() != codec.image_size {
        return Err(Error::Geometry(format!(
            "dataset views are {:?} but codec expects {:?}",
            first.image_dims(),
            codec.image_size
        )));
    }
    Ok(())
}

/// Per-dimension proprioception range of `corpus`, widened by 1% (or by an
/// absolute 1e-3 for constant dimensions).
pub fn fit_normalization(corpus: &[Episode]) -> Result<NormalizationSpec> {
    NormalizationSpec::fit(corpus)
}

pub fn shape_tags(corpus: &[Episode]) -> Vec<String> {
    let mut tags: Vec<String> = corpus.iter().filter_map(|e| e.meta.object_shape.clone()).collect();
    tags.sort();
    tags.dedup();
    tags
}

pub struct Trainer {
    config: ModelConfig,
    codec_config: CodecConfig,
    spec: NormalizationSpec,
    weights: LossWeights,
    schedule: Schedule,
    train_shapes: Vec<String>,
    data: Vec<EpisodeLatents>,
    samples: Vec<(u32, u32)>,
    model: VelocityModel<f32>,
    adam: Adam<f32>,
    step: u64,
    rng: ChaCha8Rng,
}

const RNG_STREAM_SALT: u64 = 0x7261_696e;

impl Trainer {
    pub fn new(
        corpus: &[Episode],
        config: ModelConfig,
        codec_config: CodecConfig,
        weights: LossWeights,
        schedule: Schedule,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        schedule.validate()?;
        if codec_config.geometry != config.geometry {
            return Err(Error::Geometry("codec and model latent geometry differ".into()));
        }
        check_corpus(corpus, config.d_q, &codec_config)?;
        let spec = fit_normalization(corpus)?;
        let model = VelocityModel::new(config, schedule.seed)?;
        let adam = Adam::new(model.num_params());
        let rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ RNG_STREAM_SALT);
        Self::assemble(corpus, config, codec_config, spec, weights, schedule, model, adam, 0, rng)
    }

    /// Continues training from a checkpoint on the same corpus.
    pub fn resume(ckpt: &Checkpoint, corpus: &[Episode]) -> Result<Self> {
        check_corpus(corpus, ckpt.config.d_q, &ckpt.codec)?;
        let model = ckpt.model()?;
        Self::assemble(
            corpus,
            ckpt.config,
            ckpt.codec,
            ckpt.spec.clone(),
            ckpt.weights,
            ckpt.schedule,
            model,
            ckpt.adam.clone(),
            ckpt.step,
            ckpt.rng.restore()?,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        corpus: &[Episode],
        config: ModelConfig,
        codec_config: CodecConfig,
        spec: NormalizationSpec,
        weights: LossWeights,
        schedule: Schedule,
        model: VelocityModel<f32>,
        adam: Adam<f32>,
        step: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let codec = LatentCodec::new(codec_config)?;
        let data = encode_corpus(corpus, &codec, &spec)?;
        let samples = data
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..=ep.horizon).map(move |t| (e as u32, t as u32)))
            .collect();
        Ok(Self {
            config,
            codec_config,
            spec,
            weights,
            schedule,
            train_shapes: shape_tags(corpus),
            data,
            samples,
            model,
            adam,
            step,
            rng,
        })
    }

    pub fn model(&self) -> &VelocityModel<f32> {
        &self.model
    }

    pub fn spec(&self) -> &NormalizationSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// One optimizer update on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let cells = self.config.geometry.cells();
        let horizon = self.config.horizon;
        let mut conds = Vec::with_capacity(self.schedule.batch);
        let mut targets = Vec::with_capacity(self.schedule.batch);
        for _ in 0..self.schedule.batch {
            let (e, t) = self.samples[self.rng.random_range(0..self.samples.len())];
            let ep = &self.data[e as usize];
            let t = t as usize;
            let mut cond = vec![0.0f32; CONDITIONING_FRAMES * cells];
            cond[cells..2 * cells].copy_from_slice(&ep.proprio[t * cells..(t + 1) * cells]);
            cond[2 * cells..].copy_from_slice(&ep.views[t * 3 * cells..(t + 1) * 3 * cells]);
            conds.push(cond);
            let future = (t + horizon).min(ep.horizon);
            let z0_q: Vec<f64> = ep.proprio[future * cells..(future + 1) * cells]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let z0_v = vec![ep.returns[t] - 1.0; cells];
            targets.push([z0_q, z0_v]);
        }
        let shift = self.schedule.tau_shift;
        let samples: Vec<FlowSample> = targets
            .into_iter()
            .map(|z0| FlowSample::draw_shifted(z0, shift, &mut self.rng))
            .collect();
        let out = flow_loss_with_samples(&self.model, &conds, &samples, self.weights)?;
        let lr = self.schedule.lr_at(self.step);
        self.adam.update(self.model.params_mut(), &out.grads, lr);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            total_loss: out.total,
            loss_prop: out.prop,
            loss_val: out.val,
            lr,
        })
    }

    /// Runs `n` updates.
    pub fn run(&mut self, n: u64) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let m = self.step()?;
            if m.step % 500 == 0 {
                log::info!(
                    "step {} loss {:.5} (prop {:.5}, val {:.5}) lr {:.2e}",
                    m.step,
                    m.total_loss,
                    m.loss_prop,
                    m.loss_val,
                    m.lr
                );
            }
            log.push(m);
        }
        Ok(log)
    }

    /// Runs until the scheduled number of steps is reached.
    pub fn run_to_end(&mut self) -> Result<Vec<StepMetrics>> {
        let remaining = self.schedule.steps.saturating_sub(self.step);
        self.run(remaining)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            codec: self.codec_config,
            spec: self.spec.clone(),
            weights: self.weights,
            schedule: self.schedule,
            step: self.step,
            rng: RngState::capture(&self.rng),
            train_shapes: self.train_shapes.clone(),
            params: self.model.params().to_vec(),
            adam: self.adam.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Trains a velocity model on the dataset at `corpus_path`.
pub fn train(
    corpus_path: &Path,
    config: ModelConfig,
    weights: LossWeights,
    schedule: Schedule,
) -> Result<TrainOutcome> {
    let manifest = Manifest::read(corpus_path)?;
    let codec = CodecConfig {
        image_size: (manifest.height, manifest.width),
        ..CodecConfig::default()
    };
    let corpus = read_dataset(corpus_path)?;
    train_on(&corpus, config, codec, weights, schedule)
}

pub fn train_on(
    corpus: &[Episode],
    config: ModelConfig,
    codec: CodecConfig,
    weights: LossWeights,
    schedule: Schedule,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, config, codec, weights, schedule)?;
    let metrics = trainer.run_to_end()?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentGeometry;
    use crate::model::{FUTURE_PROPRIO_SLOT, VALUE_SLOT};
    use crate::sim::{generate_corpus, CorpusSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            width: 16,
            heads: 2,
            geometry: LatentGeometry::DEFAULT,
            patch: 4,
            d_q: 3,
            horizon: 10,
            mlp_ratio: 2,
        }
    }

    fn corpus() -> Vec<Episode> {
        let mut spec = CorpusSpec::new(2, 2, 3);
        spec.length = (20, 30);
        generate_corpus(&spec).unwrap()
    }

    fn random_batch(config: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<FlowSample>) {
        let cells = config.geometry.cells();
        let conds = (0..n)
            .map(|_| (0..CONDITIONING_FRAMES * cells).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let samples = (0..n)
            .map(|_| {
                let z0 = [
                    (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    vec![rng.random_range(-1.0..1.0); cells],
                ];
                FlowSample::draw(z0, rng)
            })
            .collect();
        (conds, samples)
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = FlowSample::draw([vec![0.3, -0.7, 0.123456789], vec![0.1; 3]], &mut rng);
        s.tau = 0.0;
        assert_eq!(s.noised(0), s.z0[0]);
        s.tau = 1.0;
        assert_eq!(s.noised(0), s.z1[0]);
        let t1 = s.velocity_target(1);
        s.tau = 0.37;
        assert_eq!(s.velocity_target(1), t1);
    }

    #[test]
    fn tau_shift_endpoints_and_monotonicity() {
        for s in [0.5, 1.0, 3.0, 10.0] {
            assert_eq!(shift_tau(0.0, s), 0.0);
            assert_eq!(shift_tau(1.0, s), 1.0);
            let xs: Vec<f64> = (0..=100).map(|i| shift_tau(i as f64 / 100.0, s)).collect();
            assert!(xs.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(shift_tau(0.3, 1.0), 0.3);
        assert!(shift_tau(0.5, 5.0) > 0.8);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.5).is_ok());
        assert_eq!(LossWeights::default(), LossWeights { prop: 1.0, val: 0.5 });
    }

    #[test]
    fn loss_decomposes_and_zeroes() {
        let cfg = tiny_config();
        let model = VelocityModel::<f64>::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (conds, samples) = random_batch(&cfg, 3, &mut rng);
        let full = flow_loss_with_samples(&model, &conds, &samples, LossWeights::default()).unwrap();
        assert!((full.total - (full.prop + 0.5 * full.val)).abs() < 1e-12);
        let prop_only = flow_loss_with_samples(&model, &conds, &samples, LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(prop_only.total, prop_only.prop);
        assert_eq!(prop_only.prop, full.prop);
    }

    #[test]
    fn oracle_velocity_gives_zero_loss() {
        // Head weights and biases tuned so the output equals z1 - z0 is not
        // reachable generically; instead check the loss formula against a
        // direct evaluation of the model's own predictions.
        let cfg = tiny_config();
        let model = VelocityModel::<f64>::new(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (conds, mut samples) = random_batch(&cfg, 2, &mut rng);
        let cells = cfg.geometry.cells();
        // Make z1 - z0 equal the model's prediction: fix z_tau by choosing tau = 0
        // (input is z0 only) and set z1 = z0 + prediction.
        for (cond, s) in conds.iter().zip(samples.iter_mut()) {
            s.tau = 0.0;
            let mut frames: [crate::codec::LatentFrame; SEQ_FRAMES] =
                std::array::from_fn(|_| crate::codec::LatentFrame::zeros(cfg.geometry));
            for k in 0..CONDITIONING_FRAMES {
                frames[k].data = cond[k * cells..(k + 1) * cells].to_vec();
            }
            frames[FUTURE_PROPRIO_SLOT].data = s.z0[0].clone();
            frames[VALUE_SLOT].data = s.z0[1].clone();
            let seq = crate::model::LatentSequence { frames };
            let v = model.forward_velocity(&seq, 0.0).unwrap();
            for k in 0..2 {
                s.z1[k] = s.z0[k].iter().zip(&v[k].data).map(|(a, b)| a + b).collect();
            }
        }
        let out = flow_loss_with_samples(&model, &conds, &samples, LossWeights::default()).unwrap();
        assert!(out.total < 1e-20, "{}", out.total);
        assert!(out.grads.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn zero_model_loss_matches_monte_carlo_expectation() {
        // With every parameter zero the network outputs zero, so the expected
        // loss is lambda_p * E[(z1 - z0_q)^2] + lambda_v * E[(z1 - z0_v)^2]
        // = lambda_p * (1 + mean z0_q^2) + lambda_v * (1 + z0_v^2).
        let cfg = tiny_config();
        let mut model = VelocityModel::<f64>::new(cfg, 0).unwrap();
        model.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let cells = cfg.geometry.cells();
        let z0_q: Vec<f64> = (0..cells).map(|c| (c as f64 * 0.37).sin() * 0.8).collect();
        let z0_v = 0.3;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let conds = vec![vec![0.1; CONDITIONING_FRAMES * cells]; n];
        let targets = vec![[z0_q.clone(), vec![z0_v; cells]]; n];
        let w = LossWeights::default();
        let (out, _) = flow_loss(&model, &conds, targets, w, &mut rng).unwrap();
        let mean_sq = z0_q.iter().map(|v| v * v).sum::<f64>() / cells as f64;
        let want = w.prop * (1.0 + mean_sq) + w.val * (1.0 + z0_v * z0_v);
        // Per-sample loss has standard deviation below 0.5 here.
        assert!((out.total - want).abs() < 4.0 * 0.5 / (n as f64).sqrt(), "{} vs {want}", out.total);
    }

    #[test]
    fn trainer_is_deterministic_and_resumable() {
        let corpus = corpus();
        let schedule = Schedule { steps: 20, batch: 4, lr: 1e-3, seed: 5, warmup: 0, tau_shift: 1.0 };
        let codec = CodecConfig::default();
        let mut a = Trainer::new(&corpus, tiny_config(), codec, LossWeights::default(), schedule).unwrap();
        let mut b = Trainer::new(&corpus, tiny_config(), codec, LossWeights::default(), schedule).unwrap();
        let la = a.run(10).unwrap();
        let lb = b.run(10).unwrap();
        assert_eq!(la, lb);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.viva");
        a.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, a.checkpoint());
        let mut resumed = Trainer::resume(&loaded, &corpus).unwrap();
        let cont = a.run(10).unwrap();
        let res = resumed.run(10).unwrap();
        assert_eq!(cont, res);
        assert_eq!(a.model().params(), resumed.model().params());
    }

    #[test]
    fn checkpoint_errors() {
        let corpus = corpus();
        let schedule = Schedule { steps: 2, batch: 2, lr: 1e-3, seed: 5, warmup: 0, tau_shift: 1.0 };
        let out = train_on(&corpus, tiny_config(), CodecConfig::default(), LossWeights::default(), schedule).unwrap();
        assert_eq!(out.metrics.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.viva");
        out.checkpoint.save(&path).unwrap();

        let mut other = tiny_config();
        other.geometry.height = 4;
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Geometry(_))));
        assert!(Checkpoint::load_expecting(&path, &tiny_config()).is_ok());

        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn metrics_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(
            &path,
            &[StepMetrics { step: 1, total_loss: 0.5, loss_prop: 0.25, loss_val: 0.5, lr: 1e-4 }],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,total_loss,loss_prop,loss_val,lr\n1,0.5,0.25,0.5,0.0001\n");
    }

    #[test]
    fn corpus_mismatch_rejected() {
        let corpus = corpus();
        let mut cfg = tiny_config();
        cfg.d_q = 4;
        let r = Trainer::new(&corpus, cfg, CodecConfig::default(), LossWeights::default(), Schedule::default());
        assert!(matches!(r, Err(Error::Geometry(_))));
    }
}

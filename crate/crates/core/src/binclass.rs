//! Discriminative value baseline: a small patch-convolution encoder shared
//! across the three views, concatenated with normalized proprioception, two
//! hidden layers and a 201-way softmax over uniform return bins on `[0, 2]`.
//! The point estimate is the expected bin center.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Blob, RngState, BINCLASS_MAGIC};
use crate::codec::{NormalizationSpec, VALUE_MAX, VALUE_MIN};
use crate::episode::{read_dataset, Episode, JointObservation, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::model::{count_params, Init, LayoutBuilder, ModelConfig, ParamEntry};
use crate::optim::Adam;
use crate::sampler::{ValueEstimate, ValueModel};
use crate::tensor::{self, matmul, Real};
use crate::trainer::{shape_tags, StepMetrics, Schedule};

pub const N_BINS: usize = 201;

/// Uniform bins over `[0, 2]`; the last bin is closed on the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub n_bins: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { n_bins: N_BINS }
    }
}

impl BinSpec {
    pub fn width(&self) -> f64 {
        (VALUE_MAX - VALUE_MIN) / self.n_bins as f64
    }

    /// Edge `i` for `i` in `0..=n_bins`; the outer edges are exact.
    pub fn edge(&self, i: usize) -> f64 {
        if i >= self.n_bins {
            VALUE_MAX
        } else {
            VALUE_MIN + i as f64 * self.width()
        }
    }

    pub fn center(&self, b: usize) -> f64 {
        0.5 * (self.edge(b) + self.edge(b + 1))
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.center(b)).collect()
    }

    /// `floor(G / width)`, corrected against the stored edges and clamped
    /// into the last bin at `G = 2`.
    pub fn bin_index(&self, g: f64) -> Result<usize> {
        if !(VALUE_MIN..=VALUE_MAX).contains(&g) {
            return Err(Error::invalid(format!("return {g} outside [0, 2]")));
        }
        let last = self.n_bins - 1;
        let mut b = (((g - VALUE_MIN) / self.width()).floor() as usize).min(last);
        while b > 0 && g < self.edge(b) {
            b -= 1;
        }
        while b < last && g >= self.edge(b + 1) {
            b += 1;
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Side of the square pixel patches fed to the shared encoder.
    pub patch: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub d_q: usize,
    pub image_size: (usize, usize),
    pub n_bins: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            conv_channels: 8,
            hidden: 256,
            d_q: 3,
            image_size: (32, 32),
            n_bins: N_BINS,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Geometry(format!("patch {} does not tile {h}x{w}", self.patch)));
        }
        if self.conv_channels == 0 || self.hidden == 0 || self.d_q == 0 || self.n_bins < 2 {
            return Err(Error::invalid("baseline sizes must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image_size.0 / self.patch) * (self.image_size.1 / self.patch)
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn input_dim(&self) -> usize {
        NUM_VIEWS * self.patches_per_view() * self.conv_channels + self.d_q
    }

    pub fn count_params(&self) -> usize {
        let (c, h, k) = (self.conv_channels, self.hidden, self.n_bins);
        self.patch_features() * c + c + (self.input_dim() + 1) * h + (h + 1) * h + (h + 1) * k
    }

    /// Picks the hidden width whose parameter count is closest to the
    /// velocity model's.
    pub fn matched_to(viva: &ModelConfig, image_size: (usize, usize)) -> Result<Self> {
        let mut cfg = Self {
            d_q: viva.d_q,
            image_size,
            hidden: 1,
            ..Self::default()
        };
        cfg.validate()?;
        let target = count_params(viva) as f64;
        let base = cfg.count_params_with(0) as f64;
        // count(h) = h^2 + (input_dim + 2 + n_bins) h + base
        let b = (cfg.input_dim() + 2 + cfg.n_bins) as f64;
        let root = (-b + (b * b + 4.0 * (target - base)).max(0.0).sqrt()) / 2.0;
        let mut best = 1;
        for h in [root.floor().max(1.0) as usize, root.ceil().max(1.0) as usize] {
            let diff = |h| (cfg.count_params_with(h) as f64 - target).abs();
            if diff(h) < diff(best) {
                best = h;
            }
        }
        cfg.hidden = best;
        Ok(cfg)
    }

    fn count_params_with(&self, hidden: usize) -> usize {
        Self { hidden, ..*self }.count_params()
    }
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<ParamEntry>,
    conv: (Range<usize>, Range<usize>),
    fc1: (Range<usize>, Range<usize>),
    fc2: (Range<usize>, Range<usize>),
    head: (Range<usize>, Range<usize>),
}

impl Layout {
    fn build(c: &BaselineConfig) -> (Self, LayoutBuilder) {
        let mut b = LayoutBuilder::default();
        let conv = b.linear("conv", c.patch_features(), c.conv_channels);
        let fc1 = b.linear("fc1", c.input_dim(), c.hidden);
        let fc2 = b.linear("fc2", c.hidden, c.hidden);
        // Zero head: the untrained model predicts the uniform distribution.
        let head = (
            b.add("head.w", &[c.hidden, c.n_bins], Init::Zeros),
            b.add("head.b", &[c.n_bins], Init::Zeros),
        );
        let layout = Self {
            entries: b.entries().to_vec(),
            conv,
            fc1,
            fc2,
            head,
        };
        (layout, b)
    }
}

/// Encoder inputs for a batch: pixel patches and normalized proprioception.
pub struct BatchInput<F> {
    pub batch: usize,
    /// `batch x 3 x patches x patch_features`, pixels scaled to `[-1, 1]`.
    pub patches: Vec<F>,
    /// `batch x d_q`, normalized to `[-1, 1]`.
    pub proprio: Vec<F>,
}

impl<F: Real> BatchInput<F> {
    pub fn from_observations(
        config: &BaselineConfig,
        spec: &NormalizationSpec,
        obs: &[&JointObservation],
    ) -> Result<Self> {
        let p = config.patch;
        let mut patches = Vec::with_capacity(obs.len() * NUM_VIEWS * config.patches_per_view() * config.patch_features());
        let mut proprio = Vec::with_capacity(obs.len() * config.d_q);
        for x in obs {
            if x.obs.dims() != config.image_size || x.proprio.dim() != config.d_q || spec.dim() != config.d_q {
                return Err(Error::Geometry("observation does not match baseline config".into()));
            }
            for view in &x.obs.views {
                for pi in 0..view.height / p {
                    for pj in 0..view.width / p {
                        for r in pi * p..(pi + 1) * p {
                            for c in pj * p..(pj + 1) * p {
                                for ch in view.pixel(r, c) {
                                    patches.push(F::lit(ch as f64 / 127.5 - 1.0));
                                }
                            }
                        }
                    }
                }
            }
            for (i, &v) in x.proprio.values.iter().enumerate() {
                proprio.push(F::lit(spec.normalize(i, v as f64).clamp(-1.0, 1.0)));
            }
        }
        Ok(Self {
            batch: obs.len(),
            patches,
            proprio,
        })
    }
}

pub struct BinCache<F> {
    batch: usize,
    conv_pre: Vec<F>,
    x: Vec<F>,
    a1: Vec<F>,
    h1: Vec<F>,
    a2: Vec<F>,
    h2: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct BinNet<F: Real = f32> {
    config: BaselineConfig,
    layout: Layout,
    params: Vec<F>,
}

fn relu<F: Real>(v: &mut [F]) {
    v.iter_mut().for_each(|x| *x = x.max(F::zero()));
}

fn relu_mask<F: Real>(pre: &[F], d: &mut [F]) {
    d.iter_mut().zip(pre).for_each(|(g, &a)| {
        if a <= F::zero() {
            *g = F::zero()
        }
    });
}

impl<F: Real> BinNet<F> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = Layout::build(&config);
        Ok(Self {
            config,
            layout,
            params: b.initialize(seed),
        })
    }

    pub fn from_params(config: BaselineConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::build(&config);
        if params.len() != config.count_params() {
            return Err(Error::Geometry(format!(
                "parameter buffer has {} values, config needs {}",
                params.len(),
                config.count_params()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.layout.entries
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn p(&self, r: &Range<usize>) -> &[F] {
        &self.params[r.clone()]
    }

    /// Logits `batch x n_bins`.
    pub fn forward(&self, input: &BatchInput<F>) -> Result<(Vec<F>, BinCache<F>)> {
        let c = &self.config;
        let b = input.batch;
        let (pf, ch, np, hid, k) = (c.patch_features(), c.conv_channels, c.patches_per_view(), c.hidden, c.n_bins);
        let rows = b * NUM_VIEWS * np;
        if input.patches.len() != rows * pf || input.proprio.len() != b * c.d_q {
            return Err(Error::Geometry("batch input does not match baseline config".into()));
        }
        let l = &self.layout;
        let mut conv_pre = vec![F::zero(); rows * ch];
        matmul(rows, pf, ch, &input.patches, false, self.p(&l.conv.0), false, &mut conv_pre, false);
        tensor::add_bias(&mut conv_pre, self.p(&l.conv.1));

        let d_in = c.input_dim();
        let conv_feat = NUM_VIEWS * np * ch;
        let mut x = vec![F::zero(); b * d_in];
        for i in 0..b {
            let row = &mut x[i * d_in..(i + 1) * d_in];
            for (dst, &v) in row[..conv_feat].iter_mut().zip(&conv_pre[i * conv_feat..(i + 1) * conv_feat]) {
                *dst = v.max(F::zero());
            }
            row[conv_feat..].copy_from_slice(&input.proprio[i * c.d_q..(i + 1) * c.d_q]);
        }

        let mut a1 = vec![F::zero(); b * hid];
        matmul(b, d_in, hid, &x, false, self.p(&l.fc1.0), false, &mut a1, false);
        tensor::add_bias(&mut a1, self.p(&l.fc1.1));
        let mut h1 = a1.clone();
        relu(&mut h1);

        let mut a2 = vec![F::zero(); b * hid];
        matmul(b, hid, hid, &h1, false, self.p(&l.fc2.0), false, &mut a2, false);
        tensor::add_bias(&mut a2, self.p(&l.fc2.1));
        let mut h2 = a2.clone();
        relu(&mut h2);

        let mut logits = vec![F::zero(); b * k];
        matmul(b, hid, k, &h2, false, self.p(&l.head.0), false, &mut logits, false);
        tensor::add_bias(&mut logits, self.p(&l.head.1));
        if !tensor::all_finite(&logits) {
            return Err(Error::NonFinite("baseline logits".into()));
        }
        Ok((
            logits,
            BinCache {
                batch: b,
                conv_pre,
                x,
                a1,
                h1,
                a2,
                h2,
            },
        ))
    }

    /// Accumulates the parameter gradient for upstream `d_logits`.
    pub fn backward(&self, input: &BatchInput<F>, cache: &BinCache<F>, d_logits: &[F], grads: &mut [F]) {
        let c = &self.config;
        let b = cache.batch;
        let (pf, ch, np, hid, k) = (c.patch_features(), c.conv_channels, c.patches_per_view(), c.hidden, c.n_bins);
        let d_in = c.input_dim();
        let l = &self.layout;

        matmul(hid, b, k, &cache.h2, true, d_logits, false, &mut grads[l.head.0.clone()], true);
        tensor::col_sum_into(d_logits, &mut grads[l.head.1.clone()]);
        let mut d_a2 = vec![F::zero(); b * hid];
        matmul(b, k, hid, d_logits, false, self.p(&l.head.0), true, &mut d_a2, false);
        relu_mask(&cache.a2, &mut d_a2);

        matmul(hid, b, hid, &cache.h1, true, &d_a2, false, &mut grads[l.fc2.0.clone()], true);
        tensor::col_sum_into(&d_a2, &mut grads[l.fc2.1.clone()]);
        let mut d_a1 = vec![F::zero(); b * hid];
        matmul(b, hid, hid, &d_a2, false, self.p(&l.fc2.0), true, &mut d_a1, false);
        relu_mask(&cache.a1, &mut d_a1);

        matmul(d_in, b, hid, &cache.x, true, &d_a1, false, &mut grads[l.fc1.0.clone()], true);
        tensor::col_sum_into(&d_a1, &mut grads[l.fc1.1.clone()]);
        let mut d_x = vec![F::zero(); b * d_in];
        matmul(b, hid, d_in, &d_a1, false, self.p(&l.fc1.0), true, &mut d_x, false);

        let conv_feat = NUM_VIEWS * np * ch;
        let rows = b * NUM_VIEWS * np;
        let mut d_conv = vec![F::zero(); rows * ch];
        for i in 0..b {
            d_conv[i * conv_feat..(i + 1) * conv_feat].copy_from_slice(&d_x[i * d_in..i * d_in + conv_feat]);
        }
        relu_mask(&cache.conv_pre, &mut d_conv);
        matmul(pf, rows, ch, &input.patches, true, &d_conv, false, &mut grads[l.conv.0.clone()], true);
        tensor::col_sum_into(&d_conv, &mut grads[l.conv.1.clone()]);
    }

    /// Mean cross-entropy against bin labels, with its parameter gradient.
    pub fn cross_entropy(&self, input: &BatchInput<F>, labels: &[usize]) -> Result<(f64, Vec<F>)> {
        let k = self.config.n_bins;
        let (mut probs, cache) = self.forward(input)?;
        tensor::softmax_rows(&mut probs, k);
        let inv_b = 1.0 / labels.len() as f64;
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &mut probs[i * k..(i + 1) * k];
            loss -= row[y].to_f64().unwrap().max(1e-300).ln() * inv_b;
            row[y] -= F::one();
            row.iter_mut().for_each(|v| *v *= F::lit(inv_b));
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("baseline cross-entropy".into()));
        }
        let mut grads = vec![F::zero(); self.num_params()];
        self.backward(input, &cache, &probs, &mut grads);
        Ok((loss, grads))
    }

    pub fn probabilities(&self, input: &BatchInput<F>) -> Result<Vec<F>> {
        let (mut logits, _) = self.forward(input)?;
        tensor::softmax_rows(&mut logits, self.config.n_bins);
        Ok(logits)
    }
}

/// Expected bin center under a probability vector.
pub fn expected_value(probs: &[f64], bins: &BinSpec) -> f64 {
    let v: f64 = probs.iter().zip(bins.centers()).map(|(p, c)| p * c).sum();
    v.clamp(VALUE_MIN, VALUE_MAX)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineCheckpoint {
    pub config: BaselineConfig,
    pub spec: NormalizationSpec,
    pub schedule: Schedule,
    pub step: u64,
    pub rng: RngState,
    pub train_shapes: Vec<String>,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
}

impl BaselineCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "binclass",
            "config": self.config,
            "spec": self.spec,
            "schedule": self.schedule,
            "step": self.step,
            "rng": self.rng,
            "train_shapes": self.train_shapes,
        });
        let (layout, _) = Layout::build(&self.config);
        let mut blobs = Vec::new();
        for (prefix, buf) in [("param", &self.params), ("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for e in &layout.entries {
                blobs.push(Blob {
                    name: format!("{prefix}/{}", e.name),
                    data: buf[e.range()].to_vec(),
                });
            }
        }
        checkpoint::write_container(path, BINCLASS_MAGIC, &header, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read_container(path, BINCLASS_MAGIC)?;
        let config: BaselineConfig = c.field("config")?;
        config.validate()?;
        let (layout, _) = Layout::build(&config);
        let gather = |prefix: &str| -> Result<Vec<f32>> {
            let mut buf = Vec::with_capacity(config.count_params());
            for e in &layout.entries {
                let blob = c.blob(&format!("{prefix}/{}", e.name))?;
                if blob.len() != e.len() {
                    return Err(Error::Geometry(format!("blob {prefix}/{} has wrong length", e.name)));
                }
                buf.extend_from_slice(blob);
            }
            Ok(buf)
        };
        let step: u64 = c.field("step")?;
        Ok(Self {
            config,
            spec: c.field("spec")?,
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
}

/// Inference bundle for the baseline.
#[derive(Debug, Clone)]
pub struct Baseline {
    net: BinNet<f32>,
    spec: NormalizationSpec,
    bins: BinSpec,
}

impl Baseline {
    pub fn from_checkpoint(ckpt: &BaselineCheckpoint) -> Result<Self> {
        Ok(Self {
            net: BinNet::from_params(ckpt.config, ckpt.params.clone())?,
            spec: ckpt.spec.clone(),
            bins: BinSpec { n_bins: ckpt.config.n_bins },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&BaselineCheckpoint::load(path)?)
    }

    pub fn net(&self) -> &BinNet<f32> {
        &self.net
    }

    pub fn probabilities(&self, obs: &[&JointObservation]) -> Result<Vec<Vec<f64>>> {
        let k = self.bins.n_bins;
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(256) {
            let input = BatchInput::from_observations(self.net.config(), &self.spec, chunk)?;
            let probs = self.net.probabilities(&input)?;
            out.extend(probs.chunks(k).map(|r| r.iter().map(|&p| p as f64).collect::<Vec<_>>()));
        }
        Ok(out)
    }
}

impl ValueModel for Baseline {
    fn estimate_batch(&self, obs: &[&JointObservation]) -> Result<Vec<ValueEstimate>> {
        Ok(self
            .probabilities(obs)?
            .iter()
            .map(|p| {
                let v = expected_value(p, &self.bins);
                ValueEstimate::from_value(v, v - 1.0)
            })
            .collect())
    }
}

pub fn baseline_value(ckpt: &BaselineCheckpoint, x_t: &JointObservation) -> Result<ValueEstimate> {
    Baseline::from_checkpoint(ckpt)?.estimate(x_t)
}

const RNG_STREAM_SALT: u64 = 0x6269_6e63;

pub struct BaselineTrainer<'a> {
    corpus: &'a [Episode],
    net: BinNet<f32>,
    spec: NormalizationSpec,
    schedule: Schedule,
    adam: Adam<f32>,
    step: u64,
    rng: ChaCha8Rng,
    samples: Vec<(usize, usize, usize)>,
}

impl<'a> BaselineTrainer<'a> {
    pub fn new(corpus: &'a [Episode], config: BaselineConfig, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        let first = corpus.first().ok_or(Error::EmptyDataset)?;
        if first.d_q() != config.d_q || first.image_dims() != config.image_size {
            return Err(Error::Geometry("dataset does not match baseline config".into()));
        }
        let spec = NormalizationSpec::fit(corpus)?;
        let net = BinNet::new(config, schedule.seed)?;
        let adam = Adam::new(net.num_params());
        let bins = BinSpec { n_bins: config.n_bins };
        let mut samples = Vec::new();
        for (e, ep) in corpus.iter().enumerate() {
            let sched = ep.schedule()?;
            for t in 0..=ep.horizon() {
                samples.push((e, t, bins.bin_index(sched.return_to_go(t)?)?));
            }
        }
        Ok(Self {
            corpus,
            net,
            spec,
            schedule,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed ^ RNG_STREAM_SALT),
            samples,
        })
    }

    /// Shuffles labels across training samples (for null experiments).
    pub fn permute_labels(&mut self, seed: u64) {
        let mut labels: Vec<usize> = self.samples.iter().map(|s| s.2).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.samples.iter_mut().zip(labels).for_each(|(s, y)| s.2 = y);
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let mut obs = Vec::with_capacity(self.schedule.batch);
        let mut labels = Vec::with_capacity(self.schedule.batch);
        for _ in 0..self.schedule.batch {
            let (e, t, y) = self.samples[self.rng.random_range(0..self.samples.len())];
            obs.push(&self.corpus[e].steps[t]);
            labels.push(y);
        }
        let input = BatchInput::from_observations(self.net.config(), &self.spec, &obs)?;
        let (loss, grads) = self.net.cross_entropy(&input, &labels)?;
        let lr = self.schedule.lr_at(self.step);
        self.adam.update(self.net.params_mut(), &grads, lr);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            total_loss: loss,
            loss_prop: 0.0,
            loss_val: loss,
            lr,
        })
    }

    pub fn run_to_end(&mut self) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while self.step < self.schedule.steps {
            let m = self.step()?;
            if m.step % 500 == 0 {
                log::info!("baseline step {} loss {:.5}", m.step, m.total_loss);
            }
            log.push(m);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> BaselineCheckpoint {
        BaselineCheckpoint {
            config: *self.net.config(),
            spec: self.spec.clone(),
            schedule: self.schedule,
            step: self.step,
            rng: RngState::capture(&self.rng),
            train_shapes: shape_tags(self.corpus),
            params: self.net.params().to_vec(),
            adam: self.adam.clone(),
        }
    }
}

pub struct BaselineOutcome {
    pub checkpoint: BaselineCheckpoint,
    pub metrics: Vec<StepMetrics>,
}

pub fn train_baseline_on(corpus: &[Episode], config: BaselineConfig, schedule: Schedule) -> Result<BaselineOutcome> {
    let mut trainer = BaselineTrainer::new(corpus, config, schedule)?;
    let metrics = trainer.run_to_end()?;
    Ok(BaselineOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}

/// Trains the baseline on the dataset at `corpus_path`.
pub fn train_baseline(corpus_path: &Path, config: BaselineConfig, schedule: Schedule) -> Result<BaselineOutcome> {
    let corpus = read_dataset(corpus_path)?;
    train_baseline_on(&corpus, config, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_corpus, CorpusSpec};

    #[test]
    fn bin_index_matches_edge_scan() {
        let bins = BinSpec::default();
        // Oracle: linear scan over the 201 intervals.
        let scan = |g: f64| {
            (0..bins.n_bins)
                .find(|&b| {
                    let (lo, hi) = (bins.edge(b), bins.edge(b + 1));
                    g >= lo && (g < hi || (b == bins.n_bins - 1 && g <= hi))
                })
                .unwrap()
        };
        assert_eq!(bins.bin_index(0.0).unwrap(), 0);
        assert_eq!(bins.bin_index(2.0).unwrap(), 200);
        assert_eq!(bins.bin_index(1.0).unwrap(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut probes: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..=2.0)).collect();
        for b in 0..=bins.n_bins {
            let e = bins.edge(b);
            probes.extend([e, e.next_up(), e.next_down()].into_iter().filter(|g| (0.0..=2.0).contains(g)));
        }
        for g in probes {
            assert_eq!(bins.bin_index(g).unwrap(), scan(g), "G={g}");
        }
        for b in 0..bins.n_bins {
            assert_eq!(bins.bin_index(bins.center(b)).unwrap(), b);
        }
        assert!(bins.bin_index(2.0000001).is_err());
        assert!(bins.bin_index(-1e-12).is_err());
        assert!((0..bins.n_bins).all(|b| bins.edge(b) < bins.edge(b + 1)));
    }

    #[test]
    fn point_estimates() {
        let bins = BinSpec::default();
        let mut one_hot = vec![0.0; 201];
        one_hot[37] = 1.0;
        assert_eq!(expected_value(&one_hot, &bins), bins.center(37));
        let uniform = vec![1.0 / 201.0; 201];
        assert!((expected_value(&uniform, &bins) - 1.0).abs() < 1e-12);
    }

    fn small_config() -> BaselineConfig {
        BaselineConfig {
            hidden: 8,
            conv_channels: 2,
            image_size: (8, 8),
            n_bins: 11,
            ..BaselineConfig::default()
        }
    }

    fn random_input<F: Real>(cfg: &BaselineConfig, b: usize, rng: &mut ChaCha8Rng) -> BatchInput<F> {
        BatchInput {
            batch: b,
            patches: (0..b * 3 * cfg.patches_per_view() * cfg.patch_features())
                .map(|_| F::lit(rng.random_range(-1.0..1.0)))
                .collect(),
            proprio: (0..b * cfg.d_q).map(|_| F::lit(rng.random_range(-1.0..1.0))).collect(),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = small_config();
        let mut net = BinNet::<f64>::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Non-zero head so every layer receives gradient.
        let head = net.layout.head.0.clone();
        for v in &mut net.params_mut()[head] {
            *v = rng.random_range(-0.5..0.5);
        }
        let input = random_input::<f64>(&cfg, 3, &mut rng);
        let labels = [1, 7, 10];
        let (_, grads) = net.cross_entropy(&input, &labels).unwrap();
        assert_eq!(cfg.count_params(), net.num_params());
        for i in (0..net.num_params()).step_by(7) {
            let h = 1e-6;
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.cross_entropy(&input, &labels).unwrap().0 - minus.cross_entropy(&input, &labels).unwrap().0)
                / (2.0 * h);
            let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn untrained_is_uniform_and_shift_invariant() {
        let cfg = small_config();
        let net = BinNet::<f64>::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_input::<f64>(&cfg, 4, &mut rng);
        let probs = net.probabilities(&input).unwrap();
        for row in probs.chunks(cfg.n_bins) {
            assert!(entropy(row) >= 0.95 * (cfg.n_bins as f64).ln());
        }
        let mut shifted = net.clone();
        let hb = shifted.layout.head.1.clone();
        shifted.params_mut()[hb].iter_mut().for_each(|v| *v += 3.5);
        let p2 = shifted.probabilities(&input).unwrap();
        for (a, b) in probs.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_matching() {
        let viva = ModelConfig::default();
        let cfg = BaselineConfig::matched_to(&viva, (32, 32)).unwrap();
        let ratio = cfg.count_params() as f64 / count_params(&viva) as f64;
        assert!((0.8..=1.2).contains(&ratio), "{ratio}");
        let net = BinNet::<f32>::new(cfg, 0).unwrap();
        assert_eq!(net.num_params(), cfg.count_params());
    }

    #[test]
    fn checkpoint_round_trip_and_values_in_range() {
        let mut spec = CorpusSpec::new(2, 2, 8);
        spec.length = (20, 30);
        let corpus = generate_corpus(&spec).unwrap();
        let cfg = BaselineConfig { hidden: 16, ..BaselineConfig::default() };
        let schedule = Schedule { steps: 5, batch: 4, lr: 1e-3, seed: 2, ..Schedule::default() };
        let out = train_baseline_on(&corpus, cfg, schedule).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.vbcl");
        out.checkpoint.save(&path).unwrap();
        let loaded = BaselineCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        let baseline = Baseline::from_checkpoint(&loaded).unwrap();
        for s in &corpus[0].steps {
            let v = baseline.estimate(s).unwrap();
            assert!((0.0..=2.0).contains(&v.v_hat));
            assert_eq!(v, baseline_value(&loaded, s).unwrap());
        }
        assert!(matches!(
            crate::trainer::Checkpoint::load(&path),
            Err(Error::Magic { .. })
        ));
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        let mut spec = CorpusSpec::new(4, 4, 21);
        spec.length = (30, 40);
        let corpus = generate_corpus(&spec).unwrap();
        let (train, held) = corpus.split_at(6);
        let cfg = BaselineConfig { hidden: 32, ..BaselineConfig::default() };
        let schedule = Schedule { steps: 150, batch: 16, lr: 1e-3, seed: 3, ..Schedule::default() };
        let mut trainer = BaselineTrainer::new(train, cfg, schedule).unwrap();
        trainer.permute_labels(99);
        trainer.run_to_end().unwrap();
        let model = Baseline::from_checkpoint(&trainer.checkpoint()).unwrap();
        let bins = BinSpec::default();
        let obs: Vec<&JointObservation> = held.iter().flat_map(|e| &e.steps).collect();
        let truth: Vec<usize> = held
            .iter()
            .flat_map(|e| (0..=e.horizon()).map(move |t| bins.bin_index(e.return_to_go(t).unwrap()).unwrap()))
            .collect();
        let pred: Vec<usize> = model
            .probabilities(&obs)
            .unwrap()
            .iter()
            .map(|p| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap())
            .collect();
        let acc = |labels: &[usize]| pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
        let observed = acc(&truth);
        // Null distribution: the same predictions scored against shuffled labels.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let null: Vec<f64> = (0..200)
            .map(|_| {
                let mut y = truth.clone();
                y.shuffle(&mut rng);
                acc(&y)
            })
            .collect();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / null.len() as f64).sqrt();
        assert!(observed <= mean + 3.0 * sd + 1e-9, "accuracy {observed} vs null {mean}±{sd}");
    }
}

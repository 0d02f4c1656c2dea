//! Inference: integrate the learned velocity field from noise (`tau = 1`) to
//! data (`tau = 0`) on the two target frames, then decode them.
//!
//! With a constant-velocity path one Euler step is exact:
//! `z0_hat = z1 - v(z1; 1, c)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_value_mean, LatentCodec, LatentGeometry, NormalizationSpec};
use crate::episode::{Episode, JointObservation, Proprioception};
use crate::error::{Error, Result};
use crate::model::{noise_frame, tokenize, untokenize, VelocityModel, FUTURE_PROPRIO_SLOT, SEQ_FRAMES, TARGET_SLOTS, VALUE_SLOT};
use crate::trainer::{Checkpoint, CONDITIONING_FRAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
    /// Number of noise seeds whose decoded outputs are averaged.
    #[serde(default = "one")]
    pub n_seeds: usize,
}

fn one() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1,
            seed: 0,
            n_seeds: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_seeds == 0 {
            return Err(Error::invalid("n_steps and n_seeds must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Return-to-go estimate in `[0, 2]`.
    pub v_hat: f64,
    /// `1 - min(v_hat, 1)`.
    pub progress: f64,
    /// Unclamped latent mean of the value frame (or its analog).
    pub raw_frame_mean: f64,
}

impl ValueEstimate {
    /// Clamps once and derives progress.
    pub fn from_raw_mean(raw_frame_mean: f64) -> Self {
        Self::from_value(decode_value_mean(raw_frame_mean), raw_frame_mean)
    }

    pub fn from_value(v_hat: f64, raw_frame_mean: f64) -> Self {
        Self {
            v_hat,
            progress: 1.0 - v_hat.min(1.0),
            raw_frame_mean,
        }
    }
}

/// Target-frame state of one sample: `[future proprio, value]`.
pub type TargetState = [Vec<f64>; 2];

/// A velocity field over batches of target-frame states.
pub trait VelocityField {
    fn velocity(&self, states: &[TargetState], tau: f64) -> Result<Vec<TargetState>>;
}

/// Euler integration from `tau = 1` to `tau = 0` over `n_steps` uniform
/// sub-intervals.
pub fn euler_integrate<V: VelocityField + ?Sized>(
    field: &V,
    mut states: Vec<TargetState>,
    n_steps: usize,
) -> Result<Vec<TargetState>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        let tau = 1.0 - i as f64 * dt;
        let v = field.velocity(&states, tau)?;
        for (s, vs) in states.iter_mut().zip(&v) {
            for k in 0..2 {
                s[k].iter_mut().zip(&vs[k]).for_each(|(z, dv)| *z -= dt * dv);
            }
        }
    }
    if states.iter().any(|s| s.iter().flatten().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("sampled latents".into()));
    }
    Ok(states)
}

/// The network conditioned on a batch of clean prefixes.
struct ConditionedField<'a> {
    model: &'a VelocityModel<f32>,
    /// Per sample: `5 x cells` conditioning latents.
    conds: &'a [Vec<f32>],
}

/// Sequences per forward call; bounds attention memory.
fn chunk_size(seq_tokens: usize) -> usize {
    (4096 / seq_tokens).max(1)
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&self, states: &[TargetState], tau: f64) -> Result<Vec<TargetState>> {
        let config = self.model.config();
        let cells = config.geometry.cells();
        let n_tok = config.seq_tokens() * config.token_features();
        let mut out_states = Vec::with_capacity(states.len());
        let mut frames = vec![0.0f32; SEQ_FRAMES * cells];
        let chunk = chunk_size(config.seq_tokens());
        for (conds, states) in self.conds.chunks(chunk).zip(states.chunks(chunk)) {
            let b = conds.len();
            let mut tokens = vec![0.0f32; b * n_tok];
            let mut taus = vec![0.0f32; b * SEQ_FRAMES];
            for (i, (cond, s)) in conds.iter().zip(states).enumerate() {
                frames[..CONDITIONING_FRAMES * cells].copy_from_slice(cond);
                for (k, &slot) in TARGET_SLOTS.iter().enumerate() {
                    for (dst, &v) in frames[slot * cells..(slot + 1) * cells].iter_mut().zip(&s[k]) {
                        *dst = v as f32;
                    }
                    taus[i * SEQ_FRAMES + slot] = tau as f32;
                }
                tokenize(config, &frames, &mut tokens[i * n_tok..(i + 1) * n_tok]);
            }
            let (out, _) = self.model.forward(&tokens, &taus, b)?;
            for i in 0..b {
                untokenize(config, &out[i * n_tok..(i + 1) * n_tok], &mut frames);
                let take = |slot: usize| frames[slot * cells..(slot + 1) * cells].iter().map(|&v| v as f64).collect();
                out_states.push([take(FUTURE_PROPRIO_SLOT), take(VALUE_SLOT)]);
            }
        }
        Ok(out_states)
    }
}

/// Initial noise for one inference call; fixed by `seed`.
pub fn initial_noise(geometry: LatentGeometry, seed: u64) -> TargetState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let future = noise_frame(geometry, &mut rng).data;
    [future, noise_frame(geometry, &mut rng).data]
}

/// Anything that maps observations to value estimates.
pub trait ValueModel {
    fn estimate_batch(&self, obs: &[&JointObservation]) -> Result<Vec<ValueEstimate>>;

    fn estimate(&self, obs: &JointObservation) -> Result<ValueEstimate> {
        Ok(self.estimate_batch(&[obs])?.remove(0))
    }
}

/// A trained velocity model bundled with its codec and normalization.
#[derive(Clone)]
pub struct Viva {
    model: VelocityModel<f32>,
    codec: LatentCodec,
    spec: NormalizationSpec,
    sampler: SamplerConfig,
}

impl Viva {
    pub fn new(model: VelocityModel<f32>, codec: LatentCodec, spec: NormalizationSpec) -> Result<Self> {
        if codec.geometry() != model.config().geometry {
            return Err(Error::Geometry("codec and model latent geometry differ".into()));
        }
        if spec.dim() != model.config().d_q {
            return Err(Error::Geometry("normalization and model d_q differ".into()));
        }
        Ok(Self {
            model,
            codec,
            spec,
            sampler: SamplerConfig::default(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.model()?, LatentCodec::new(ckpt.codec)?, ckpt.spec.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Sampler settings used by the [`ValueModel`] implementation.
    pub fn with_sampler(mut self, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate()?;
        self.sampler = sampler;
        Ok(self)
    }

    pub fn model(&self) -> &VelocityModel<f32> {
        &self.model
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    fn condition(&self, x: &JointObservation) -> Result<Vec<f32>> {
        let cells = self.codec.geometry().cells();
        let mut cond = vec![0.0f32; CONDITIONING_FRAMES * cells];
        let frames = crate::model::conditioning_frames(x, &self.codec, &self.spec)?;
        for (k, f) in frames.iter().enumerate() {
            for (dst, &v) in cond[k * cells..(k + 1) * cells].iter_mut().zip(&f.data) {
                *dst = v as f32;
            }
        }
        Ok(cond)
    }

    /// Raw denoised target frames for each observation under one noise seed.
    pub fn sample_latents(&self, obs: &[&JointObservation], n_steps: usize, seed: u64) -> Result<Vec<TargetState>> {
        let conds = obs.iter().map(|x| self.condition(x)).collect::<Result<Vec<_>>>()?;
        let z1 = initial_noise(self.codec.geometry(), seed);
        let field = ConditionedField {
            model: &self.model,
            conds: &conds,
        };
        euler_integrate(&field, vec![z1; obs.len()], n_steps)
    }

    /// Predicted future proprioception and value for each observation.
    pub fn infer_batch(
        &self,
        obs: &[&JointObservation],
        config: &SamplerConfig,
    ) -> Result<Vec<(Proprioception, ValueEstimate)>> {
        config.validate()?;
        let d_q = self.model.config().d_q;
        let geometry = self.codec.geometry();
        let n = obs.len();
        let mut q_sum = vec![vec![0.0f64; d_q]; n];
        let mut v_sum = vec![0.0f64; n];
        let mut raw_sum = vec![0.0f64; n];
        for s in 0..config.n_seeds {
            let seed = config.seed.wrapping_add(s as u64);
            for (i, state) in self.sample_latents(obs, config.n_steps, seed)?.into_iter().enumerate() {
                let [zq, zv] = state;
                let q = self.codec.decode_proprio(&crate::codec::LatentFrame { geometry, data: zq }, d_q, &self.spec)?;
                q_sum[i].iter_mut().zip(&q.values).for_each(|(a, &b)| *a += b as f64);
                let raw = zv.iter().sum::<f64>() / zv.len() as f64;
                let est = ValueEstimate::from_raw_mean(raw);
                if !(-0.5..=2.5).contains(&(raw + 1.0)) {
                    log::warn!("unclamped value {} outside sanity band", raw + 1.0);
                }
                v_sum[i] += est.v_hat;
                raw_sum[i] += raw;
            }
        }
        let k = config.n_seeds as f64;
        Ok((0..n)
            .map(|i| {
                let q = Proprioception::new(q_sum[i].iter().map(|v| (v / k) as f32).collect());
                (q, ValueEstimate::from_value(v_sum[i] / k, raw_sum[i] / k))
            })
            .collect())
    }

    pub fn infer(&self, x_t: &JointObservation, config: &SamplerConfig) -> Result<(Proprioception, ValueEstimate)> {
        Ok(self.infer_batch(&[x_t], config)?.remove(0))
    }
}

impl ValueModel for Viva {
    fn estimate_batch(&self, obs: &[&JointObservation]) -> Result<Vec<ValueEstimate>> {
        Ok(self.infer_batch(obs, &self.sampler)?.into_iter().map(|(_, v)| v).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    pub v_hat: f64,
    pub progress: f64,
    pub g_true: Option<f64>,
}

/// Steps `0, stride, 2*stride, ...` plus the terminal step.
pub fn trace_steps(horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let mut steps: Vec<usize> = (0..=horizon).step_by(stride).collect();
    if steps.last() != Some(&horizon) {
        steps.push(horizon);
    }
    Ok(steps)
}

pub fn value_trace<M: ValueModel + ?Sized>(model: &M, episode: &Episode, stride: usize) -> Result<Vec<TracePoint>> {
    let steps = trace_steps(episode.horizon(), stride)?;
    let obs: Vec<&JointObservation> = steps.iter().map(|&t| &episode.steps[t]).collect();
    let est = model.estimate_batch(&obs)?;
    let schedule = episode.schedule()?;
    steps
        .iter()
        .zip(est)
        .map(|(&t, e)| {
            Ok(TracePoint {
                t,
                v_hat: e.v_hat,
                progress: e.progress,
                g_true: Some(schedule.return_to_go(t)?),
            })
        })
        .collect()
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("t,v_hat,progress,g_true\n");
    for p in trace {
        let g = p.g_true.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", p.t, p.v_hat, p.progress, g);
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    fs::write(path, trace_csv(trace))?;
    Ok(())
}

/// `A_t = v(x_t) - v(x_{min(t+K, T)})`: positive when the estimated
/// return-to-go drops over the window, i.e. the policy made progress.
pub fn advantage<M: ValueModel + ?Sized>(model: &M, episode: &Episode, t: usize, k: usize) -> Result<f64> {
    let last = episode.horizon();
    if t > last {
        return Err(Error::StepOutOfRange { t, max: last });
    }
    let later = (t + k).min(last);
    let est = model.estimate_batch(&[&episode.steps[t], &episode.steps[later]])?;
    Ok(est[0].v_hat - est[1].v_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::model::ModelConfig;
    use crate::sim::{generate_corpus, CorpusSpec};
    use crate::episode::FailureKind;

    /// Knows the clean endpoint: `v = (z - z0) / tau`.
    struct Recovering(Vec<TargetState>);

    impl VelocityField for Recovering {
        fn velocity(&self, states: &[TargetState], tau: f64) -> Result<Vec<TargetState>> {
            Ok(states
                .iter()
                .zip(&self.0)
                .map(|(s, z0)| [0, 1].map(|k| s[k].iter().zip(&z0[k]).map(|(z, a)| (z - a) / tau).collect()))
                .collect())
        }
    }

    /// The constant field `z1 - z0`.
    struct Constant(Vec<TargetState>);

    impl VelocityField for Constant {
        fn velocity(&self, _: &[TargetState], _: f64) -> Result<Vec<TargetState>> {
            Ok(self.0.clone())
        }
    }

    fn endpoints() -> (Vec<TargetState>, Vec<TargetState>) {
        let g = LatentGeometry::DEFAULT;
        let z0 = vec![[vec![0.25; g.cells()], vec![-0.4; g.cells()]], initial_noise(g, 99)];
        let z1 = vec![initial_noise(g, 1), initial_noise(g, 2)];
        (z0, z1)
    }

    #[test]
    fn oracle_fields_recover_clean_frames() {
        let (z0, z1) = endpoints();
        let diff: Vec<TargetState> = z1
            .iter()
            .zip(&z0)
            .map(|(a, b)| [0, 1].map(|k| a[k].iter().zip(&b[k]).map(|(x, y)| x - y).collect()))
            .collect();
        for n in [1, 2, 8] {
            for out in [
                euler_integrate(&Recovering(z0.clone()), z1.clone(), n).unwrap(),
                euler_integrate(&Constant(diff.clone()), z1.clone(), n).unwrap(),
            ] {
                for (a, b) in out.iter().flatten().flatten().zip(z0.iter().flatten().flatten()) {
                    assert!((a - b).abs() < 1e-6, "n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn estimate_clamps_once() {
        let e = ValueEstimate::from_raw_mean(1.7);
        assert_eq!(e.v_hat, 2.0);
        assert_eq!(e.progress, 0.0);
        assert_eq!(e.raw_frame_mean, 1.7);
        let e = ValueEstimate::from_raw_mean(-0.75);
        assert_eq!(e.v_hat, 0.25);
        assert_eq!(e.progress, 0.75);
    }

    #[test]
    fn trace_step_counting() {
        assert_eq!(trace_steps(40, 40).unwrap(), vec![0, 40]);
        assert_eq!(trace_steps(10, 4).unwrap(), vec![0, 4, 8, 10]);
        assert_eq!(trace_steps(3, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(trace_steps(3, 0).is_err());
    }

    /// Returns the exact return-to-go of the episode it was built for.
    struct Oracle(Episode);

    impl ValueModel for Oracle {
        fn estimate_batch(&self, obs: &[&JointObservation]) -> Result<Vec<ValueEstimate>> {
            obs.iter()
                .map(|x| {
                    let t = self.0.steps.iter().position(|s| std::ptr::eq(s, *x) || s == *x).unwrap();
                    Ok(ValueEstimate::from_raw_mean(self.0.return_to_go(t)? - 1.0))
                })
                .collect()
        }
    }

    #[test]
    fn advantage_with_oracle_values() {
        let mut spec = CorpusSpec::new(1, 1, 11);
        spec.only_kind = Some(FailureKind::Drop);
        let corpus = generate_corpus(&spec).unwrap();
        let success = corpus.iter().find(|e| e.success).unwrap().clone();
        let big_t = success.horizon();
        let oracle = Oracle(success.clone());
        for t in [0, 5, big_t / 2, big_t] {
            let a = advantage(&oracle, &success, t, 50).unwrap();
            let want = (t + 50).min(big_t) as f64 / big_t as f64 - t as f64 / big_t as f64;
            assert!((a - want).abs() < 1e-12);
        }
        assert_eq!(advantage(&oracle, &success, big_t, 50).unwrap(), 0.0);
        assert!(matches!(advantage(&oracle, &success, big_t + 1, 5), Err(Error::StepOutOfRange { .. })));

        let trace = value_trace(&oracle, &success, big_t).unwrap();
        assert_eq!(trace.len(), 2);
        let csv = trace_csv(&trace);
        assert!(csv.starts_with("t,v_hat,progress,g_true\n0,1,0,1\n"));
    }

    #[test]
    fn advantage_negative_across_failure_shift() {
        // Oracle values jump from the success range to the failure range.
        struct Shifted;
        impl ValueModel for Shifted {
            fn estimate_batch(&self, obs: &[&JointObservation]) -> Result<Vec<ValueEstimate>> {
                Ok(obs.iter().map(|x| {
                    let g = if x.proprio.values[0] > 0.0 { 1.6 } else { 0.7 };
                    ValueEstimate::from_value(g, g - 1.0)
                }).collect())
            }
        }
        let mut spec = CorpusSpec::new(1, 0, 3);
        spec.length = (20, 20);
        let mut ep = generate_corpus(&spec).unwrap().remove(0);
        for (t, s) in ep.steps.iter_mut().enumerate() {
            s.proprio.values[0] = if t >= 10 { 1.0 } else { -1.0 };
        }
        for t in 0..10 {
            assert!(advantage(&Shifted, &ep, t, 5).unwrap() <= 0.0);
        }
    }

    fn small_viva(seed: u64) -> Viva {
        let config = ModelConfig {
            blocks: 1,
            width: 16,
            heads: 2,
            patch: 4,
            horizon: 5,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let model = VelocityModel::new(config, seed).unwrap();
        let spec = NormalizationSpec::new(vec![-3.0; 3], vec![3.0; 3]).unwrap();
        Viva::new(model, LatentCodec::new(CodecConfig::default()).unwrap(), spec).unwrap()
    }

    #[test]
    fn inference_is_deterministic_and_batch_invariant() {
        let mut spec = CorpusSpec::new(1, 0, 4);
        spec.length = (20, 20);
        let ep = generate_corpus(&spec).unwrap().remove(0);
        let viva = small_viva(3);
        let cfg = SamplerConfig { n_steps: 2, seed: 9, n_seeds: 1 };
        let a = viva.infer(&ep.steps[3], &cfg).unwrap();
        let b = viva.infer(&ep.steps[3], &cfg).unwrap();
        assert_eq!(a, b);
        let batch = viva.infer_batch(&[&ep.steps[0], &ep.steps[3]], &cfg).unwrap();
        assert_eq!(batch[1], a);
        assert!((0.0..=2.0).contains(&a.1.v_hat));
        let other = viva.infer(&ep.steps[3], &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.1.raw_frame_mean, other.1.raw_frame_mean);
        assert!(viva.infer(&ep.steps[3], &SamplerConfig { n_steps: 0, ..cfg }).is_err());
    }

    #[test]
    fn seed_averaging_means_decoded_values() {
        let mut spec = CorpusSpec::new(1, 0, 4);
        spec.length = (20, 20);
        let ep = generate_corpus(&spec).unwrap().remove(0);
        let viva = small_viva(3);
        let single = |seed| viva.infer(&ep.steps[2], &SamplerConfig { n_steps: 1, seed, n_seeds: 1 }).unwrap().1.v_hat;
        let avg = viva.infer(&ep.steps[2], &SamplerConfig { n_steps: 1, seed: 4, n_seeds: 3 }).unwrap().1.v_hat;
        let want = (single(4) + single(5) + single(6)) / 3.0;
        assert!((avg - want).abs() < 1e-12);
    }
}

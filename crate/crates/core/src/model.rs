//! Velocity network over the 7-frame latent sequence.
//!
//! Sequence layout, one latent frame per slot:
//!
//! | slot | content                    | role         |
//! |------|----------------------------|--------------|
//! | 0    | blank (all zeros)          | conditioning |
//! | 1    | current proprioception     | conditioning |
//! | 2-4  | camera views 1..3          | conditioning |
//! | 5    | future proprioception      | target       |
//! | 6    | value                      | target       |
//!
//! Each frame is cut into `patch x patch` groups of latent cells; every group
//! becomes one token. Tokens receive a learned frame-index embedding, a learned
//! within-frame position embedding and a sinusoidal flow-time embedding, where
//! conditioning frames always see `tau = 0`. A stack of pre-norm transformer
//! blocks with full bidirectional attention over all tokens of all frames is
//! followed by a per-token linear head that predicts the flow velocity.
//!
//! Gradients are computed by a hand-written backward pass.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentFrame, LatentGeometry, NormalizationSpec};
use crate::episode::{JointObservation, Proprioception, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::tensor::{self, matmul, Real};

pub const SEQ_FRAMES: usize = 7;
pub const BLANK_SLOT: usize = 0;
pub const PROPRIO_SLOT: usize = 1;
pub const FIRST_VIEW_SLOT: usize = 2;
pub const FUTURE_PROPRIO_SLOT: usize = 5;
pub const VALUE_SLOT: usize = 6;
pub const TARGET_SLOTS: [usize; 2] = [FUTURE_PROPRIO_SLOT, VALUE_SLOT];
pub const TARGET_MASK: [bool; SEQ_FRAMES] = [false, false, false, false, false, true, true];

/// Scale applied to `tau` before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;
const EMBED_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub geometry: LatentGeometry,
    /// Side of the square group of latent cells forming one token.
    pub patch: usize,
    pub d_q: usize,
    /// Prediction horizon `K` in control steps.
    pub horizon: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            width: 128,
            heads: 4,
            geometry: LatentGeometry::DEFAULT,
            patch: 1,
            d_q: 3,
            horizon: 50,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.geometry;
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid("width must be a positive multiple of heads"));
        }
        if self.patch == 0 || g.height % self.patch != 0 || g.width % self.patch != 0 {
            return Err(Error::Geometry(format!(
                "token patch {} does not tile latent {}x{}",
                self.patch, g.height, g.width
            )));
        }
        if self.d_q == 0 || self.d_q > g.cells() {
            return Err(Error::Geometry("d_q must fit one latent frame".into()));
        }
        if self.horizon == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("horizon and mlp_ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.geometry.height / self.patch) * (self.geometry.width / self.patch)
    }

    pub fn seq_tokens(&self) -> usize {
        SEQ_FRAMES * self.tokens_per_frame()
    }

    pub fn token_features(&self) -> usize {
        self.patch * self.patch * self.geometry.channels
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Exact learned-parameter count of a [`VelocityModel`] with this config.
pub fn count_params(config: &ModelConfig) -> usize {
    let w = config.width;
    let f = config.token_features();
    let hid = config.hidden();
    let embed = f * w + w + SEQ_FRAMES * w + config.tokens_per_frame() * w + w * w + w;
    let block = 4 * w * w + 2 * w * hid + 9 * w + hid;
    let head = 2 * w + w * f + f;
    embed + config.blocks * block + head
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.total..self.total + len;
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.inits.push(init);
        self.total += len;
        range
    }

    pub(crate) fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (Range<usize>, Range<usize>) {
        let w = self.add(
            format!("{name}.w"),
            &[fan_in, fan_out],
            Init::Normal(1.0 / (fan_in as f64).sqrt()),
        );
        let b = self.add(format!("{name}.b"), &[fan_out], Init::Zeros);
        (w, b)
    }

    pub(crate) fn layer_norm(&mut self, name: &str, d: usize) -> (Range<usize>, Range<usize>) {
        let g = self.add(format!("{name}.g"), &[d], Init::Ones);
        let b = self.add(format!("{name}.b"), &[d], Init::Zeros);
        (g, b)
    }

    pub(crate) fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn initialize<F: Real>(&self, seed: u64) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.total);
        for (entry, init) in self.entries.iter().zip(&self.inits) {
            for _ in 0..entry.len() {
                let v = match *init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Normal(std) => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    }
                };
                params.push(F::lit(v));
            }
        }
        params
    }
}

/// Named tensors of a model with this config, in flat-buffer order.
pub fn param_entries(config: &ModelConfig) -> Result<Vec<ParamEntry>> {
    config.validate()?;
    Ok(Layout::build(config).0.entries)
}

/// Model-independent description of where each tensor lives in a flat buffer.
pub trait ParamLayout {
    fn entries(&self) -> &[ParamEntry];
    fn total(&self) -> usize {
        self.entries().iter().map(ParamEntry::len).sum()
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1: (Range<usize>, Range<usize>),
    qkv: (Range<usize>, Range<usize>),
    out: (Range<usize>, Range<usize>),
    ln2: (Range<usize>, Range<usize>),
    fc1: (Range<usize>, Range<usize>),
    fc2: (Range<usize>, Range<usize>),
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<ParamEntry>,
    embed: (Range<usize>, Range<usize>),
    frame: Range<usize>,
    pos: Range<usize>,
    time: (Range<usize>, Range<usize>),
    blocks: Vec<BlockIdx>,
    lnf: (Range<usize>, Range<usize>),
    head: (Range<usize>, Range<usize>),
    total: usize,
}

impl Layout {
    fn build(config: &ModelConfig) -> (Self, LayoutBuilder) {
        let w = config.width;
        let f = config.token_features();
        let hid = config.hidden();
        let mut b = LayoutBuilder::default();
        let embed = b.linear("embed", f, w);
        let frame = b.add("frame_emb", &[SEQ_FRAMES, w], Init::Normal(EMBED_STD));
        let pos = b.add("pos_emb", &[config.tokens_per_frame(), w], Init::Normal(EMBED_STD));
        let time = b.linear("time", w, w);
        let blocks = (0..config.blocks)
            .map(|i| BlockIdx {
                ln1: b.layer_norm(&format!("blocks.{i}.ln1"), w),
                qkv: b.linear(&format!("blocks.{i}.attn.qkv"), w, 3 * w),
                out: b.linear(&format!("blocks.{i}.attn.out"), w, w),
                ln2: b.layer_norm(&format!("blocks.{i}.ln2"), w),
                fc1: b.linear(&format!("blocks.{i}.mlp.fc1"), w, hid),
                fc2: b.linear(&format!("blocks.{i}.mlp.fc2"), hid, w),
            })
            .collect();
        let lnf = b.layer_norm("final_ln", w);
        let head = b.linear("head", w, f);
        let layout = Layout {
            entries: b.entries.clone(),
            embed,
            frame,
            pos,
            time,
            blocks,
            lnf,
            head,
            total: b.total,
        };
        (layout, b)
    }
}

struct BlockCache<F> {
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    ln1_out: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    ln2_out: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

/// Activations retained by [`VelocityModel::forward`] for the backward pass.
pub struct ForwardCache<F> {
    batch: usize,
    input: Vec<F>,
    sinus: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    lnf_xhat: Vec<F>,
    lnf_rstd: Vec<F>,
    lnf_out: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct VelocityModel<F: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Real> ParamLayout for VelocityModel<F> {
    fn entries(&self) -> &[ParamEntry] {
        &self.layout.entries
    }
}

/// Sinusoidal embedding of `tau` into `width` features (sin half, cos half).
pub fn time_embedding<F: Real>(tau: F, width: usize, out: &mut [F]) {
    let half = width / 2;
    out.iter_mut().for_each(|v| *v = F::zero());
    let t = tau.to_f64().unwrap() * TIME_SCALE;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = F::lit((t * freq).sin());
        out[half + i] = F::lit((t * freq).cos());
    }
}

impl<F: Real> VelocityModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = Layout::build(&config);
        let params = builder.initialize(seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::build(&config);
        if params.len() != layout.total {
            return Err(Error::Geometry(format!(
                "parameter buffer has {} values, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    pub fn cast<G: Real>(&self) -> VelocityModel<G> {
        VelocityModel {
            config: self.config,
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    fn p(&self, r: &Range<usize>) -> &[F] {
        &self.params[r.clone()]
    }

    /// Runs the network on `batch` sequences.
    ///
    /// `tokens` is `batch x seq_tokens x token_features`; `taus` holds one flow
    /// time per frame (`batch x 7`). Returns per-token velocities with the same
    /// shape as `tokens`.
    pub fn forward(&self, tokens: &[F], taus: &[F], batch: usize) -> Result<(Vec<F>, ForwardCache<F>)> {
        let c = &self.config;
        let (w, f, n, tpf, hid) = (c.width, c.token_features(), c.seq_tokens(), c.tokens_per_frame(), c.hidden());
        let rows = batch * n;
        if tokens.len() != rows * f || taus.len() != batch * SEQ_FRAMES {
            return Err(Error::Geometry(format!(
                "forward expects {} token values and {} taus, got {} and {}",
                rows * f,
                batch * SEQ_FRAMES,
                tokens.len(),
                taus.len()
            )));
        }
        let l = &self.layout;

        let mut h = vec![F::zero(); rows * w];
        matmul(rows, f, w, tokens, false, self.p(&l.embed.0), false, &mut h, false);
        tensor::add_bias(&mut h, self.p(&l.embed.1));

        let mut sinus = vec![F::zero(); batch * SEQ_FRAMES * w];
        for (i, &tau) in taus.iter().enumerate() {
            time_embedding(tau, w, &mut sinus[i * w..(i + 1) * w]);
        }
        let mut temb = vec![F::zero(); batch * SEQ_FRAMES * w];
        matmul(batch * SEQ_FRAMES, w, w, &sinus, false, self.p(&l.time.0), false, &mut temb, false);
        tensor::add_bias(&mut temb, self.p(&l.time.1));

        let frame_emb = self.p(&l.frame);
        let pos_emb = self.p(&l.pos);
        for (r, row) in h.chunks_mut(w).enumerate() {
            let (b, tok) = (r / n, r % n);
            let (fi, pi) = (tok / tpf, tok % tpf);
            let te = &temb[(b * SEQ_FRAMES + fi) * w..(b * SEQ_FRAMES + fi + 1) * w];
            for j in 0..w {
                row[j] += frame_emb[fi * w + j] + pos_emb[pi * w + j] + te[j];
            }
        }

        let heads = c.heads;
        let dh = w / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut blocks = Vec::with_capacity(c.blocks);
        for (bi, idx) in l.blocks.iter().enumerate() {
            let mut ln1_xhat = vec![F::zero(); rows * w];
            let mut ln1_out = vec![F::zero(); rows * w];
            let mut ln1_rstd = vec![F::zero(); rows];
            tensor::layer_norm(&h, self.p(&idx.ln1.0), self.p(&idx.ln1.1), &mut ln1_xhat, &mut ln1_out, &mut ln1_rstd);

            let mut qkv = vec![F::zero(); rows * 3 * w];
            matmul(rows, w, 3 * w, &ln1_out, false, self.p(&idx.qkv.0), false, &mut qkv, false);
            tensor::add_bias(&mut qkv, self.p(&idx.qkv.1));

            let mut probs = vec![F::zero(); batch * heads * n * n];
            let mut attn = vec![F::zero(); rows * w];
            let s3 = (3 * w) as isize;
            for b in 0..batch {
                for hd in 0..heads {
                    let base = b * n * 3 * w + hd * dh;
                    let pr = &mut probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                    F::gemm(n, dh, n, scale, &qkv[base..], s3, 1, &qkv[base + w..], 1, s3, F::zero(), pr, n as isize, 1);
                    tensor::softmax_rows(pr, n);
                    let out = &mut attn[b * n * w + hd * dh..];
                    F::gemm(n, n, dh, F::one(), pr, n as isize, 1, &qkv[base + 2 * w..], s3, 1, F::zero(), out, w as isize, 1);
                }
            }
            let mut proj = vec![F::zero(); rows * w];
            matmul(rows, w, w, &attn, false, self.p(&idx.out.0), false, &mut proj, false);
            tensor::add_bias(&mut proj, self.p(&idx.out.1));
            h.iter_mut().zip(&proj).for_each(|(a, b)| *a += *b);

            let mut ln2_xhat = vec![F::zero(); rows * w];
            let mut ln2_out = vec![F::zero(); rows * w];
            let mut ln2_rstd = vec![F::zero(); rows];
            tensor::layer_norm(&h, self.p(&idx.ln2.0), self.p(&idx.ln2.1), &mut ln2_xhat, &mut ln2_out, &mut ln2_rstd);

            let mut pre_act = vec![F::zero(); rows * hid];
            matmul(rows, w, hid, &ln2_out, false, self.p(&idx.fc1.0), false, &mut pre_act, false);
            tensor::add_bias(&mut pre_act, self.p(&idx.fc1.1));
            let act: Vec<F> = pre_act.iter().map(|&u| tensor::gelu(u)).collect();
            matmul(rows, hid, w, &act, false, self.p(&idx.fc2.0), false, &mut proj, false);
            tensor::add_bias(&mut proj, self.p(&idx.fc2.1));
            h.iter_mut().zip(&proj).for_each(|(a, b)| *a += *b);

            if !tensor::all_finite(&h) {
                return Err(Error::NonFinite(format!(
                    "residual stream after block {bi} (max |param| = {:.3e})",
                    self.max_abs_param()
                )));
            }
            blocks.push(BlockCache {
                ln1_xhat,
                ln1_rstd,
                ln1_out,
                qkv,
                probs,
                attn,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                pre_act,
                act,
            });
        }

        let mut lnf_xhat = vec![F::zero(); rows * w];
        let mut lnf_out = vec![F::zero(); rows * w];
        let mut lnf_rstd = vec![F::zero(); rows];
        tensor::layer_norm(&h, self.p(&l.lnf.0), self.p(&l.lnf.1), &mut lnf_xhat, &mut lnf_out, &mut lnf_rstd);
        let mut out = vec![F::zero(); rows * f];
        matmul(rows, w, f, &lnf_out, false, self.p(&l.head.0), false, &mut out, false);
        tensor::add_bias(&mut out, self.p(&l.head.1));
        if !tensor::all_finite(&out) {
            return Err(Error::NonFinite("velocity head output".into()));
        }

        Ok((
            out,
            ForwardCache {
                batch,
                input: tokens.to_vec(),
                sinus,
                blocks,
                lnf_xhat,
                lnf_rstd,
                lnf_out,
            },
        ))
    }

    fn max_abs_param(&self) -> f64 {
        self.params
            .iter()
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max)
    }

    /// Accumulates the parameter gradient of `sum(d_out * output)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<F>, d_out: &[F], grads: &mut [F]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let c = &self.config;
        let (w, f, n, tpf, hid) = (c.width, c.token_features(), c.seq_tokens(), c.tokens_per_frame(), c.hidden());
        let batch = cache.batch;
        let rows = batch * n;
        let l = &self.layout;
        let heads = c.heads;
        let dh = w / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        // head
        matmul(w, rows, f, &cache.lnf_out, true, d_out, false, &mut grads[l.head.0.clone()], true);
        tensor::col_sum_into(d_out, &mut grads[l.head.1.clone()]);
        let mut d_ln = vec![F::zero(); rows * w];
        matmul(rows, f, w, d_out, false, self.p(&l.head.0), true, &mut d_ln, false);
        let mut dh_res = vec![F::zero(); rows * w];
        {
            let (dg, db) = split_two(grads, &l.lnf.0, &l.lnf.1);
            tensor::layer_norm_backward(&d_ln, &cache.lnf_xhat, &cache.lnf_rstd, self.p(&l.lnf.0), dg, db, &mut dh_res);
        }

        let mut d_act = vec![F::zero(); rows * hid];
        let mut d_tmp = vec![F::zero(); rows * w];
        let mut d_qkv = vec![F::zero(); rows * 3 * w];
        let mut d_probs = vec![F::zero(); n * n];
        for (idx, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            // MLP
            matmul(hid, rows, w, &bc.act, true, &dh_res, false, &mut grads[idx.fc2.0.clone()], true);
            tensor::col_sum_into(&dh_res, &mut grads[idx.fc2.1.clone()]);
            matmul(rows, w, hid, &dh_res, false, self.p(&idx.fc2.0), true, &mut d_act, false);
            d_act
                .iter_mut()
                .zip(&bc.pre_act)
                .for_each(|(d, &u)| *d *= tensor::gelu_grad(u));
            matmul(w, rows, hid, &bc.ln2_out, true, &d_act, false, &mut grads[idx.fc1.0.clone()], true);
            tensor::col_sum_into(&d_act, &mut grads[idx.fc1.1.clone()]);
            matmul(rows, hid, w, &d_act, false, self.p(&idx.fc1.0), true, &mut d_tmp, false);
            {
                let (dg, db) = split_two(grads, &idx.ln2.0, &idx.ln2.1);
                tensor::layer_norm_backward(&d_tmp, &bc.ln2_xhat, &bc.ln2_rstd, self.p(&idx.ln2.0), dg, db, &mut dh_res);
            }

            // attention output projection
            matmul(w, rows, w, &bc.attn, true, &dh_res, false, &mut grads[idx.out.0.clone()], true);
            tensor::col_sum_into(&dh_res, &mut grads[idx.out.1.clone()]);
            let mut d_attn = vec![F::zero(); rows * w];
            matmul(rows, w, w, &dh_res, false, self.p(&idx.out.0), true, &mut d_attn, false);

            let s3 = (3 * w) as isize;
            let ws = w as isize;
            let ns = n as isize;
            for b in 0..batch {
                for hd in 0..heads {
                    let base = b * n * 3 * w + hd * dh;
                    let pr = &bc.probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                    let d_o = &d_attn[b * n * w + hd * dh..];
                    // dP = dO V^T
                    F::gemm(n, dh, n, F::one(), d_o, ws, 1, &bc.qkv[base + 2 * w..], 1, s3, F::zero(), &mut d_probs, ns, 1);
                    // dV = P^T dO
                    F::gemm(n, n, dh, F::one(), pr, 1, ns, d_o, ws, 1, F::zero(), &mut d_qkv[base + 2 * w..], s3, 1);
                    // softmax backward
                    for i in 0..n {
                        let prow = &pr[i * n..(i + 1) * n];
                        let drow = &mut d_probs[i * n..(i + 1) * n];
                        let dot: F = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            drow[j] = prow[j] * (drow[j] - dot);
                        }
                    }
                    // dQ = scale * dS K ; dK = scale * dS^T Q
                    F::gemm(n, n, dh, scale, &d_probs, ns, 1, &bc.qkv[base + w..], s3, 1, F::zero(), &mut d_qkv[base..], s3, 1);
                    F::gemm(n, n, dh, scale, &d_probs, 1, ns, &bc.qkv[base..], s3, 1, F::zero(), &mut d_qkv[base + w..], s3, 1);
                }
            }
            matmul(w, rows, 3 * w, &bc.ln1_out, true, &d_qkv, false, &mut grads[idx.qkv.0.clone()], true);
            tensor::col_sum_into(&d_qkv, &mut grads[idx.qkv.1.clone()]);
            matmul(rows, 3 * w, w, &d_qkv, false, self.p(&idx.qkv.0), true, &mut d_tmp, false);
            {
                let (dg, db) = split_two(grads, &idx.ln1.0, &idx.ln1.1);
                tensor::layer_norm_backward(&d_tmp, &bc.ln1_xhat, &bc.ln1_rstd, self.p(&idx.ln1.0), dg, db, &mut dh_res);
            }
        }

        // embeddings
        matmul(f, rows, w, &cache.input, true, &dh_res, false, &mut grads[l.embed.0.clone()], true);
        tensor::col_sum_into(&dh_res, &mut grads[l.embed.1.clone()]);
        let mut d_temb = vec![F::zero(); batch * SEQ_FRAMES * w];
        for (r, row) in dh_res.chunks(w).enumerate() {
            let (b, tok) = (r / n, r % n);
            let (fi, pi) = (tok / tpf, tok % tpf);
            for j in 0..w {
                grads[l.frame.start + fi * w + j] += row[j];
                grads[l.pos.start + pi * w + j] += row[j];
                d_temb[(b * SEQ_FRAMES + fi) * w + j] += row[j];
            }
        }
        matmul(w, batch * SEQ_FRAMES, w, &cache.sinus, true, &d_temb, false, &mut grads[l.time.0.clone()], true);
        tensor::col_sum_into(&d_temb, &mut grads[l.time.1.clone()]);
    }

    /// Velocity predictions for the two target frames of one sequence whose
    /// targets sit at flow time `tau`.
    pub fn forward_velocity(&self, seq: &LatentSequence, tau: f64) -> Result<[LatentFrame; 2]> {
        let mut out = self.velocity_batch(std::slice::from_ref(seq), &[tau])?;
        Ok(out.pop().expect("one sequence in, one out"))
    }

    /// Batched [`Self::forward_velocity`], one `tau` per sequence.
    pub fn velocity_batch(&self, seqs: &[LatentSequence], taus: &[f64]) -> Result<Vec<[LatentFrame; 2]>> {
        let c = &self.config;
        let g = c.geometry;
        let cells = g.cells();
        let n_tok = c.seq_tokens() * c.token_features();
        let mut tokens = vec![F::zero(); seqs.len() * n_tok];
        let mut frame_taus = vec![F::zero(); seqs.len() * SEQ_FRAMES];
        let mut flat = vec![F::zero(); SEQ_FRAMES * cells];
        for (i, seq) in seqs.iter().enumerate() {
            seq.check(g)?;
            for (k, frame) in seq.frames.iter().enumerate() {
                for (dst, &src) in flat[k * cells..(k + 1) * cells].iter_mut().zip(&frame.data) {
                    *dst = F::lit(src);
                }
            }
            tokenize(c, &flat, &mut tokens[i * n_tok..(i + 1) * n_tok]);
            for &slot in &TARGET_SLOTS {
                frame_taus[i * SEQ_FRAMES + slot] = F::lit(taus[i]);
            }
        }
        let (out, _) = self.forward(&tokens, &frame_taus, seqs.len())?;
        let mut frames = vec![F::zero(); SEQ_FRAMES * cells];
        Ok((0..seqs.len())
            .map(|i| {
                untokenize(c, &out[i * n_tok..(i + 1) * n_tok], &mut frames);
                let take = |slot: usize| LatentFrame {
                    geometry: g,
                    data: frames[slot * cells..(slot + 1) * cells]
                        .iter()
                        .map(|v| v.to_f64().unwrap())
                        .collect(),
                };
                [take(FUTURE_PROPRIO_SLOT), take(VALUE_SLOT)]
            })
            .collect())
    }
}

fn split_two<'a, F>(buf: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Converts `7 x (H', W', C')` frames into `seq_tokens x token_features`.
pub fn tokenize<F: Copy>(config: &ModelConfig, frames: &[F], tokens: &mut [F]) {
    let g = config.geometry;
    let p = config.patch;
    let (th, tw) = (g.height / p, g.width / p);
    let cells = g.cells();
    let mut k = 0;
    for frame in 0..SEQ_FRAMES {
        let base = frame * cells;
        for i in 0..th {
            for j in 0..tw {
                for di in 0..p {
                    let row = (i * p + di) * g.width;
                    let start = base + (row + j * p) * g.channels;
                    let len = p * g.channels;
                    tokens[k..k + len].copy_from_slice(&frames[start..start + len]);
                    k += len;
                }
            }
        }
    }
}

/// Inverse of [`tokenize`].
pub fn untokenize<F: Copy>(config: &ModelConfig, tokens: &[F], frames: &mut [F]) {
    let g = config.geometry;
    let p = config.patch;
    let (th, tw) = (g.height / p, g.width / p);
    let cells = g.cells();
    let mut k = 0;
    for frame in 0..SEQ_FRAMES {
        let base = frame * cells;
        for i in 0..th {
            for j in 0..tw {
                for di in 0..p {
                    let row = (i * p + di) * g.width;
                    let start = base + (row + j * p) * g.channels;
                    let len = p * g.channels;
                    frames[start..start + len].copy_from_slice(&tokens[k..k + len]);
                    k += len;
                }
            }
        }
    }
}

/// Fixed-order latent sequence `[blank, q_t, o1, o2, o3, q_{t+K}, v_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: [LatentFrame; SEQ_FRAMES],
}

impl LatentSequence {
    pub fn target_mask(&self) -> [bool; SEQ_FRAMES] {
        TARGET_MASK
    }

    fn check(&self, g: LatentGeometry) -> Result<()> {
        if self.frames.iter().any(|f| f.geometry != g || f.data.len() != g.cells()) {
            return Err(Error::Geometry("sequence frames do not match model geometry".into()));
        }
        Ok(())
    }

    /// Replaces the target frames.
    pub fn with_targets(mut self, future: LatentFrame, value: LatentFrame) -> Self {
        self.frames[FUTURE_PROPRIO_SLOT] = future;
        self.frames[VALUE_SLOT] = value;
        self
    }
}

/// Encodes the conditioning prefix `[blank, q_t, o1, o2, o3]`.
pub fn conditioning_frames(
    x_t: &JointObservation,
    codec: &LatentCodec,
    spec: &NormalizationSpec,
) -> Result<[LatentFrame; 5]> {
    let v = &x_t.obs.views;
    Ok([
        codec.blank_frame(),
        codec.encode_proprio(&x_t.proprio, spec)?,
        codec.encode_image(&v[0])?,
        codec.encode_image(&v[1])?,
        codec.encode_image(&v[NUM_VIEWS - 1])?,
    ])
}

/// Draws one standard Gaussian frame.
pub fn noise_frame(geometry: LatentGeometry, rng: &mut impl Rng) -> LatentFrame {
    LatentFrame {
        geometry,
        data: (0..geometry.cells())
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    }
}

/// Builds the 7-frame sequence. With both targets supplied (training) every
/// frame is clean; with neither (inference) the target slots hold standard
/// Gaussian noise drawn from `noise_seed`.
pub fn assemble_sequence(
    x_t: &JointObservation,
    q_future: Option<&Proprioception>,
    g_t: Option<f64>,
    codec: &LatentCodec,
    spec: &NormalizationSpec,
    noise_seed: u64,
) -> Result<LatentSequence> {
    let [blank, q, o1, o2, o3] = conditioning_frames(x_t, codec, spec)?;
    let (future, value) = match (q_future, g_t) {
        (Some(qf), Some(g)) => (codec.encode_proprio(qf, spec)?, codec.encode_value(g)?),
        (None, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let geometry = codec.geometry();
            let future = noise_frame(geometry, &mut rng);
            (future, noise_frame(geometry, &mut rng))
        }
        _ => {
            return Err(Error::invalid(
                "supply both targets (training) or neither (inference)",
            ))
        }
    };
    Ok(LatentSequence {
        frames: [blank, q, o1, o2, o3, future, value],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(blocks: usize, width: usize) -> ModelConfig {
        ModelConfig {
            blocks,
            width,
            heads: 2,
            geometry: LatentGeometry { height: 4, width: 4, channels: 2 },
            patch: 2,
            d_q: 3,
            horizon: 5,
            mlp_ratio: 4,
        }
    }

    #[test]
    fn closed_form_count_matches_layout() {
        for cfg in [tiny(0, 8), tiny(1, 16), tiny(3, 32), ModelConfig::default()] {
            let m = VelocityModel::<f32>::new(cfg, 0).unwrap();
            assert_eq!(count_params(&cfg), m.num_params());
            assert_eq!(m.total(), m.num_params());
        }
    }

    #[test]
    fn hand_counted_sizes() {
        // L=0, width 8, tokens of 2x2x2=8 features, 4 tokens per frame:
        // embed 8*8+8=72, frame 7*8=56, pos 4*8=32, time 8*8+8=72,
        // final ln 16, head 8*8+8=72  -> 320
        assert_eq!(count_params(&tiny(0, 8)), 320);
        // one block at width w adds 12w^2 + 13w
        for w in [8, 16, 32] {
            assert_eq!(count_params(&tiny(1, w)) - count_params(&tiny(0, w)), 12 * w * w + 13 * w);
        }
        // width 16 vs 32 with L=1: f=8, tpf=4
        let closed = |w: usize| 8 * w + w + 7 * w + 4 * w + w * w + w + 12 * w * w + 13 * w + 2 * w + w * 8 + 8;
        assert_eq!(count_params(&tiny(1, 16)), closed(16));
        assert_eq!(count_params(&tiny(1, 32)), closed(32));
    }

    #[test]
    fn tokenize_round_trip() {
        let cfg = tiny(1, 8);
        let cells = cfg.geometry.cells();
        let frames: Vec<f64> = (0..SEQ_FRAMES * cells).map(|i| i as f64).collect();
        let mut toks = vec![0.0; frames.len()];
        tokenize(&cfg, &frames, &mut toks);
        // first token = cells (0,0),(0,1),(1,0),(1,1) with 2 channels each
        assert_eq!(&toks[..8], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        let mut back = vec![0.0; frames.len()];
        untokenize(&cfg, &toks, &mut back);
        assert_eq!(back, frames);
    }

    fn random_seq(cfg: &ModelConfig, seed: u64) -> LatentSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = std::array::from_fn(|_| noise_frame(cfg.geometry, &mut rng));
        LatentSequence { frames }
    }

    #[test]
    fn forward_velocity_contract() {
        let cfg = tiny(2, 16);
        let m = VelocityModel::<f64>::new(cfg, 42).unwrap();
        let seq = random_seq(&cfg, 1);
        let a = m.forward_velocity(&seq, 0.5).unwrap();
        let b = VelocityModel::<f64>::new(cfg, 42).unwrap().forward_velocity(&seq, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for f in &a {
            assert_eq!(f.geometry, cfg.geometry);
            assert!(f.is_finite());
        }

        let mut swapped = seq.clone();
        swapped.frames.swap(2, 3);
        assert_ne!(m.forward_velocity(&swapped, 0.5).unwrap(), a);

        assert_ne!(m.forward_velocity(&seq, 0.1).unwrap(), m.forward_velocity(&seq, 0.9).unwrap());
    }

    #[test]
    fn conditioning_frames_influence_targets() {
        let cfg = tiny(1, 16);
        let m = VelocityModel::<f64>::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let seq = random_seq(&cfg, 100 + trial);
            let base = m.forward_velocity(&seq, 0.7).unwrap();
            for slot in 0..5 {
                let mut other = seq.clone();
                other.frames[slot] = noise_frame(cfg.geometry, &mut rng);
                assert_ne!(m.forward_velocity(&other, 0.7).unwrap(), base, "slot {slot}");
            }
        }
    }

    #[test]
    fn batching_matches_single() {
        let cfg = tiny(1, 16);
        let m = VelocityModel::<f64>::new(cfg, 3).unwrap();
        let seqs = [random_seq(&cfg, 1), random_seq(&cfg, 2)];
        let batched = m.velocity_batch(&seqs, &[0.3, 0.8]).unwrap();
        let single = m.forward_velocity(&seqs[1], 0.8).unwrap();
        for (x, y) in batched[1][1].data.iter().zip(&single[1].data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let cfg = tiny(1, 8);
        let mut m = VelocityModel::<f64>::new(cfg, 3).unwrap();
        m.params_mut()[0] = f64::NAN;
        let err = m.forward_velocity(&random_seq(&cfg, 1), 0.5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny(1, 8);
        let mut m = VelocityModel::<f64>::new(cfg, 11).unwrap();
        let batch = 2;
        let n_tok = cfg.seq_tokens() * cfg.token_features();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens: Vec<f64> = (0..batch * n_tok).map(|_| StandardNormal.sample(&mut rng)).collect();
        let taus: Vec<f64> = (0..batch * SEQ_FRAMES).map(|_| rng.random_range(0.0..1.0)).collect();
        let weights: Vec<f64> = (0..batch * n_tok).map(|_| StandardNormal.sample(&mut rng)).collect();
        let objective = |m: &VelocityModel<f64>| {
            let (out, _) = m.forward(&tokens, &taus, batch).unwrap();
            out.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = m.forward(&tokens, &taus, batch).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(&cache, &weights, &mut grads);
        for i in (0..m.num_params()).step_by(7) {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + 1e-6;
            let up = objective(&m);
            m.params_mut()[i] = orig - 1e-6;
            let down = objective(&m);
            m.params_mut()[i] = orig;
            let fd = (up - down) / 2e-6;
            let scale = fd.abs().max(grads[i].abs());
            assert!((fd - grads[i]).abs() < 1e-5 * scale + 1e-7, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }
}

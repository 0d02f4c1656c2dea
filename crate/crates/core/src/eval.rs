//! Trace-level metrics shared by every value model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, JointObservation};
use crate::error::{Error, Result};
use crate::sampler::{TracePoint, ValueModel};

/// Steps on each side of an injected failure used by [`failure_sensitivity`].
pub const SENSITIVITY_WINDOW: usize = 10;

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either input is constant or too short.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `P(score_pos > score_neg) + P(tie) / 2`.
pub fn auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (positive.len() * negative.len()) as f64)
}

/// Least-squares non-increasing fit by pool-adjacent-violators.
pub fn isotonic_decreasing(y: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (s2, c2) = blocks[blocks.len() - 1];
            let (s1, c1) = blocks[blocks.len() - 2];
            if s1 / c1 as f64 >= s2 / c2 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s1 + s2, c1 + c2);
        }
    }
    blocks
        .iter()
        .flat_map(|&(s, c)| std::iter::repeat_n(s / c as f64, c))
        .collect()
}

/// Mean squared deviation of a trace from its non-increasing isotonic fit.
pub fn trace_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let fit = isotonic_decreasing(values);
    values.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / values.len() as f64
}

/// Mean estimate over `[trigger+1, trigger+W]` minus mean over
/// `[trigger-W, trigger-1]` on a dense per-step trace. Positive means the
/// value moved toward the failure range at the event.
pub fn failure_sensitivity(values: &[f64], trigger: usize) -> Option<f64> {
    if trigger == 0 || trigger + 1 >= values.len() {
        return None;
    }
    let before = &values[trigger.saturating_sub(SENSITIVITY_WINDOW)..trigger];
    let after = &values[trigger + 1..(trigger + SENSITIVITY_WINDOW + 1).min(values.len())];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(mean(after) - mean(before))
}

pub fn definitions() -> BTreeMap<String, String> {
    let d = [
        (
            "spearman_mean",
            "mean over success episodes of Spearman rank correlation between v_hat_t and the true return-to-go G_t over every step t (constant traces count as 0)",
        ),
        (
            "auc_mid_episode",
            "ROC AUC separating failure (positive) from success episodes using v_hat at t = floor(T/2); ties count one half",
        ),
        (
            "failure_sensitivity",
            "per failure episode: mean v_hat over steps [e+1, e+10] minus mean over [e-10, e-1], e = injected failure step; reported as the mean, positive = value rises toward the failure range",
        ),
        (
            "failure_sensitivity_positive_fraction",
            "fraction of failure episodes whose failure_sensitivity is > 0",
        ),
        (
            "trace_variance",
            "mean over success episodes of the mean squared deviation of v_hat_t from its least-squares non-increasing (isotonic) fit",
        ),
    ];
    d.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub index: usize,
    pub success: bool,
    pub failure_kind: Option<String>,
    pub spearman: Option<f64>,
    pub mid_value: f64,
    pub failure_sensitivity: Option<f64>,
    pub trace_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub n_episodes: usize,
    pub n_success: usize,
    pub n_failure: usize,
    pub spearman_mean: Option<f64>,
    pub auc_mid_episode: Option<f64>,
    pub failure_sensitivity: Option<f64>,
    pub failure_sensitivity_positive_fraction: Option<f64>,
    pub trace_variance: Option<f64>,
    pub episodes: Vec<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub definitions: BTreeMap<String, String>,
    pub models: Vec<ModelMetrics>,
}

impl EvalReport {
    pub fn new(models: Vec<ModelMetrics>) -> Self {
        Self {
            definitions: definitions(),
            models,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.model == name)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Dense traces (every step) for each episode.
pub fn dense_traces<M: ValueModel + ?Sized>(model: &M, episodes: &[Episode]) -> Result<Vec<Vec<TracePoint>>> {
    episodes
        .iter()
        .map(|ep| crate::sampler::value_trace(model, ep, 1))
        .collect()
}

/// Metrics of one model from dense traces of `episodes`.
pub fn metrics_from_traces(name: &str, episodes: &[Episode], traces: &[Vec<TracePoint>]) -> Result<ModelMetrics> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if traces.len() != episodes.len() {
        return Err(Error::invalid("one trace per episode required"));
    }
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut missing_marker = 0;
    for (i, (ep, trace)) in episodes.iter().zip(traces).enumerate() {
        if trace.len() != ep.steps.len() || trace.iter().enumerate().any(|(t, p)| p.t != t) {
            return Err(Error::invalid("metrics need dense traces"));
        }
        let v: Vec<f64> = trace.iter().map(|p| p.v_hat).collect();
        let g: Vec<f64> = (0..ep.steps.len()).map(|t| ep.return_to_go(t)).collect::<Result<_>>()?;
        let sensitivity = if ep.success {
            None
        } else {
            match &ep.meta.failure {
                Some(marker) => failure_sensitivity(&v, marker.step),
                None => {
                    missing_marker += 1;
                    None
                }
            }
        };
        per_episode.push(EpisodeMetrics {
            index: i,
            success: ep.success,
            failure_kind: ep.meta.failure.map(|f| f.kind.as_str().to_string()),
            spearman: spearman(&v, &g),
            mid_value: v[ep.horizon() / 2],
            failure_sensitivity: sensitivity,
            trace_variance: trace_variance(&v),
        });
    }
    if missing_marker > 0 {
        log::warn!("{missing_marker} failure episodes lack failure metadata; failure_sensitivity skips them");
    }
    let success: Vec<&EpisodeMetrics> = per_episode.iter().filter(|e| e.success).collect();
    let failure: Vec<&EpisodeMetrics> = per_episode.iter().filter(|e| !e.success).collect();
    let sens: Vec<f64> = failure.iter().filter_map(|e| e.failure_sensitivity).collect();
    let spear: Vec<f64> = success.iter().map(|e| e.spearman.unwrap_or(0.0)).collect();
    let tv: Vec<f64> = success.iter().map(|e| e.trace_variance).collect();
    Ok(ModelMetrics {
        model: name.to_string(),
        n_episodes: episodes.len(),
        n_success: success.len(),
        n_failure: failure.len(),
        spearman_mean: mean(&spear),
        auc_mid_episode: auc(
            &failure.iter().map(|e| e.mid_value).collect::<Vec<_>>(),
            &success.iter().map(|e| e.mid_value).collect::<Vec<_>>(),
        ),
        failure_sensitivity: mean(&sens),
        failure_sensitivity_positive_fraction: mean(&sens.iter().map(|&s| f64::from(u8::from(s > 0.0))).collect::<Vec<_>>()),
        trace_variance: mean(&tv),
        episodes: per_episode,
    })
}

/// Evaluates a model on `episodes`, returning its metrics and dense traces.
pub fn evaluate_model<M: ValueModel + ?Sized>(
    name: &str,
    model: &M,
    episodes: &[Episode],
) -> Result<(ModelMetrics, Vec<Vec<TracePoint>>)> {
    let traces = dense_traces(model, episodes)?;
    Ok((metrics_from_traces(name, episodes, &traces)?, traces))
}

/// Value estimates for every step of every episode in one batched pass.
pub fn estimate_all<M: ValueModel + ?Sized>(model: &M, episodes: &[Episode]) -> Result<Vec<Vec<f64>>> {
    let obs: Vec<&JointObservation> = episodes.iter().flat_map(|e| &e.steps).collect();
    let est = model.estimate_batch(&obs)?;
    let mut it = est.into_iter();
    Ok(episodes
        .iter()
        .map(|e| it.by_ref().take(e.steps.len()).map(|v| v.v_hat).collect())
        .collect())
}

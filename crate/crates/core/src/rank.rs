//! Listwise ranking of shape hypotheses.
//!
//! Each candidate is scored from the candidate-set mean, its own residual
//! from that mean, and the input condition. Training matches the softmax of
//! the scores to a target distribution that favours low vertex error.

use std::path::Path;

use gradcore::{AdamState, Graph, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::head::Vec3;

/// Mean over vertices of the per-vertex Euclidean displacement.
pub fn vertex_distance(candidate: &[Vec3], ground_truth: &[Vec3]) -> Result<f64> {
    ensure_dim("candidate vertices", ground_truth.len(), candidate.len())?;
    if candidate.is_empty() {
        return Err(Error::Empty("vertex set"));
    }
    let total: f64 = candidate
        .iter()
        .zip(ground_truth)
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / candidate.len() as f64)
}

/// Flattens `m` vertices into `3m` coordinates.
pub fn flatten(vertices: &[Vec3]) -> Vec<f64> {
    vertices.iter().flatten().copied().collect()
}

/// Candidate-set mean and per-candidate residuals, all flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct RankFeatures {
    pub mean: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
}

impl RankFeatures {
    /// Length of one `(X_mean ∥ x_res_i)` feature.
    pub fn feature_len(&self) -> usize {
        2 * self.mean.len()
    }

    pub fn feature(&self, i: usize) -> Vec<f64> {
        [self.mean.as_slice(), self.residuals[i].as_slice()].concat()
    }
}

/// Builds mean/residual features. Each mean coordinate is summed in sorted
/// order, so the mean is bit-identical under any reordering of candidates.
pub fn build_features(candidates: &[Vec<f64>]) -> Result<RankFeatures> {
    if candidates.len() < 2 {
        return Err(Error::Config(format!(
            "ranking needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let len = candidates[0].len();
    for c in candidates {
        ensure_dim("candidate coordinates", len, c.len())?;
    }
    let n = candidates.len() as f64;
    let mut column = Vec::with_capacity(candidates.len());
    let mean: Vec<f64> = (0..len)
        .map(|k| {
            column.clear();
            column.extend(candidates.iter().map(|c| c[k]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect();
    let residuals = candidates
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    Ok(RankFeatures { mean, residuals })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Temperature {
    /// Median of the distances in each candidate set.
    Median,
    Fixed(f64),
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Target distribution `g_i ∝ exp(−d_i / τ)`: lowest error, highest mass.
pub fn gt_distribution(distances: &[f64], temperature: Temperature) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::Empty("distance list"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distances"));
    }
    let tau = match temperature {
        Temperature::Fixed(t) => t,
        Temperature::Median => median(distances),
    };
    // a degenerate set (all distances zero) carries no preference
    let tau = if tau > 0.0 && tau.is_finite() {
        tau
    } else {
        1.0
    };
    let logits: Vec<f64> = distances.iter().map(|d| -d / tau).collect();
    Ok(softmax(&logits))
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `−Σ g·log softmax(p)`.
pub fn rank_loss(scores: &[f64], g: &[f64]) -> Result<f64> {
    ensure_dim("target distribution", scores.len(), g.len())?;
    if scores.is_empty() {
        return Err(Error::Empty("score list"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(-g
        .iter()
        .zip(scores)
        .map(|(gi, s)| gi * (s - lse))
        .sum::<f64>())
}

/// Analytic gradient of [`rank_loss`] with respect to the scores: `h − g`.
pub fn rank_loss_grad(scores: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("target distribution", scores.len(), g.len())?;
    Ok(softmax(scores).iter().zip(g).map(|(h, g)| h - g).collect())
}

/// Index of the highest score; ties go to the lowest index.
pub fn select(scores: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::NonFinite("scores"));
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::Empty("score list"))
}

/// Candidate indices by descending score (ties by index).
pub fn predicted_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Candidate indices by ascending distance (ties by index); position 0 is rank 1.
pub fn gt_order(distances: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankMetrics {
    pub k: usize,
    /// Percentage of the predicted top-k that is in the true top-k.
    pub precision: f64,
    pub iou: f64,
    /// Mean distance of the true top-k over that of the predicted top-k.
    pub error_ratio: f64,
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    order
        .iter()
        .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

/// Top-k agreement between a predicted and a ground-truth order, with `k`
/// given as a percentage of the candidate count (at least one).
pub fn rank_metrics(
    predicted: &[usize],
    truth: &[usize],
    distances: &[f64],
    k_percent: f64,
) -> Result<RankMetrics> {
    let n = truth.len();
    if n == 0 {
        return Err(Error::Empty("ranking"));
    }
    ensure_dim("predicted order", n, predicted.len())?;
    ensure_dim("distances", n, distances.len())?;
    if !is_permutation(predicted) || !is_permutation(truth) {
        return Err(Error::Config("orders must be permutations of 0..N".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!(
            "k must be a percentage in (0, 100], got {k_percent}"
        )));
    }
    let k = ((k_percent / 100.0 * n as f64).round() as usize).clamp(1, n);
    let mut in_truth = vec![false; n];
    truth[..k].iter().for_each(|&i| in_truth[i] = true);
    let hits = predicted[..k].iter().filter(|&&i| in_truth[i]).count();
    let mean_d = |set: &[usize]| set.iter().map(|&i| distances[i]).sum::<f64>() / set.len() as f64;
    let pred_d = mean_d(&predicted[..k]);
    Ok(RankMetrics {
        k,
        precision: 100.0 * hits as f64 / k as f64,
        iou: hits as f64 / (2 * k - hits) as f64,
        error_ratio: if pred_d > 0.0 {
            mean_d(&truth[..k]) / pred_d
        } else {
            1.0
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    /// Flattened frontal coordinates per candidate (3m).
    pub coords: usize,
    pub cond_dim: usize,
    /// Hidden widths of the scorer; a final layer maps to one score.
    pub hidden: Vec<usize>,
    /// Multiplier applied to coordinates (meters → scorer units).
    pub feature_scale: f64,
    pub temperature: Temperature,
}

impl RankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coords == 0
            || self.cond_dim == 0
            || self.hidden.is_empty()
            || self.hidden.contains(&0)
        {
            return Err(Error::Config(
                "rank net needs positive coordinate, condition and hidden widths".into(),
            ));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config("feature_scale must be positive".into()));
        }
        if let Temperature::Fixed(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config("fixed temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One training list: condition, candidate coordinates, and their distances
/// to the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RankExample {
    pub cond: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RankNet {
    pub config: RankConfig,
    pub params: ParamStore<f32>,
}

const REFERENCE: &str = "ref.mean";

impl RankNet {
    /// `reference` is subtracted from the candidate mean before scoring so the
    /// shared head geometry does not swamp per-input variation.
    pub fn new(config: RankConfig, reference: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        ensure_dim("rank reference", config.coords, reference.len())?;
        let params = init_params(&config, reference, seed)?;
        Ok(RankNet { config, params })
    }

    fn inputs<T: Real>(
        &self,
        g: &mut Graph<T>,
        examples: &[(&[f64], &[Vec<f64>])],
    ) -> Result<(Var, Var, Var, usize)> {
        let c = &self.config;
        let n = examples[0].1.len();
        let reference = self
            .params
            .get(REFERENCE)
            .expect("reference buffer")
            .to_f64();
        let gain = (c.cond_dim as f64).sqrt();
        let (mut means, mut res, mut conds) = (Vec::new(), Vec::new(), Vec::new());
        for (cond, cands) in examples {
            ensure_dim("candidate count", n, cands.len())?;
            ensure_dim("rank condition", c.cond_dim, cond.len())?;
            let f = build_features(cands)?;
            ensure_dim("candidate coordinates", c.coords, f.mean.len())?;
            means.extend(
                f.mean
                    .iter()
                    .zip(&reference)
                    .map(|(m, r)| (m - r) * c.feature_scale),
            );
            for r in &f.residuals {
                res.extend(r.iter().map(|v| v * c.feature_scale));
            }
            conds.extend(cond.iter().map(|v| v * gain));
        }
        let b = examples.len();
        let mean = g.constant(Tensor::from_f64(vec![b, c.coords], &means)?)?;
        let res = g.constant(Tensor::from_f64(vec![b, n, c.coords], &res)?)?;
        let cond = g.constant(Tensor::from_f64(vec![b, c.cond_dim], &conds)?)?;
        Ok((mean, res, cond, n))
    }

    /// One score per candidate.
    pub fn scores(&self, candidates: &[Vec<f64>], cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::<f32>::new();
        let (mean, res, c, _) = self.inputs(&mut g, &[(cond, candidates)])?;
        let s = forward(&self.config, &mut g, &self.params, mean, res, c, false)?;
        Ok(g.value(s).to_f64())
    }

    /// One Adam step of listwise cross-entropy over a batch of lists that
    /// all hold the same number of candidates.
    pub fn train_step(&mut self, adam: &mut AdamState<f32>, batch: &[&RankExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("rank batch"));
        }
        let pairs: Vec<(&[f64], &[Vec<f64>])> = batch
            .iter()
            .map(|e| (e.cond.as_slice(), e.candidates.as_slice()))
            .collect();
        let mut target = Vec::new();
        for e in batch {
            ensure_dim("distances", e.candidates.len(), e.distances.len())?;
            target.extend(gt_distribution(&e.distances, self.config.temperature)?);
        }
        self.params.zero_grads();
        let mut g = Graph::<f32>::new();
        let (mean, res, c, n) = self.inputs(&mut g, &pairs)?;
        let s = forward(&self.config, &mut g, &self.params, mean, res, c, true)?;
        let loss = g.softmax_cross_entropy(s, Tensor::from_f64(vec![batch.len(), n], &target)?)?;
        let value = g.value(loss).data()[0] as f64;
        g.backward(loss, &mut self.params)?;
        adam.step(&mut self.params)?;
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, serde_json::Value::Null)
    }

    /// Saves with caller metadata (seed, data provenance) embedded in the header.
    pub fn save_with_meta(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let extra = serde_json::json!({ "kind": "rank", "config": self.config, "meta": meta });
        self.params.save(path, extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, extra) = ParamStore::<f32>::load(path)?;
        if extra.get("kind").and_then(|k| k.as_str()) != Some("rank") {
            return Err(Error::Config(format!(
                "{} is not a rank checkpoint",
                path.display()
            )));
        }
        let config: RankConfig = serde_json::from_value(extra["config"].clone())?;
        config.validate()?;
        let expected = init_params::<f32>(&config, &vec![0.0; config.coords], 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "checkpoint parameter `{name}` missing or misshaped"
                    )))
                }
            }
        }
        Ok(RankNet { config, params })
    }
}

/// Trains on shuffled minibatches, cycling through `examples`.
pub fn train_rank(
    net: &mut RankNet,
    examples: &[RankExample],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if examples.is_empty() || batch == 0 {
        return Err(Error::Empty("rank training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let picks: Vec<&RankExample> = (0..batch)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let loss = net.train_step(&mut adam, &picks)?;
        on_step(step + 1, loss);
        losses.push(loss);
    }
    Ok(losses)
}

fn init_params<T: Real>(c: &RankConfig, reference: &[f64], seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Result<Tensor<T>> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Tensor::<f64>::from_f64(shape, &data)?.cast())
    };
    let h0 = c.hidden[0];
    let fan_in = 2 * c.coords + c.cond_dim;
    // first layer split: shared rows (mean ∥ condition) and residual rows
    store.insert(
        "l0.w_shared",
        uniform(vec![c.coords + c.cond_dim, h0], fan_in)?,
    )?;
    store.insert("l0.w_res", uniform(vec![c.coords, h0], fan_in)?)?;
    store.insert("l0.b", Tensor::zeros(&[h0]))?;
    let mut widths = c.hidden.clone();
    widths.push(1);
    for i in 0..c.hidden.len() {
        store.insert(format!("ln{i}.g"), Tensor::full(&[widths[i]], T::one()))?;
        store.insert(format!("ln{i}.b"), Tensor::zeros(&[widths[i]]))?;
        store.insert(
            format!("l{}.w", i + 1),
            uniform(vec![widths[i], widths[i + 1]], widths[i])?,
        )?;
        store.insert(format!("l{}.b", i + 1), Tensor::zeros(&[widths[i + 1]]))?;
    }
    store.insert(
        REFERENCE,
        Tensor::<f64>::from_f64(vec![c.coords], reference)?.cast(),
    )?;
    Ok(store)
}

/// Scores `[B, N]` from centered means `[B, 3m]`, residuals `[B, N, 3m]` and
/// conditions `[B, cond]`. The first layer equals one linear map on the
/// concatenation `(mean ∥ residual ∥ condition)`, evaluated with the shared
/// part computed once per list.
pub fn forward<T: Real>(
    c: &RankConfig,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mean: Var,
    res: Var,
    cond: Var,
    trainable: bool,
) -> Result<Var> {
    let p = |g: &mut Graph<T>, name: &str| -> Result<Var> {
        Ok(if trainable {
            g.param(store, name)?
        } else {
            g.frozen(store, name)?
        })
    };
    let b = g.shape(res)[0];
    let n = g.shape(res)[1];
    let shared_in = g.concat(mean, cond, 1)?;
    let ws = p(g, "l0.w_shared")?;
    let b0 = p(g, "l0.b")?;
    let shared = g.linear(shared_in, ws, Some(b0))?;
    let wr = p(g, "l0.w_res")?;
    let per = g.linear(res, wr, None)?;
    let mut h = g.add_bias_mid(per, shared)?;
    for i in 0..c.hidden.len() {
        let gain = p(g, &format!("ln{i}.g"))?;
        let bias = p(g, &format!("ln{i}.b"))?;
        h = g.layer_norm(h, gain, bias, 1e-5)?;
        h = g.gelu(h)?;
        let w = p(g, &format!("l{}.w", i + 1))?;
        let bb = p(g, &format!("l{}.b", i + 1))?;
        h = g.linear(h, w, Some(bb))?;
    }
    Ok(g.reshape(h, &[b, n])?)
}

/// `rank-report` rows: selected index, its distance, the mean and the
/// minimum candidate distance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReportRow {
    pub input: String,
    pub selected: usize,
    pub selected_distance: f64,
    pub mean_distance: f64,
    pub ideal_distance: f64,
}

impl RankReportRow {
    pub fn new(input: impl Into<String>, scores: &[f64], distances: &[f64]) -> Result<Self> {
        ensure_dim("distances", scores.len(), distances.len())?;
        let selected = select(scores)?;
        Ok(RankReportRow {
            input: input.into(),
            selected,
            selected_distance: distances[selected],
            mean_distance: distances.iter().sum::<f64>() / distances.len() as f64,
            ideal_distance: distances.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

pub fn rank_report_csv(rows: &[RankReportRow]) -> String {
    let mut s =
        String::from("input,selected_index,selected_distance_m,mean_distance_m,ideal_distance_m\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.input, r.selected, r.selected_distance, r.mean_distance, r.ideal_distance
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_examples() {
        assert_eq!(select(&[1.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(select(&[2.0, 2.0, 2.0]).unwrap(), 0);
        assert_eq!(select(&[0.0, 5.0, 5.0]).unwrap(), 1);
        assert!(select(&[]).is_err());
        assert!(select(&[f64::NAN]).is_err());
    }

    #[test]
    fn distribution_examples() {
        let g = gt_distribution(&[0.3; 5], Temperature::Median).unwrap();
        assert!(g.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let tau = 0.7;
        let g = gt_distribution(&[0.0, tau * 3f64.ln()], Temperature::Fixed(tau)).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-12 && (g[1] - 0.25).abs() < 1e-12);
        let g = gt_distribution(&[0.0, 0.0], Temperature::Median).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let g = [0.1, 0.6, 0.3];
        let scores: Vec<f64> = g.iter().map(|v: &f64| v.ln() + 2.0).collect();
        let entropy: f64 = -g.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((rank_loss(&scores, &g).unwrap() - entropy).abs() < 1e-12);
        let n = 7;
        let u = vec![1.0 / n as f64; n];
        assert!((rank_loss(&[0.4; 7], &u).unwrap() - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let d: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let order: Vec<usize> = (0..10).collect();
        let m = rank_metrics(&order, &order, &d, 20.0).unwrap();
        assert_eq!(
            (m.k, m.precision, m.iou, m.error_ratio),
            (2, 100.0, 1.0, 1.0)
        );
        let rev: Vec<usize> = (0..10).rev().collect();
        assert_eq!(rank_metrics(&rev, &order, &d, 10.0).unwrap().precision, 0.0);
        assert!(rank_metrics(&[0, 0, 1], &[0, 1, 2], &[1.0; 3], 10.0).is_err());
    }

    #[test]
    fn feature_examples() {
        let v = vec![1.0, -2.0, 0.5];
        let f = build_features(&[v.clone(), v.clone()]).unwrap();
        assert_eq!(f.mean, v);
        assert!(f.residuals.iter().flatten().all(|&r| r == 0.0));
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let f = build_features(&[v.clone(), neg.clone()]).unwrap();
        assert!(f.mean.iter().all(|&m| m == 0.0));
        assert_eq!(f.residuals, vec![v, neg]);
        assert_eq!(f.feature_len(), 6);
        assert!(build_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(vertex_distance(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec3> = a.iter().map(|v| [v[0] + 0.001, v[1], v[2]]).collect();
        assert!((vertex_distance(&shifted, &a).unwrap() - 0.001).abs() < 1e-15);
        assert!(vertex_distance(&a[..1], &a).is_err());
    }
}

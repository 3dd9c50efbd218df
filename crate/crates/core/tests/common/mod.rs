//! Oracles shared by the integration tests. Everything here is written
//! independently of the library's filtering and search code.

#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use trustdyn::estimation::{classify_over_under, em_fit, Predictor, StateSeries, StateSpaceModel};
use trustdyn::pathmodel::{with_self_lags, PanelDataset, PathDiagram, Series};
use trustdyn::structsearch::{Criterion, SearchConfig};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random stable model with strictly positive noise.
pub fn random_model(rng: &mut ChaCha8Rng, n: usize, p: usize, m: usize) -> StateSpaceModel {
    let mut mat = |r: usize, c: usize, scale: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale));
    let transition = mat(n, n, 0.9 / n as f64);
    let state_input = mat(n, m, 1.0);
    let observation = mat(p, n, 1.5);
    let obs_input = mat(p, m, 1.0);
    let state_intercept = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let obs_intercept = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
    let process_noise = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0));
    let obs_noise = DVector::from_fn(p, |_, _| rng.random_range(0.05..1.0));
    let initial_mean = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
    let initial_cov = &a * a.transpose() + DMatrix::identity(n, n) * 0.2;
    StateSpaceModel {
        transition,
        state_input,
        state_intercept,
        process_noise,
        observation,
        obs_input,
        obs_intercept,
        obs_noise,
        initial_mean,
        initial_cov,
    }
}

pub fn random_series(rng: &mut ChaCha8Rng, p: usize, m: usize, len: usize) -> StateSeries {
    let normal = Normal::new(0.0, 1.0).unwrap();
    StateSeries {
        inputs: (0..len)
            .map(|_| DVector::from_fn(m, |_, _| normal.sample(rng)))
            .collect(),
        outputs: (0..len)
            .map(|_| DVector::from_fn(p, |_, _| normal.sample(rng)))
            .collect(),
    }
}

/// Every state and observation written as an affine map of the independent
/// Gaussian vector `z = (x_(-1), w_0.., v_0..)`.
pub struct DenseJoint {
    pub z_mean: DVector<f64>,
    pub z_cov: DMatrix<f64>,
    /// `x_t = state_map[t] z + state_offset[t]`
    pub state_map: Vec<DMatrix<f64>>,
    pub state_offset: Vec<DVector<f64>>,
    pub obs_map: Vec<DMatrix<f64>>,
    pub obs_offset: Vec<DVector<f64>>,
}

impl DenseJoint {
    pub fn new(model: &StateSpaceModel, data: &StateSeries) -> Self {
        let n = model.transition.nrows();
        let p = model.observation.nrows();
        let len = data.outputs.len();
        let dim = n + len * (n + p);
        let mut z_mean = DVector::zeros(dim);
        let mut z_cov = DMatrix::zeros(dim, dim);
        z_mean.rows_mut(0, n).copy_from(&model.initial_mean);
        z_cov.view_mut((0, 0), (n, n)).copy_from(&model.initial_cov);
        for t in 0..len {
            for i in 0..n {
                let k = n + t * n + i;
                z_cov[(k, k)] = model.process_noise[i];
            }
            for r in 0..p {
                let k = n + len * n + t * p + r;
                z_cov[(k, k)] = model.obs_noise[r];
            }
        }
        let mut prev_map = DMatrix::zeros(n, dim);
        prev_map.view_mut((0, 0), (n, n)).fill_with_identity();
        let mut prev_off = DVector::zeros(n);
        let mut out = Self {
            z_mean,
            z_cov,
            state_map: Vec::new(),
            state_offset: Vec::new(),
            obs_map: Vec::new(),
            obs_offset: Vec::new(),
        };
        for t in 0..len {
            let u = &data.inputs[t];
            let mut map = &model.transition * &prev_map;
            for i in 0..n {
                map[(i, n + t * n + i)] += 1.0;
            }
            let off = &model.transition * &prev_off + &model.state_input * u + &model.state_intercept;
            let mut omap = &model.observation * &map;
            for r in 0..p {
                omap[(r, n + len * n + t * p + r)] += 1.0;
            }
            let ooff = &model.observation * &off + &model.obs_input * u + &model.obs_intercept;
            out.state_map.push(map.clone());
            out.state_offset.push(off.clone());
            out.obs_map.push(omap);
            out.obs_offset.push(ooff);
            prev_map = map;
            prev_off = off;
        }
        out
    }

    fn stacked_obs(&self, upto: usize) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.obs_offset.first().map_or(0, |o| o.len());
        let dim = self.z_mean.len();
        let mut map = DMatrix::zeros(upto * p, dim);
        let mut off = DVector::zeros(upto * p);
        for t in 0..upto {
            map.view_mut((t * p, 0), (p, dim)).copy_from(&self.obs_map[t]);
            off.rows_mut(t * p, p).copy_from(&self.obs_offset[t]);
        }
        (map, off)
    }

    /// Log density of all observations.
    pub fn log_likelihood(&self, data: &StateSeries) -> f64 {
        let len = data.outputs.len();
        let (map, off) = self.stacked_obs(len);
        if map.nrows() == 0 {
            return 0.0;
        }
        let mean = &map * &self.z_mean + off;
        let cov = &map * &self.z_cov * map.transpose();
        let y = DVector::from_iterator(map.nrows(), data.outputs.iter().flat_map(|v| v.iter().copied()));
        let chol = cov.cholesky().expect("joint covariance is positive definite");
        let e = y - mean;
        let sol = chol.solve(&e);
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        -0.5 * (e.len() as f64 * LN_2PI + logdet + e.dot(&sol))
    }

    /// `E[x_t | y_0 .. y_(k-1)]` by Gaussian conditioning.
    pub fn state_mean(&self, data: &StateSeries, t: usize, k: usize) -> DVector<f64> {
        let prior = &self.state_map[t] * &self.z_mean + &self.state_offset[t];
        if k == 0 {
            return prior;
        }
        let (map, off) = self.stacked_obs(k);
        let y_mean = &map * &self.z_mean + off;
        let y_cov = &map * &self.z_cov * map.transpose();
        let cross = &self.state_map[t] * &self.z_cov * map.transpose();
        let y = DVector::from_iterator(map.nrows(), data.outputs[..k].iter().flat_map(|v| v.iter().copied()));
        let gain = y_cov.cholesky().expect("positive definite").solve(&(y - y_mean));
        prior + cross * gain
    }
}

/// Naive expanding-window cross-validation: refit at each origin, forecast
/// the next step one participant at a time.
pub fn naive_cv(diagram: &PathDiagram, panel: &PanelDataset, config: &SearchConfig) -> Option<(f64, f64)> {
    let target = panel.var_index(&diagram.target).unwrap();
    let mut accs = Vec::new();
    let mut rmses = Vec::new();
    for origin in config.min_train_origin..panel.min_len() {
        let train = PanelDataset::new(
            panel.variables.clone(),
            panel.series.iter().map(|s| cut(s, origin)).collect(),
        )
        .unwrap();
        let Ok(fit) = em_fit(diagram, &train, &config.fit) else {
            continue;
        };
        let predictor = Predictor::new(&fit, config.threshold).unwrap();
        let mut hits = 0.0;
        let mut sq = 0.0;
        for s in &panel.series {
            let recs = predictor
                .predict_series(&panel.variables, &cut(s, origin + 1), 0)
                .unwrap();
            let rec = recs.iter().find(|r| r.step == origin).unwrap();
            let actual = s.columns[target][origin].unwrap();
            if rec.predicted_label == classify_over_under(actual, config.threshold).unwrap() {
                hits += 1.0;
            }
            sq += (rec.predicted_value - actual).powi(2);
        }
        let n = panel.series.len() as f64;
        accs.push(hits / n);
        rmses.push((sq / n).sqrt());
    }
    if accs.is_empty() {
        return None;
    }
    let k = accs.len() as f64;
    Some((accs.iter().sum::<f64>() / k, rmses.iter().sum::<f64>() / k))
}

fn cut(s: &Series, len: usize) -> Series {
    Series {
        id: s.id.clone(),
        columns: s.columns.iter().map(|c| c[..len].to_vec()).collect(),
    }
}

/// Score of one lag subset under the configured criterion, lower is better.
pub fn naive_score(
    base: &PathDiagram,
    panel: &PanelDataset,
    lags: &BTreeSet<usize>,
    config: &SearchConfig,
) -> Option<f64> {
    let d = with_self_lags(base, &config.search_variable, lags).ok()?;
    match config.criterion {
        Criterion::Aic => em_fit(&d, panel, &config.fit).ok().map(|f| f.aic),
        Criterion::CvAccuracy => naive_cv(&d, panel, config).map(|(acc, _)| -acc),
        Criterion::CvRmse => naive_cv(&d, panel, config).map(|(_, rmse)| rmse),
    }
}

/// Brute force over every bitmask, keeping the first best in
/// (score, size, sorted lag list) order.
pub fn brute_force_best(
    base: &PathDiagram,
    panel: &PanelDataset,
    config: &SearchConfig,
) -> Option<(BTreeSet<usize>, f64)> {
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for mask in 1u32..(1 << config.eta) {
        let lags: Vec<usize> = (0..config.eta).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect();
        let set: BTreeSet<usize> = lags.iter().copied().collect();
        let Some(score) = naive_score(base, panel, &set, config) else {
            continue;
        };
        let key = (score, lags.len(), lags);
        let better = match &best {
            None => true,
            Some(b) => key.0 < b.0 || (key.0 == b.0 && (key.1 < b.1 || (key.1 == b.1 && key.2 < b.2))),
        };
        if better {
            best = Some(key);
        }
    }
    best.map(|(score, _, lags)| {
        let score = if config.criterion == Criterion::CvAccuracy {
            -score
        } else {
            score
        };
        (lags.into_iter().collect(), score)
    })
}

/// Coefficients of the trust model used to generate recovery data.
#[derive(Debug, Clone, Copy)]
pub struct KnownModel {
    pub aip_trust: f64,
    pub cue_trust: f64,
    pub trust_ar: f64,
    pub aip_ou: f64,
    pub hp_ou: f64,
    pub trust_ou: f64,
    pub cue_ou: f64,
    pub trust_rel: f64,
    pub ou_rel: f64,
    pub trust_sd: f64,
    pub ou_sd: f64,
    pub rel_sd: f64,
}

pub const KNOWN_MODEL: KnownModel = KnownModel {
    aip_trust: 0.3,
    cue_trust: 0.2,
    trust_ar: 0.6,
    aip_ou: -1.0,
    hp_ou: 0.8,
    trust_ou: 2.0,
    cue_ou: -0.4,
    trust_rel: 1.5,
    ou_rel: 0.3,
    trust_sd: 0.1,
    ou_sd: 0.2,
    rel_sd: 0.2,
};

/// Continuous panel generated from the structural equations directly.
/// Column order: AIP, HP, E_AIP, Reliance, Cue, OverUnder.
pub fn simulate_known(truth: &KnownModel, n: usize, len: usize, seed: u64) -> PanelDataset {
    let mut r = rng(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut series = Vec::with_capacity(n);
    for i in 0..n {
        let hp: f64 = r.random_range(0.4..0.8);
        // The pre-sample state follows the estimator's default prior N(0.5, 1).
        let mut trust = 0.5 + z.sample(&mut r);
        let mut cols: Vec<Vec<Option<f64>>> = (0..6).map(|_| Vec::with_capacity(len)).collect();
        for t in 0..len {
            let aip: f64 = if (t / 5) % 2 == 0 { 0.9 } else { 0.3 } + r.random_range(-0.05..0.05);
            let cue = if r.random_bool(0.3) { 1.0 } else { 0.0 };
            trust = truth.aip_trust * aip
                + truth.cue_trust * cue
                + truth.trust_ar * trust
                + truth.trust_sd * z.sample(&mut r);
            let ou = truth.aip_ou * aip
                + truth.hp_ou * hp
                + truth.trust_ou * trust
                + truth.cue_ou * cue
                + truth.ou_sd * z.sample(&mut r);
            let rel = truth.trust_rel * trust + truth.ou_rel * ou + truth.rel_sd * z.sample(&mut r);
            for (c, v) in [aip, hp, trust, rel, cue, ou].into_iter().enumerate() {
                cols[c].push(Some(v));
            }
        }
        series.push(Series {
            id: format!("p{i}"),
            columns: cols,
        });
    }
    let names = ["AIP", "HP", "E_AIP", "Reliance", "Cue", "OverUnder"];
    PanelDataset::new(names.iter().map(|s| s.to_string()).collect(), series).unwrap()
}

/// The trust diagram with unbounded continuous observed variables, so
/// Gaussian recovery data passes the domain checks.
pub const KNOWN_DIAGRAM: &str = "\
var AIP observed continuous -10 10
var HP observed continuous -10 10
var Cue observed continuous -10 10
var E_AIP latent continuous -10 10
var OverUnder observed continuous -100 100
var Reliance observed continuous -100 100
target OverUnder
E_AIP ~ AIP@0
E_AIP ~ Cue@0
E_AIP ~ E_AIP@1
OverUnder ~ AIP@0
OverUnder ~ HP@0
OverUnder ~ E_AIP@0
OverUnder ~ Cue@0
Reliance ~ E_AIP@0
Reliance ~ OverUnder@0
";

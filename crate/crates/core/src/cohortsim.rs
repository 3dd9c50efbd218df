//! Synthetic participant cohorts for the drone and driving task designs.
//!
//! Each simulated participant is a learning agent whose trust tracks the
//! AI's observed success rate. Ground-truth labels compare that trust with
//! the AI's true success probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pathmodel::{PanelDataset, Series, AIP, HP, PANEL_VARIABLES, TRUST};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub length: usize,
    pub aip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CuePolicy {
    None,
    OnDetectedOvertrust,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub n_participants: usize,
    pub phases: Vec<Phase>,
    /// Human success probabilities are drawn uniformly from
    /// `hp_mean ± hp_spread`.
    pub hp_mean: f64,
    pub hp_spread: f64,
    pub initial_trust: f64,
    pub cue_policy: CuePolicy,
    /// Share of participants (the lowest indices) who receive cues.
    pub fraction_with_cues: f64,
    pub seed: u64,
}

pub const HIGH_AIP: f64 = 0.9;
pub const LOW_AIP: f64 = 0.3;

impl CohortConfig {
    /// 194 participants, 30 checkpoints: 15 high-AIP then 15 low-AIP, with
    /// adaptive cues for half of the cohort.
    pub fn drone(seed: u64) -> Self {
        Self {
            n_participants: 194,
            phases: vec![
                Phase {
                    length: 15,
                    aip: HIGH_AIP,
                },
                Phase {
                    length: 15,
                    aip: LOW_AIP,
                },
            ],
            hp_mean: 0.6,
            hp_spread: 0.1,
            initial_trust: 0.5,
            cue_policy: CuePolicy::OnDetectedOvertrust,
            fraction_with_cues: 96.0 / 192.0,
            seed,
        }
    }

    /// 49 participants, 22 scenes of 4 steps: 7 high, 9 low, 6 high.
    pub fn driving(seed: u64) -> Self {
        Self {
            n_participants: 49,
            phases: vec![
                Phase {
                    length: 7 * 4,
                    aip: HIGH_AIP,
                },
                Phase {
                    length: 9 * 4,
                    aip: LOW_AIP,
                },
                Phase {
                    length: 6 * 4,
                    aip: HIGH_AIP,
                },
            ],
            hp_mean: 0.6,
            hp_spread: 0.1,
            initial_trust: 0.5,
            cue_policy: CuePolicy::None,
            fraction_with_cues: 0.0,
            seed,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.phases.iter().map(|p| p.length).sum()
    }

    /// Step indices at which a new phase starts (excluding 0).
    pub fn phase_boundaries(&self) -> Vec<usize> {
        self.phases
            .iter()
            .scan(0, |acc, p| {
                *acc += p.length;
                Some(*acc)
            })
            .take(self.phases.len().saturating_sub(1))
            .collect()
    }

    pub fn n_with_cues(&self) -> usize {
        match self.cue_policy {
            CuePolicy::None => 0,
            CuePolicy::OnDetectedOvertrust => (self.fraction_with_cues * self.n_participants as f64).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.phases.is_empty() || self.phases.iter().any(|p| p.length == 0 || !unit(p.aip)) {
            return Err(Error::Config("phases need length >= 1 and AIP in [0, 1]".into()));
        }
        if !unit(self.hp_mean) || !(self.hp_spread >= 0.0) {
            return Err(Error::Config("HP mean must lie in [0, 1], spread >= 0".into()));
        }
        if !unit(self.initial_trust) || !unit(self.fraction_with_cues) {
            return Err(Error::Config(
                "initial trust and cue fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn aip_at(&self, t: usize) -> f64 {
        let mut end = 0;
        for p in &self.phases {
            end += p.length;
            if t < end {
                return p.aip;
            }
        }
        self.phases.last().map_or(0.0, |p| p.aip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    pub learning_rate: f64,
    pub cue_rate: f64,
    pub decision_noise: f64,
    pub label_margin: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.3,
            cue_rate: 0.7,
            decision_noise: 0.05,
            label_margin: 0.1,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate <= 1.0)
            || !(self.cue_rate >= 0.0 && self.cue_rate <= 1.0)
            || !(self.decision_noise >= 0.0 && self.decision_noise < 0.5)
            || !(self.label_margin > 0.0 && self.label_margin < 0.5)
        {
            return Err(Error::Config(format!("agent parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub trust: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    pub reliance: bool,
    /// Whether the AI was correct on this step.
    pub outcome: bool,
}

/// One interaction: decide on reliance with the current trust, observe the
/// AI's result, update trust, then apply a calibration cue if shown.
pub fn agent_step<R: Rng + ?Sized>(
    state: AgentState,
    aip: f64,
    hp: f64,
    cue: bool,
    params: &AgentParams,
    rng: &mut R,
) -> StepOutcome {
    let flip = rng.random::<f64>() < params.decision_noise;
    let reliance = (state.trust >= hp) ^ flip;
    let outcome = rng.random::<f64>() < aip;
    let signal = if outcome { 1.0 } else { 0.0 };
    let mut trust = state.trust + params.learning_rate * (signal - state.trust);
    if cue {
        trust += params.cue_rate * (aip - trust);
    }
    StepOutcome {
        state: AgentState {
            trust: trust.clamp(0.0, 1.0),
        },
        reliance,
        outcome,
    }
}

/// Reliance-equation label: 1 over-trust, -1 under-trust, 0 calibrated.
pub fn label_over_under(trust: f64, aip: f64, margin: f64) -> i8 {
    if trust > aip + margin {
        1
    } else if trust < aip - margin {
        -1
    } else {
        0
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-participant seed: the cohort seed XOR the hashed participant index.
pub fn participant_seed(seed: u64, index: usize) -> u64 {
    seed ^ mix(index as u64)
}

fn simulate_participant(config: &CohortConfig, params: &AgentParams, index: usize) -> Series {
    let mut rng = ChaCha8Rng::seed_from_u64(participant_seed(config.seed, index));
    let hp = if config.hp_spread > 0.0 {
        let lo = (config.hp_mean - config.hp_spread).max(0.0);
        let hi = (config.hp_mean + config.hp_spread).min(1.0);
        rng.random_range(lo..=hi)
    } else {
        config.hp_mean
    };
    let gets_cues = index < config.n_with_cues();
    let n = config.n_steps();
    let mut columns = vec![Vec::with_capacity(n); PANEL_VARIABLES.len()];
    let mut state = AgentState {
        trust: config.initial_trust,
    };
    let mut last_label = 0i8;
    for t in 0..n {
        let aip = config.aip_at(t);
        let cue = gets_cues && last_label == 1;
        let step = agent_step(state, aip, hp, cue, params, &mut rng);
        state = step.state;
        let label = label_over_under(state.trust, aip, params.label_margin);
        last_label = label;
        // Column order follows PANEL_VARIABLES.
        let row = [
            aip,
            hp,
            state.trust,
            if step.reliance { 1.0 } else { 0.0 },
            if cue { 1.0 } else { 0.0 },
            f64::from(label),
        ];
        for (col, v) in columns.iter_mut().zip(row) {
            col.push(Some(v));
        }
    }
    Series {
        id: index.to_string(),
        columns,
    }
}

pub fn generate_cohort(config: &CohortConfig, params: &AgentParams) -> Result<PanelDataset> {
    config.validate()?;
    params.validate()?;
    let series = (0..config.n_participants)
        .map(|i| simulate_participant(config, params, i))
        .collect();
    PanelDataset::new(PANEL_VARIABLES.iter().map(|s| s.to_string()).collect(), series)
}

pub fn gen_drone_cohort(config: &CohortConfig, params: &AgentParams) -> Result<PanelDataset> {
    generate_cohort(config, params)
}

pub fn gen_driving_cohort(config: &CohortConfig, params: &AgentParams) -> Result<PanelDataset> {
    generate_cohort(config, params)
}

pub const AUGMENT_NOISE_SD: f64 = 0.02;

/// Grow a panel `factor`-fold: the originals (labels recomputed) followed by
/// resampled participants with Gaussian noise on AIP, HP and trust.
pub fn augment_panel<R: Rng + ?Sized>(
    panel: &PanelDataset,
    factor: usize,
    margin: f64,
    rng: &mut R,
) -> Result<PanelDataset> {
    if factor == 0 {
        return Err(Error::Config("augmentation factor must be >= 1".into()));
    }
    let col = |name: &str| {
        panel
            .var_index(name)
            .ok_or_else(|| Error::Panel(format!("panel lacks column `{name}`")))
    };
    let (aip, hp, trust) = (col(AIP)?, col(HP)?, col(TRUST)?);
    let label_col = col(crate::pathmodel::OVER_UNDER)?;
    let relabel = |s: &mut Series| {
        for t in 0..s.len() {
            if let (Some(tr), Some(a)) = (s.columns[trust][t], s.columns[aip][t]) {
                s.columns[label_col][t] = Some(f64::from(label_over_under(tr, a, margin)));
            }
        }
    };

    let mut out: Vec<Series> = panel.series.clone();
    out.iter_mut().for_each(relabel);
    if panel.series.is_empty() {
        return PanelDataset::new(panel.variables.clone(), out);
    }
    let noise = Normal::new(0.0, AUGMENT_NOISE_SD).expect("positive sd");
    for copy in 1..factor {
        for k in 0..panel.series.len() {
            let pick = rng.random_range(0..panel.series.len());
            let mut s = panel.series[pick].clone();
            // Draws are with replacement, so the slot number keeps ids unique.
            s.id = format!("{}_a{copy}_{k}", s.id);
            for c in [aip, hp, trust] {
                for v in s.columns[c].iter_mut().flatten() {
                    *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
            relabel(&mut s);
            out.push(s);
        }
    }
    PanelDataset::new(panel.variables.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathmodel::{CUE, OVER_UNDER, RELIANCE};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn full_overwrite_and_full_correction() {
        let p = AgentParams {
            learning_rate: 1.0,
            cue_rate: 1.0,
            decision_noise: 0.0,
            label_margin: 0.1,
        };
        // AIP = 1 forces a successful outcome.
        let s = agent_step(AgentState { trust: 0.2 }, 1.0, 0.5, false, &p, &mut rng());
        assert_eq!(s.state.trust, 1.0);
        assert!(s.outcome);
        let s = agent_step(AgentState { trust: 0.95 }, 0.3, 0.5, true, &p, &mut rng());
        assert!((s.state.trust - 0.3).abs() < 1e-15);
    }

    #[test]
    fn deterministic_reliance_threshold() {
        let p = AgentParams {
            decision_noise: 0.0,
            ..AgentParams::default()
        };
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            assert!(agent_step(AgentState { trust: 0.8 }, 0.5, 0.5, false, &p, &mut r).reliance);
            assert!(!agent_step(AgentState { trust: 0.4 }, 0.5, 0.5, false, &p, &mut r).reliance);
        }
    }

    #[test]
    fn labels() {
        assert_eq!(label_over_under(0.9, 0.3, 0.1), 1);
        assert_eq!(label_over_under(0.3, 0.9, 0.1), -1);
        assert_eq!(label_over_under(0.5, 0.5, 0.1), 0);
    }

    #[test]
    fn default_shapes() {
        let d = gen_drone_cohort(&CohortConfig::drone(7), &AgentParams::default()).unwrap();
        assert_eq!(d.n_participants(), 194);
        assert!(d.series.iter().all(|s| s.len() == 30));
        let c = CohortConfig::driving(7);
        assert_eq!(c.phase_boundaries(), vec![28, 64]);
        let v = gen_driving_cohort(&c, &AgentParams::default()).unwrap();
        assert_eq!(v.n_participants(), 49);
        assert!(v.series.iter().all(|s| s.len() == 88));
        assert_eq!(CohortConfig::drone(0).phase_boundaries(), vec![15]);
    }

    #[test]
    fn pinned_trust_has_no_overtrust_in_high_phase() {
        let mut c = CohortConfig::drone(3);
        c.initial_trust = HIGH_AIP;
        let p = AgentParams {
            learning_rate: 0.0,
            decision_noise: 0.0,
            ..AgentParams::default()
        };
        let panel = gen_drone_cohort(&c, &p).unwrap();
        let lab = panel.var_index(OVER_UNDER).unwrap();
        for s in &panel.series {
            assert!(s.columns[lab][..15].iter().all(|v| *v == Some(0.0)));
        }
    }

    #[test]
    fn values_in_range_and_labels_consistent() {
        let p = AgentParams::default();
        let panel = gen_drone_cohort(&CohortConfig::drone(11), &p).unwrap();
        let idx = |n| panel.var_index(n).unwrap();
        for s in &panel.series {
            for t in 0..s.len() {
                let v = |n| s.columns[idx(n)][t].unwrap();
                for n in [AIP, HP, TRUST] {
                    assert!((0.0..=1.0).contains(&v(n)));
                }
                for n in [RELIANCE, CUE] {
                    assert!(v(n) == 0.0 || v(n) == 1.0);
                }
                assert_eq!(
                    v(OVER_UNDER),
                    f64::from(label_over_under(v(TRUST), v(AIP), p.label_margin))
                );
            }
        }
    }

    #[test]
    fn closed_form_reliance_with_full_learning() {
        let p = AgentParams {
            learning_rate: 1.0,
            decision_noise: 0.0,
            ..AgentParams::default()
        };
        let mut c = CohortConfig::driving(5);
        c.n_participants = 10;
        let panel = gen_driving_cohort(&c, &p).unwrap();
        let (tr, hp, rel) = (
            panel.var_index(TRUST).unwrap(),
            panel.var_index(HP).unwrap(),
            panel.var_index(RELIANCE).unwrap(),
        );
        for s in &panel.series {
            for t in 1..s.len() {
                let expected = s.columns[tr][t - 1].unwrap() >= s.columns[hp][t].unwrap();
                assert_eq!(s.columns[rel][t], Some(if expected { 1.0 } else { 0.0 }));
            }
        }
    }

    #[test]
    fn deterministic_generation() {
        let p = AgentParams::default();
        let a = gen_drone_cohort(&CohortConfig::drone(42), &p).unwrap();
        let b = gen_drone_cohort(&CohortConfig::drone(42), &p).unwrap();
        assert_eq!(a, b);
        let c = gen_drone_cohort(&CohortConfig::drone(43), &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn augmentation_counts() {
        let mut c = CohortConfig::drone(2);
        c.n_participants = 10;
        let panel = gen_drone_cohort(&c, &AgentParams::default()).unwrap();
        let one = augment_panel(&panel, 1, 0.1, &mut rng()).unwrap();
        assert_eq!(one, panel);
        let three = augment_panel(&panel, 3, 0.1, &mut rng()).unwrap();
        assert_eq!(three.n_participants(), 30);
        assert!(augment_panel(&panel, 0, 0.1, &mut rng()).is_err());
    }
}

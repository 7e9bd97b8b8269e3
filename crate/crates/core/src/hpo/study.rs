//! Ask/tell optimization loop.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::acquisition::{acquisition_value, Acquisition};
use super::lowdisc::ScrambledHalton;
use super::space::{HpValue, SearchSpace};
use super::surrogate::{fit_surrogate, Surrogate, SurrogateKind};
use crate::table::{Cell, Table};

pub const CANDIDATES: usize = 1024;
pub const REFINED_CANDIDATES: usize = 10;
pub const REFINE_STEPS: usize = 20;
const REFINE_STEP: f64 = 0.05;
const PERTURBATION: f64 = 1e-6;
const MAX_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Bayesian,
    /// Uniform random search, kept as a baseline.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub surrogate: SurrogateKind,
    #[serde(default)]
    pub acquisition: Acquisition,
    #[serde(default)]
    pub seed: u64,
    /// Maximum number of suggestions; `None` means unbounded.
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "yes")]
    pub maximize: bool,
}

fn yes() -> bool {
    true
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            strategy: Strategy::Bayesian,
            surrogate: SurrogateKind::Gp,
            acquisition: Acquisition::default(),
            seed: 0,
            budget: None,
            maximize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialState {
    Suggested,
    Running,
    Completed,
    Failed,
}

impl TrialState {
    pub fn name(self) -> &'static str {
        match self {
            TrialState::Suggested => "Suggested",
            TrialState::Running => "Running",
            TrialState::Completed => "Completed",
            TrialState::Failed => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u64,
    pub x: Vec<HpValue>,
    pub encoded: Vec<f64>,
    #[serde(default)]
    pub y: Option<f64>,
    pub state: TrialState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StudyError {
    #[error("study is closed")]
    StudyClosed,
    #[error("unknown trial {0}")]
    UnknownTrial(u64),
    #[error("objective of trial {0} is not finite")]
    NonFiniteObjective(u64),
    #[error("trial {trial} is already {state:?}")]
    InvalidState { trial: u64, state: TrialState },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub space: SearchSpace,
    pub settings: StudySettings,
    pub trials: Vec<Trial>,
    #[serde(default)]
    pub closed: bool,
    #[serde(default)]
    halton_next: u64,
}

fn mix(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Study {
    pub fn new(space: SearchSpace, settings: StudySettings) -> Study {
        Study {
            space,
            settings,
            trials: Vec::new(),
            closed: false,
            halton_next: 0,
        }
    }

    /// Number of initial low-discrepancy suggestions.
    pub fn n_init(&self) -> usize {
        (2 * self.space.encoded_len()).max(5)
    }

    pub fn trial(&self, id: u64) -> Option<&Trial> {
        self.trials.iter().find(|t| t.trial_id == id)
    }

    fn trial_mut(&mut self, id: u64) -> Result<&mut Trial, StudyError> {
        self.trials
            .iter_mut()
            .find(|t| t.trial_id == id)
            .ok_or(StudyError::UnknownTrial(id))
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed || self.settings.budget.is_some_and(|b| self.trials.len() >= b)
    }

    fn sign(&self) -> f64 {
        if self.settings.maximize {
            1.0
        } else {
            -1.0
        }
    }

    fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.state == TrialState::Completed)
    }

    /// Best completed trial under the study's direction.
    pub fn best(&self) -> Option<&Trial> {
        let s = self.sign();
        self.completed()
            .max_by(|a, b| (s * a.y.unwrap()).total_cmp(&(s * b.y.unwrap())).then(b.trial_id.cmp(&a.trial_id)))
    }

    /// Best objective so far after each completed trial, in trial order.
    pub fn running_best(&self) -> Vec<f64> {
        let s = self.sign();
        let mut best = f64::NEG_INFINITY;
        self.completed()
            .map(|t| {
                best = best.max(s * t.y.unwrap());
                s * best
            })
            .collect()
    }

    pub fn suggest(&mut self) -> Result<&Trial, StudyError> {
        if self.is_closed() {
            return Err(StudyError::StudyClosed);
        }
        let k = self.trials.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.settings.seed, k));
        let completed = self.completed().count();
        let v = match self.settings.strategy {
            Strategy::Random => self.fresh_random(&mut rng),
            Strategy::Bayesian if (k as usize) < self.n_init() || completed < 2 => self.fresh_halton(&mut rng),
            Strategy::Bayesian => self.maximize_acquisition(&mut rng, k),
        };
        let x = self.space.decode(&v);
        let encoded = self.space.encode(&x).expect("decoded values are in bounds");
        self.trials.push(Trial {
            trial_id: k + 1,
            x,
            encoded,
            y: None,
            state: TrialState::Suggested,
            error: None,
        });
        Ok(self.trials.last().expect("just pushed"))
    }

    fn is_used(&self, v: &[f64]) -> bool {
        let x = self.space.decode(v);
        self.trials.iter().any(|t| t.x == x)
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.space.encoded_len()).map(|_| rng.random::<f64>()).collect()
    }

    fn fresh_random(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let first = self.uniform(rng);
        if !self.is_used(&first) {
            return first;
        }
        for _ in 0..MAX_DRAWS {
            let v = self.uniform(rng);
            if !self.is_used(&v) {
                return v;
            }
        }
        self.perturbed(first)
    }

    fn fresh_halton(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let h = ScrambledHalton::new(self.space.encoded_len(), self.settings.seed);
        for _ in 0..MAX_DRAWS {
            let v = h.point(self.halton_next);
            self.halton_next += 1;
            if !self.is_used(&v) {
                return v;
            }
        }
        self.fresh_random(rng)
    }

    fn perturbed(&self, mut v: Vec<f64>) -> Vec<f64> {
        if let Some(c) = v.first_mut() {
            *c = if *c + PERTURBATION <= 1.0 { *c + PERTURBATION } else { *c - PERTURBATION };
        }
        v
    }

    fn maximize_acquisition(&mut self, rng: &mut ChaCha8Rng, k: u64) -> Vec<f64> {
        let s = self.sign();
        let (x, y): (Vec<Vec<f64>>, Vec<f64>) = self
            .completed()
            .map(|t| (t.encoded.clone(), s * t.y.unwrap()))
            .unzip();
        let best_y = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let surrogate = match fit_surrogate(x, &y, self.settings.surrogate, mix(self.settings.seed, !k)) {
            Ok(sur) => sur,
            Err(_) => return self.fresh_random(rng),
        };
        let a = self.settings.acquisition;
        let score = |v: &[f64]| acquisition_value(&surrogate, v, a, best_y);

        let mut scored: Vec<(f64, Vec<f64>)> = (0..CANDIDATES)
            .map(|_| {
                let v = self.space.project(&self.uniform(rng));
                (score(&v), v)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let refined: Vec<(f64, Vec<f64>)> = scored
            .iter()
            .take(REFINED_CANDIDATES)
            .map(|(value, v)| self.refine(&surrogate, a, best_y, v.clone(), *value))
            .collect();
        scored.extend(refined);
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        if let Some((_, v)) = scored.iter().find(|(_, v)| !self.is_used(v)) {
            return v.clone();
        }
        let top = scored.swap_remove(0).1;
        let fresh = self.fresh_random(rng);
        if self.is_used(&fresh) {
            self.perturbed(top)
        } else {
            fresh
        }
    }

    /// Coordinate ascent on the acquisition; the step halves after an
    /// iteration without improvement.
    fn refine(&self, sur: &Surrogate, a: Acquisition, best_y: f64, mut v: Vec<f64>, mut value: f64) -> (f64, Vec<f64>) {
        let mut step = REFINE_STEP;
        for _ in 0..REFINE_STEPS {
            let mut improved = false;
            for j in 0..v.len() {
                for dir in [1.0, -1.0] {
                    let mut w = v.clone();
                    w[j] = (w[j] + dir * step).clamp(0.0, 1.0);
                    let w = self.space.project(&w);
                    let val = acquisition_value(sur, &w, a, best_y);
                    if val > value {
                        value = val;
                        v = w;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (value, v)
    }

    pub fn start(&mut self, id: u64) -> Result<(), StudyError> {
        let t = self.trial_mut(id)?;
        if t.state != TrialState::Suggested {
            return Err(StudyError::InvalidState { trial: id, state: t.state });
        }
        t.state = TrialState::Running;
        Ok(())
    }

    /// Records an objective value. A non-finite value fails the trial.
    pub fn tell(&mut self, id: u64, y: f64) -> Result<(), StudyError> {
        let t = self.trial_mut(id)?;
        if !matches!(t.state, TrialState::Suggested | TrialState::Running) {
            return Err(StudyError::InvalidState { trial: id, state: t.state });
        }
        if !y.is_finite() {
            t.state = TrialState::Failed;
            t.error = Some("non-finite objective".into());
            return Err(StudyError::NonFiniteObjective(id));
        }
        t.y = Some(y);
        t.state = TrialState::Completed;
        Ok(())
    }

    pub fn fail(&mut self, id: u64, reason: &str) -> Result<(), StudyError> {
        let t = self.trial_mut(id)?;
        if !matches!(t.state, TrialState::Suggested | TrialState::Running) {
            return Err(StudyError::InvalidState { trial: id, state: t.state });
        }
        t.state = TrialState::Failed;
        t.error = Some(reason.into());
        Ok(())
    }

    /// Trials as `trial_id,<dim...>,y,state`; `y` is empty unless completed.
    pub fn trials_table(&self) -> Table {
        let mut columns = alloc::vec![String::from("trial_id")];
        columns.extend(self.space.names().map(String::from));
        columns.push("y".into());
        columns.push("state".into());
        let mut table = Table::new(columns);
        for t in &self.trials {
            let mut row = alloc::vec![Cell::Int(t.trial_id as i64)];
            row.extend(t.x.iter().map(|v| match v {
                HpValue::Int(i) => Cell::Int(*i),
                HpValue::Float(f) => Cell::Float(*f),
                HpValue::Choice(c) => Cell::Text(c.clone()),
            }));
            row.push(t.y.map_or(Cell::Text(String::new()), Cell::Float));
            row.push(Cell::Text(t.state.name().into()));
            table.push(row);
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpo::space::Dimension;
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn unit_1d() -> SearchSpace {
        SearchSpace::new(vec![Dimension::continuous("x", 0.0, 1.0)]).unwrap()
    }

    fn run(study: &mut Study, n: usize, f: impl Fn(&[HpValue]) -> f64) {
        for _ in 0..n {
            let t = study.suggest().unwrap().clone();
            study.tell(t.trial_id, f(&t.x)).unwrap();
        }
    }

    fn x0(x: &[HpValue]) -> f64 {
        match x[0] {
            HpValue::Float(v) => v,
            _ => unreachable!(),
        }
    }

    #[test]
    fn initial_points_are_halton() {
        let space = SearchSpace::new(vec![Dimension::continuous("a", 0.0, 1.0), Dimension::continuous("b", 0.0, 1.0)])
            .unwrap();
        let settings = StudySettings {
            seed: 4,
            ..Default::default()
        };
        let mut s = Study::new(space.clone(), settings.clone());
        let h = ScrambledHalton::new(2, 4);
        for i in 0..5 {
            let t = s.suggest().unwrap().clone();
            assert_eq!(t.encoded, space.project(&h.point(i)));
            s.tell(t.trial_id, 0.0).unwrap();
        }
        let mut again = Study::new(space, settings);
        let first: Vec<_> = (0..5).map(|_| again.suggest().unwrap().x.clone()).collect();
        assert_eq!(first, s.trials.iter().map(|t| t.x.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn finds_quadratic_peak() {
        let mut s = Study::new(
            unit_1d(),
            StudySettings {
                seed: 1,
                ..Default::default()
            },
        );
        run(&mut s, 30, |x| -(x0(x) - 0.3).powi(2));
        let best = x0(&s.best().unwrap().x);
        assert!((best - 0.3).abs() <= 0.05, "best {best}");
        let rb = s.running_best();
        assert!(rb.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn exhaustive_grid_reaches_maximum() {
        let space = SearchSpace::new(vec![
            Dimension::integer("i", 0, 2),
            Dimension::categorical("c", &["a", "b", "c"]),
            Dimension::categorical("d", &["x", "y"]),
        ])
        .unwrap();
        let f = |x: &[HpValue]| {
            let HpValue::Int(i) = x[0] else { unreachable!() };
            let c = if x[1] == HpValue::Choice("b".into()) { 3.0 } else { 1.0 };
            let d = if x[2] == HpValue::Choice("x".into()) { 0.5 } else { 0.0 };
            libm::sin(i as f64 + c) + d
        };
        let mut s = Study::new(space, StudySettings::default());
        run(&mut s, 18, f);
        let distinct: BTreeSet<String> = s.trials.iter().map(|t| alloc::format!("{:?}", t.x)).collect();
        assert_eq!(distinct.len(), 18);
        let mut max = f64::NEG_INFINITY;
        for t in &s.trials {
            max = max.max(f(&t.x));
        }
        assert_eq!(s.best().unwrap().y, Some(max));
    }

    #[test]
    fn tell_state_machine() {
        let mut s = Study::new(
            unit_1d(),
            StudySettings {
                budget: Some(3),
                ..Default::default()
            },
        );
        let a = s.suggest().unwrap().trial_id;
        assert_eq!(s.tell(a, f64::NAN), Err(StudyError::NonFiniteObjective(a)));
        assert_eq!(s.trial(a).unwrap().state, TrialState::Failed);
        let b = s.suggest().unwrap().trial_id;
        s.tell(b, 1.0).unwrap();
        assert!(matches!(s.tell(b, 2.0), Err(StudyError::InvalidState { .. })));
        assert_eq!(s.tell(99, 1.0), Err(StudyError::UnknownTrial(99)));
        let c = s.suggest().unwrap().trial_id;
        s.tell(c, 2.0).unwrap();
        assert_eq!(s.best().unwrap().trial_id, c);
        assert_eq!(s.suggest().err(), Some(StudyError::StudyClosed));
        let table = s.trials_table();
        assert_eq!(table.columns, ["trial_id", "x", "y", "state"]);
        assert_eq!(table.rows[0][3], Cell::Text("Failed".into()));
    }

    #[test]
    fn minimization_flips_direction() {
        let mut s = Study::new(
            unit_1d(),
            StudySettings {
                maximize: false,
                ..Default::default()
            },
        );
        run(&mut s, 3, x0);
        let min = s.trials.iter().map(|t| t.y.unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(s.best().unwrap().y, Some(min));
    }

    #[test]
    fn degenerate_objective_still_suggests() {
        let mut s = Study::new(unit_1d(), StudySettings::default());
        run(&mut s, 8, |_| 1.0);
        assert_eq!(s.trials.len(), 8);
    }
}

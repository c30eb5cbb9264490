//! Push-affordance sampling and action selection by N-step information gain.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dualfilter::{predict, FilterConfig};
use crate::error::{Error, Result};
use crate::gaussmath::{kl_divergence, JointBelief};
use crate::geometry::{affordance_at, Pose2D, PushAction, Shape2D};
use crate::nets::{FilterModels, StepContext};
use crate::rng::{mix, rng_for, uniform, Stream};
use crate::tape::{Tape, Var};

/// Largest push-direction perturbation about the inward normal (rad).
pub const DIRECTION_JITTER: f64 = 5.0 * std::f64::consts::PI / 180.0;

/// Candidate pushes, ordered along the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceSet {
    pub candidates: Vec<PushAction>,
}

impl AffordanceSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Active,
    Uniform,
    Random,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Self::Active),
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown strategy '{s}'"))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Active => "active",
            Self::Uniform => "uniform",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Lookahead in filter ticks.
    pub n: usize,
    /// Candidates per selection.
    pub m: usize,
    pub seed: u64,
    /// Reuse the shape-action encoding of the starting pose for every lookahead tick.
    #[serde(default)]
    pub freeze_encoding: bool,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("lookahead and candidate count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Lookahead in ticks for a fraction of the push horizon.
pub fn lookahead_steps(fraction: f64, t_h: f64, dt: f64) -> usize {
    (fraction * t_h / dt).round() as usize
}

/// `m` pushes at speed `v`: contact points stratified along the boundary with a random phase,
/// directions within ±5° of the inward normal.
pub fn sample_affordances(shape: &Shape2D, pose: &Pose2D, m: usize, v: f64, seed: u64) -> Result<AffordanceSet> {
    if m == 0 {
        return Err(Error::InvalidInput("affordance count must be >= 1".into()));
    }
    shape.validate()?;
    let mut rng = rng_for(seed, 0, Stream::Affordance);
    let spacing = shape.perimeter() / m as f64;
    let phase = rng.gen::<f64>() * spacing;
    let candidates = (0..m)
        .map(|k| {
            let a = affordance_at(shape, pose, phase + k as f64 * spacing);
            let delta = uniform(&mut rng, -DIRECTION_JITTER, DIRECTION_JITTER);
            PushAction { cp: a.cp, pd: a.cn + delta, v }
        })
        .collect();
    Ok(AffordanceSet { candidates })
}

/// Models with the shape-action encoding replaced by a fixed value.
struct FixedEncoding<'m, M> {
    inner: &'m M,
    encoding: Option<DMatrix<f64>>,
}

impl<M: FilterModels> FilterModels for FixedEncoding<'_, M> {
    type Bound = M::Bound;

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> M::Bound {
        self.inner.bind(tape)
    }

    fn encode(&self, tape: &mut Tape, _: &M::Bound, _: &Shape2D, _: &Pose2D, _: &PushAction, _: f64) -> Result<Option<Var>> {
        Ok(self.encoding.as_ref().map(|e| tape.constant(e.clone())))
    }

    fn process(&self, tape: &mut Tape, b: &M::Bound, points: Var, ctx: &StepContext) -> Result<(Var, Var)> {
        self.inner.process(tape, b, points, ctx)
    }

    fn tactile(&self, tape: &mut Tape, b: &M::Bound, points: Var, ctx: &StepContext) -> Result<Var> {
        self.inner.tactile(tape, b, points, ctx)
    }

    fn obs_noise(&self, tape: &mut Tape, b: &M::Bound, z: Var) -> Result<Var> {
        self.inner.obs_noise(tape, b, z)
    }
}

fn lookahead<M: FilterModels>(belief: &JointBelief, action: &PushAction, shape: &Shape2D, models: &M, cfg: &FilterConfig, n: usize, seed: u64) -> Result<JointBelief> {
    let stream_seed = mix(seed, Stream::Lookahead as u64);
    let mut b = belief.clone();
    let mut a = *action;
    for k in 0..n {
        b = predict(models, cfg, &b, &a, shape, stream_seed, k as u64)?.0;
        a = a.advanced(cfg.dt);
    }
    Ok(b)
}

/// Predicts the belief `n` ticks ahead under a continuing push, without updates, and returns
/// `KL(belief_n ‖ belief_0)`.
#[allow(clippy::too_many_arguments)]
pub fn info_gain<M: FilterModels>(
    belief: &JointBelief,
    action: &PushAction,
    shape: &Shape2D,
    models: &M,
    cfg: &FilterConfig,
    n: usize,
    seed: u64,
    freeze_encoding: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("lookahead must be >= 1".into()));
    }
    let predicted = if freeze_encoding {
        let mut tape = Tape::new();
        let bound = models.bind(&mut tape);
        let p = belief.pose_mean();
        let pose = Pose2D::new(p[0], p[1], p[2]);
        let e = models.encode(&mut tape, &bound, shape, &pose, action, cfg.dt)?;
        let encoding = e.map(|v| tape.value(v).clone());
        let fixed = FixedEncoding { inner: models, encoding };
        lookahead(belief, action, shape, &fixed, cfg, n, seed)?
    } else {
        lookahead(belief, action, shape, models, cfg, n, seed)?
    };
    Ok(kl_divergence(&predicted, belief)?.max(0.0))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.map_or(true, |b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Picks one candidate. `push_index` advances the uniform round-robin and the random stream.
#[allow(clippy::too_many_arguments)]
pub fn select_action<M: FilterModels>(
    belief: &JointBelief,
    affordances: &AffordanceSet,
    strategy: &StrategyConfig,
    shape: &Shape2D,
    models: &M,
    cfg: &FilterConfig,
    push_index: u64,
) -> Result<(PushAction, Vec<f64>)> {
    if affordances.is_empty() {
        return Err(Error::EmptyAffordances);
    }
    if affordances.len() == 1 {
        return Ok((affordances.candidates[0], Vec::new()));
    }
    let i = match strategy.kind {
        StrategyKind::Uniform => (push_index % affordances.len() as u64) as usize,
        StrategyKind::Random => rng_for(strategy.seed, push_index, Stream::Strategy).gen_range(0..affordances.len()),
        StrategyKind::Active => {
            let scores = affordances
                .candidates
                .iter()
                .map(|a| info_gain(belief, a, shape, models, cfg, strategy.n, mix(strategy.seed, push_index), strategy.freeze_encoding))
                .collect::<Result<Vec<_>>>()?;
            let i = argmax(&scores).expect("nonempty");
            return Ok((affordances.candidates[i], scores));
        }
    };
    Ok((affordances.candidates[i], Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualfilter::{initial_belief, parameter_prior, LinearModels};
    use crate::gaussmath::Constraints;
    use crate::geometry::{rectangle, wrap_angle};
    use crate::nets::Models;
    use crate::pushsim::ParameterRanges;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn belief() -> JointBelief {
        let (pm, pv) = parameter_prior(&ParameterRanges::table_one());
        initial_belief(&[0.0, 0.0, 0.0], &[2.5e-5, 2.5e-5, 4e-4], &pm, &DMatrix::from_diagonal(&DVector::from_column_slice(&pv)))
    }

    fn cfg(shape: &Shape2D) -> FilterConfig {
        let mut c = FilterConfig::new(Constraints::for_shape(shape));
        c.c = 20;
        c
    }

    #[test]
    fn lookahead_grid() {
        let n: Vec<usize> = [0.2, 0.5, 0.7].iter().map(|f| lookahead_steps(*f, 15.0, 0.1)).collect();
        assert_eq!(n, vec![30, 75, 105]);
    }

    #[test]
    fn affordances_cover_every_edge_and_respect_jitter() {
        let sq = rectangle("sq", 0.1, 0.1);
        for seed in 0..200 {
            let set = sample_affordances(&sq, &Pose2D::identity(), 16, 0.02, seed).unwrap();
            assert_eq!(set.len(), 16);
            let mut edges = [0usize; 4];
            for a in &set.candidates {
                let bp = sq.nearest_boundary(&a.cp);
                edges[bp.edge] += 1;
                let n = sq.inward_normal(bp.edge);
                let cn = n.y.atan2(n.x);
                assert!(wrap_angle(a.pd - cn).abs() <= DIRECTION_JITTER + 1e-12);
                assert_eq!(a.v, 0.02);
            }
            assert!(edges.iter().all(|e| *e >= 1));
        }
        let a = sample_affordances(&sq, &Pose2D::identity(), 16, 0.02, 7).unwrap();
        assert_eq!(a, sample_affordances(&sq, &Pose2D::identity(), 16, 0.02, 7).unwrap());
    }

    #[test]
    fn still_models_give_small_monotone_gain() {
        let sq = rectangle("sq", 0.1, 0.1);
        let m = LinearModels::still([1e-6; 3], [1.0; 6]);
        let c = cfg(&sq);
        let b = belief();
        let a = PushAction { cp: nalgebra::Vector2::new(-0.05, 0.0), pd: 0.0, v: 0.02 };
        let g: Vec<f64> = (1..=5).map(|n| info_gain(&b, &a, &sq, &m, &c, n, 3, false).unwrap()).collect();
        assert!(g[0] >= 0.0 && g[0] < 0.1);
        assert!(g.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn selection_rules() {
        let sq = rectangle("sq", 0.1, 0.1);
        let models = Models::new(4);
        let c = cfg(&sq);
        let b = belief();
        let set = sample_affordances(&sq, &Pose2D::identity(), 4, 0.02, 1).unwrap();
        let mut s = StrategyConfig { kind: StrategyKind::Uniform, n: 2, m: 4, seed: 9, freeze_encoding: false };
        for k in 0..8u64 {
            let (a, _) = select_action(&b, &set, &s, &sq, &models, &c, k).unwrap();
            assert_eq!(a, set.candidates[(k % 4) as usize]);
        }
        s.kind = StrategyKind::Active;
        let (a1, scores) = select_action(&b, &set, &s, &sq, &models, &c, 0).unwrap();
        let (a2, _) = select_action(&b, &set, &s, &sq, &models, &c, 0).unwrap();
        assert_eq!(a1, a2);
        assert!(scores.iter().all(|g| *g >= 0.0));
        assert_eq!(a1, set.candidates[argmax(&scores).unwrap()]);
        s.freeze_encoding = true;
        let (_, frozen) = select_action(&b, &set, &s, &sq, &models, &c, 0).unwrap();
        assert!(frozen.iter().all(|g| *g >= 0.0));
        s.freeze_encoding = false;
        let single = AffordanceSet { candidates: vec![set.candidates[2]] };
        for kind in [StrategyKind::Active, StrategyKind::Uniform, StrategyKind::Random] {
            s.kind = kind;
            assert_eq!(select_action(&b, &single, &s, &sq, &models, &c, 5).unwrap().0, set.candidates[2]);
        }
        let empty = AffordanceSet { candidates: vec![] };
        assert!(matches!(select_action(&b, &empty, &s, &sq, &models, &c, 0), Err(Error::EmptyAffordances)));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_positive_scaling(v in prop::collection::vec(0.0f64..100.0, 1..20), k in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert_eq!(argmax(&v), argmax(&scaled));
        }
    }
}

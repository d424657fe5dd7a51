//! Top-K recommendation, planted-community synthetic data, and the
//! train → recommend → engage feedback loop used to measure how strongly
//! recommendations stay inside a user's own community.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::ratings::{Rating, RatingMatrix};
use crate::rng;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityLabels {
    pub labels: Vec<usize>,
    pub event_labels: Vec<usize>,
    pub n_communities: usize,
}

impl CommunityLabels {
    pub fn new(labels: Vec<usize>, event_labels: Vec<usize>, n_communities: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().chain(&event_labels).find(|&&l| l >= n_communities) {
            return Err(Error::InvalidParameter(format!(
                "community label {bad} >= n_communities {n_communities}"
            )));
        }
        Ok(CommunityLabels {
            labels,
            event_labels,
            n_communities,
        })
    }

    /// Same label multiset with user labels shuffled; breaks the link between
    /// a user and their planted community.
    pub fn with_permuted_users(&self, seed: u64) -> CommunityLabels {
        let mut labels = self.labels.clone();
        rng::fisher_yates(&mut labels, &mut rng::seeded(seed));
        CommunityLabels {
            labels,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user: usize,
    pub events: Vec<usize>,
    pub scores: Vec<f64>,
}

/// The `k_recs` highest-scoring events for user `u`, ties broken by lower
/// event index. With `exclude_observed`, events the user already rated in
/// `matrix` are skipped.
pub fn top_k(
    model: &FactorModel,
    matrix: &RatingMatrix,
    u: usize,
    k_recs: usize,
    exclude_observed: bool,
) -> Result<RecommendationList> {
    model.check_user(u)?;
    if k_recs == 0 {
        return Err(Error::InvalidParameter("k_recs must be at least 1".into()));
    }
    let seen = matrix.user_ratings(u);
    let mut seen_iter = seen.iter().map(|r| r.event).peekable();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(model.n_events());
    for i in 0..model.n_events() {
        if exclude_observed {
            while seen_iter.next_if(|&e| e < i).is_some() {}
            if seen_iter.peek() == Some(&i) {
                continue;
            }
        }
        scored.push((i, model.score(u, i)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k_recs);
    let (events, scores) = scored.into_iter().unzip();
    Ok(RecommendationList {
        user: u,
        events,
        scores,
    })
}

/// Top-K lists for every user of the model.
pub fn recommend_all(
    model: &FactorModel,
    matrix: &RatingMatrix,
    k_recs: usize,
    exclude_observed: bool,
) -> Result<Vec<RecommendationList>> {
    (0..model.n_users())
        .map(|u| top_k(model, matrix, u, k_recs, exclude_observed))
        .collect()
}

fn assign_communities(n: usize, n_communities: usize) -> Vec<usize> {
    let block = n / n_communities;
    let full = block * n_communities;
    (0..n)
        .map(|i| {
            if i < full {
                i / block
            } else {
                (i - full) % n_communities
            }
        })
        .collect()
}

/// Synthetic ratings with planted communities.
///
/// Users and events are split into contiguous, equally sized community
/// blocks (leftovers assigned round-robin). A same-community pair is
/// observed with probability `in_rate` and a value uniform in `[3, 5]`; a
/// cross-community pair with probability `cross_rate` and a value uniform in
/// `[1, 2]`.
pub fn synth_community_matrix(
    n_users: usize,
    n_events: usize,
    n_communities: usize,
    in_rate: f64,
    cross_rate: f64,
    seed: u64,
) -> Result<(RatingMatrix, CommunityLabels)> {
    if n_users == 0 || n_events == 0 || n_communities == 0 {
        return Err(Error::InvalidParameter(
            "users, events and communities must all be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&in_rate) || !(0.0..=in_rate).contains(&cross_rate) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= cross_rate <= in_rate <= 1, got in_rate={in_rate}, cross_rate={cross_rate}"
        )));
    }
    let labels = assign_communities(n_users, n_communities);
    let event_labels = assign_communities(n_events, n_communities);
    let mut rng = rng::seeded(seed);
    let mut triplets = Vec::new();
    for (u, &lu) in labels.iter().enumerate() {
        for (i, &li) in event_labels.iter().enumerate() {
            let draw: f64 = rng.gen();
            if lu == li {
                if draw < in_rate {
                    triplets.push((u, i, rng.gen_range(3.0..=5.0)));
                }
            } else if draw < cross_rate {
                triplets.push((u, i, rng.gen_range(1.0..=2.0)));
            }
        }
    }
    let matrix = RatingMatrix::from_triplets(triplets, n_users, n_events)?;
    Ok((matrix, CommunityLabels::new(labels, event_labels, n_communities)?))
}

/// Fraction of (user, recommended event) pairs where both share a community.
pub fn fragmentation_index(recs: &[RecommendationList], labels: &CommunityLabels) -> Result<f64> {
    let mut pairs = 0usize;
    let mut same = 0usize;
    for list in recs {
        let user_label = *labels.labels.get(list.user).ok_or(Error::IndexOutOfRange {
            what: "user",
            index: list.user,
            bound: labels.labels.len(),
        })?;
        for &event in &list.events {
            let event_label = *labels.event_labels.get(event).ok_or(Error::IndexOutOfRange {
                what: "event",
                index: event,
                bound: labels.event_labels.len(),
            })?;
            pairs += 1;
            if event_label == user_label {
                same += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(same as f64 / pairs as f64)
}

/// Every user engages with their `accept_top` best unobserved
/// recommendations, which join the matrix with value `accept_value`.
pub fn engagement_round(
    matrix: &RatingMatrix,
    model: &FactorModel,
    accept_top: usize,
    accept_value: f64,
) -> Result<RatingMatrix> {
    if accept_top == 0 {
        return Err(Error::InvalidParameter("accept_top must be at least 1".into()));
    }
    if !(accept_value.is_finite() && accept_value > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "accept_value must be positive, got {accept_value}"
        )));
    }
    model.check_matches(matrix)?;
    let mut accepted = Vec::new();
    for u in 0..matrix.n_users() {
        let recs = top_k(model, matrix, u, accept_top, true)?;
        accepted.extend(recs.events.into_iter().map(|i| Rating::new(u, i, accept_value)));
    }
    matrix.with_added(accepted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_users: usize,
    pub n_events: usize,
    pub n_communities: usize,
    pub in_rate: f64,
    pub cross_rate: f64,
    pub rounds: usize,
    pub k: usize,
    pub gamma: f64,
    pub init_scale: f64,
    pub train: TrainConfig,
    /// Length of the recommendation lists the index is measured on.
    pub top_n: usize,
    pub accept_top: usize,
    pub accept_value: f64,
    pub holdout: f64,
    /// Continue from the previous round's model instead of re-initializing.
    pub warm_start: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_users: 40,
            n_events: 40,
            n_communities: 2,
            in_rate: 0.5,
            cross_rate: 0.0,
            rounds: 3,
            k: 2,
            gamma: 0.0,
            init_scale: 0.1,
            train: TrainConfig::default(),
            top_n: 10,
            accept_top: 2,
            accept_value: 4.0,
            holdout: 0.1,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub fragmentation_index: f64,
    pub n_observations: usize,
    pub rmse_holdout: Option<f64>,
}

impl RoundMetrics {
    pub fn to_csv(metrics: &[RoundMetrics]) -> String {
        let mut out = String::from("round,fragmentation_index,n_observations,rmse_holdout\n");
        for m in metrics {
            let rmse = m.rmse_holdout.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:?},{},{}",
                m.round, m.fragmentation_index, m.n_observations, rmse
            );
        }
        out
    }
}

/// Outcome of [`run_simulation`]: per-round metrics plus the final state.
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub metrics: Vec<RoundMetrics>,
    pub labels: CommunityLabels,
    pub model: FactorModel,
    pub matrix: RatingMatrix,
}

/// Runs the feedback loop: train, measure, let users engage with what they
/// were shown, retrain (warm start), measure again, `rounds` times.
///
/// The fragmentation index is measured on each user's full top-`top_n` list
/// (observed events included), i.e. on what the model ranks highest.
pub fn run_simulation(config: &SimulationConfig, seed: u64) -> Result<SimulationRun> {
    let (full, labels) = synth_community_matrix(
        config.n_users,
        config.n_events,
        config.n_communities,
        config.in_rate,
        config.cross_rate,
        seed,
    )?;
    let (mut train_set, holdout) = full.split_holdout(config.holdout, seed)?;
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let init = FactorModel::init(
        config.n_users,
        config.n_events,
        config.k,
        config.gamma,
        seed,
        config.init_scale,
    )?;
    let (mut model, _) = trainer::train(init.clone(), &train_set, &train_config)?;

    let measure = |round: usize, model: &FactorModel, train_set: &RatingMatrix| -> Result<RoundMetrics> {
        let recs = recommend_all(model, train_set, config.top_n, false)?;
        let rmse_holdout = if holdout.is_empty() {
            None
        } else {
            Some(trainer::rmse(model, &holdout)?)
        };
        Ok(RoundMetrics {
            round,
            fragmentation_index: fragmentation_index(&recs, &labels)?,
            n_observations: train_set.len(),
            rmse_holdout,
        })
    };

    let mut metrics = vec![measure(0, &model, &train_set)?];
    for round in 1..=config.rounds {
        train_set = engagement_round(&train_set, &model, config.accept_top, config.accept_value)?;
        let round_config = TrainConfig {
            seed: seed.wrapping_add(round as u64),
            ..train_config.clone()
        };
        let start = if config.warm_start { model } else { init.clone() };
        model = trainer::train(start, &train_set, &round_config)?.0;
        metrics.push(measure(round, &model, &train_set)?);
    }

    Ok(SimulationRun {
        metrics,
        labels,
        model,
        matrix: train_set,
    })
}

//! Stochastic gradient descent over observed ratings.
//!
//! Each step uses the per-sample loss `e^2 + gamma * (|x_u|^2 + |y_i|^2)` with
//! `e = r - x_u . y_i`. The factor 2 from differentiation is folded into the
//! learning rate, so a step is
//!
//! ```text
//! x_u <- x_u + lr * (e * y_i - gamma * x_u)
//! y_i <- y_i + lr * (e * x_u_old - gamma * y_i)
//! ```
//!
//! i.e. a descent step of size `lr / 2` on the per-sample loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, FactorModel};
use crate::ratings::{Rating, RatingMatrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop once `|L_prev - L| / L_prev` drops below this. Zero disables.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 100,
            seed: 0,
            shuffle: true,
            tolerance: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Applies one SGD update for `rating` in place. On a non-finite result the
/// model is left untouched and `NonFiniteUpdate` is returned.
pub fn sgd_step(model: &mut FactorModel, rating: &Rating, learning_rate: f64) -> Result<()> {
    model.check_user(rating.user)?;
    model.check_event(rating.event)?;
    let gamma = model.gamma();
    let (x, y) = model.user_and_event_mut(rating.user, rating.event);
    let err = rating.value - dot(x, y);

    // Component c of both updates depends only on x[c], y[c] and the shared
    // residual, so updating in place per component is simultaneous.
    let update = |xc: f64, yc: f64| {
        (
            xc + learning_rate * (err * yc - gamma * xc),
            yc + learning_rate * (err * xc - gamma * yc),
        )
    };
    let finite = x.iter().zip(y.iter()).all(|(&xc, &yc)| {
        let (nx, ny) = update(xc, yc);
        nx.is_finite() && ny.is_finite()
    });
    if !finite {
        return Err(Error::NonFiniteUpdate {
            epoch: 0,
            step: 0,
            user: rating.user,
            event: rating.event,
        });
    }
    for (xc, yc) in x.iter_mut().zip(y.iter_mut()) {
        (*xc, *yc) = update(*xc, *yc);
    }
    Ok(())
}

/// Full-batch gradient of the objective with respect to `x_u`:
/// `sum_i -2 e_ui y_i + 2 gamma x_u` over the user's observed events.
pub fn gradient_at(model: &FactorModel, matrix: &RatingMatrix, u: usize) -> Result<Vec<f64>> {
    model.check_matches(matrix)?;
    model.check_user(u)?;
    let x = model.user_factors().row(u);
    let mut grad: Vec<f64> = x.iter().map(|v| 2.0 * model.gamma() * v).collect();
    for r in matrix.user_ratings(u) {
        let y = model.event_factors().row(r.event);
        let err = r.value - dot(x, y);
        for (g, yc) in grad.iter_mut().zip(y) {
            *g -= 2.0 * err * yc;
        }
    }
    Ok(grad)
}

/// Trains `model` on every observation of `matrix` for `config.epochs` passes.
pub fn train(
    model: FactorModel,
    matrix: &RatingMatrix,
    config: &TrainConfig,
) -> Result<(FactorModel, TrainReport)> {
    train_with_visitor(model, matrix, config, |_, _| {})
}

/// Like [`train`], calling `visit(epoch, observation_index)` before each step.
pub fn train_with_visitor<F>(
    mut model: FactorModel,
    matrix: &RatingMatrix,
    config: &TrainConfig,
    mut visit: F,
) -> Result<(FactorModel, TrainReport)>
where
    F: FnMut(usize, usize),
{
    config.validate()?;
    model.check_matches(matrix)?;
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }

    let observations = matrix.observations();
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut rng = rng::seeded(config.seed);
    let mut previous = model.objective(matrix)?;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        if config.shuffle {
            rng::fisher_yates(&mut order, &mut rng);
        }
        for (step, &idx) in order.iter().enumerate() {
            visit(epoch, idx);
            sgd_step(&mut model, &observations[idx], config.learning_rate).map_err(|e| match e {
                Error::NonFiniteUpdate { user, event, .. } => Error::NonFiniteUpdate {
                    epoch,
                    step,
                    user,
                    event,
                },
                other => other,
            })?;
        }
        let loss = model.objective(matrix)?;
        loss_history.push(loss);

        if config.tolerance > 0.0 {
            let converged = if previous > 0.0 {
                (previous - loss).abs() / previous < config.tolerance
            } else {
                loss == 0.0
            };
            if converged {
                stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
        previous = loss;
    }

    let report = TrainReport {
        epochs_run: loss_history.len(),
        loss_history,
        stopped_early,
    };
    Ok((model, report))
}

/// Root mean squared error over the matrix's observations.
pub fn rmse(model: &FactorModel, matrix: &RatingMatrix) -> Result<f64> {
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok((model.squared_error(matrix)? / matrix.len() as f64).sqrt())
}

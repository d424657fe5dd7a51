//! Latent-factor model: one k-vector per user and per event, scored by dot
//! product, with an L2 penalty weighted by `gamma`.
//!
//! The regularized squared-error objective is
//!
//! ```text
//! sum over observed (u, i) of (r_ui - x_u . y_i)^2  +  gamma * (sum_u |x_u|^2 + sum_i |y_i|^2)
//! ```
//!
//! where the penalty ranges over every user and event row, observed or not.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::RatingMatrix;
use crate::rng;

/// Dense row-major matrix of factor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    rows: usize,
    k: usize,
    data: Vec<f64>,
}

impl Factors {
    pub fn zeros(rows: usize, k: usize) -> Self {
        Factors {
            rows,
            k,
            data: vec![0.0; rows * k],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "factor row {i} has length {}, expected {k}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Factors {
            rows: rows.len(),
            k,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn to_nested(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squared_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    k: usize,
    gamma: f64,
    users: Factors,
    events: Factors,
}

impl FactorModel {
    /// Random initialization: every entry uniform in `[-scale, scale]`.
    pub fn init(
        n_users: usize,
        n_events: usize,
        k: usize,
        gamma: f64,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        if k == 0 || n_users == 0 || n_events == 0 {
            return Err(Error::InvalidDimension(format!(
                "need k, n_users, n_events >= 1 (got k={k}, users={n_users}, events={n_events})"
            )));
        }
        check_gamma(gamma)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "init scale must be positive, got {scale}"
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut users = Factors::zeros(n_users, k);
        let mut events = Factors::zeros(n_events, k);
        for v in users.as_mut_slice().iter_mut().chain(events.as_mut_slice()) {
            *v = rng.gen_range(-scale..=scale);
        }
        Ok(FactorModel {
            k,
            gamma,
            users,
            events,
        })
    }

    pub fn from_factors(gamma: f64, users: Factors, events: Factors) -> Result<Self> {
        check_gamma(gamma)?;
        if users.k != events.k || users.k == 0 {
            return Err(Error::InvalidDimension(format!(
                "user factors have k={}, event factors have k={}",
                users.k, events.k
            )));
        }
        if users.rows == 0 || events.rows == 0 {
            return Err(Error::InvalidDimension("model needs at least one user and one event".into()));
        }
        if users.as_slice().iter().chain(events.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("factor entries must be finite".into()));
        }
        Ok(FactorModel {
            k: users.k,
            gamma,
            users,
            events,
        })
    }

    /// Convenience constructor from nested rows, mostly for tests and fixtures.
    pub fn from_rows(gamma: f64, users: &[Vec<f64>], events: &[Vec<f64>]) -> Result<Self> {
        let k = users
            .first()
            .or(events.first())
            .map(Vec::len)
            .unwrap_or(0);
        Self::from_factors(gamma, Factors::from_rows(users, k)?, Factors::from_rows(events, k)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.users.rows
    }

    pub fn n_events(&self) -> usize {
        self.events.rows
    }

    pub fn user_factors(&self) -> &Factors {
        &self.users
    }

    pub fn event_factors(&self) -> &Factors {
        &self.events
    }

    pub fn user_factors_mut(&mut self) -> &mut Factors {
        &mut self.users
    }

    pub fn event_factors_mut(&mut self) -> &mut Factors {
        &mut self.events
    }

    pub(crate) fn user_and_event_mut(&mut self, u: usize, i: usize) -> (&mut [f64], &mut [f64]) {
        (self.users.row_mut(u), self.events.row_mut(i))
    }

    pub fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.users.rows {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                bound: self.users.rows,
            });
        }
        Ok(())
    }

    pub fn check_event(&self, i: usize) -> Result<()> {
        if i >= self.events.rows {
            return Err(Error::IndexOutOfRange {
                what: "event",
                index: i,
                bound: self.events.rows,
            });
        }
        Ok(())
    }

    pub fn check_matches(&self, matrix: &RatingMatrix) -> Result<()> {
        if matrix.n_users() != self.n_users() || matrix.n_events() != self.n_events() {
            return Err(Error::DimensionMismatch(format!(
                "model is {}x{}, matrix is {}x{}",
                self.n_users(),
                self.n_events(),
                matrix.n_users(),
                matrix.n_events()
            )));
        }
        Ok(())
    }

    /// Predicted score `x_u . y_i`.
    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        self.check_user(u)?;
        self.check_event(i)?;
        Ok(self.score(u, i))
    }

    /// Unchecked prediction for hot loops whose indices are already validated.
    pub(crate) fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.users.row(u), self.events.row(i))
    }

    /// `sum_u |x_u|^2 + sum_i |y_i|^2`, without the gamma factor.
    pub fn l2_penalty(&self) -> f64 {
        let users: f64 = self.users.iter_rows().map(squared_norm).sum();
        let events: f64 = self.events.iter_rows().map(squared_norm).sum();
        users + events
    }

    /// Sum of squared residuals over the matrix's observations, accumulated in
    /// ascending `(user, event)` order.
    pub fn squared_error(&self, matrix: &RatingMatrix) -> Result<f64> {
        self.check_matches(matrix)?;
        Ok(matrix
            .observations()
            .iter()
            .map(|r| {
                let e = r.value - self.score(r.user, r.event);
                e * e
            })
            .sum())
    }

    /// Full regularized objective over the matrix.
    pub fn objective(&self, matrix: &RatingMatrix) -> Result<f64> {
        Ok(self.squared_error(matrix)? + self.gamma * self.l2_penalty())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            k: self.k,
            gamma: self.gamma,
            user_factors: self.users.to_nested(),
            event_factors: self.events.to_nested(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let model = Self::from_factors(
            file.gamma,
            Factors::from_rows(&file.user_factors, file.k)?,
            Factors::from_rows(&file.event_factors, file.k)?,
        )?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    k: usize,
    gamma: f64,
    user_factors: Vec<Vec<f64>>,
    event_factors: Vec<Vec<f64>>,
}

//! Sparse user × event rating matrix.
//!
//! Observations are kept sorted by `(user, event)` with a row-pointer index,
//! so per-user access is a slice. A stored value of zero would mean "never
//! engaged", which is the same as unobserved, so zeros are never stored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub event: usize,
    pub value: f64,
}

impl Rating {
    pub fn new(user: usize, event: usize, value: f64) -> Self {
        Rating { user, event, value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    n_users: usize,
    n_events: usize,
    observations: Vec<Rating>,
    // row_ptr[u]..row_ptr[u + 1] spans user u's observations
    row_ptr: Vec<usize>,
}

impl RatingMatrix {
    /// Builds a matrix from `(user, event, value)` triplets in any order.
    ///
    /// Zero-valued triplets are dropped. Repeating a pair with the same value
    /// is tolerated; repeating it with a different value is an error.
    pub fn from_triplets<I>(triplets: I, n_users: usize, n_events: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut all = Vec::new();
        for (user, event, value) in triplets {
            if user >= n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: user,
                    bound: n_users,
                });
            }
            if event >= n_events {
                return Err(Error::IndexOutOfRange {
                    what: "event",
                    index: event,
                    bound: n_events,
                });
            }
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidValue { user, event, value });
            }
            all.push(Rating::new(user, event, value));
        }
        Self::from_ratings(all, n_users, n_events)
    }

    fn from_ratings(mut all: Vec<Rating>, n_users: usize, n_events: usize) -> Result<Self> {
        all.sort_by(|a, b| {
            (a.user, a.event)
                .cmp(&(b.user, b.event))
                .then(a.value.total_cmp(&b.value))
        });
        let mut observations: Vec<Rating> = Vec::with_capacity(all.len());
        let mut last: Option<Rating> = None;
        for r in all {
            if let Some(prev) = last {
                if prev.user == r.user && prev.event == r.event {
                    if prev.value != r.value {
                        return Err(Error::DuplicateEntry {
                            user: r.user,
                            event: r.event,
                            first: prev.value,
                            second: r.value,
                        });
                    }
                    continue;
                }
            }
            last = Some(r);
            if r.value != 0.0 {
                observations.push(r);
            }
        }
        Ok(Self::from_sorted(observations, n_users, n_events))
    }

    fn from_sorted(observations: Vec<Rating>, n_users: usize, n_events: usize) -> Self {
        let mut row_ptr = vec![0usize; n_users + 1];
        for r in &observations {
            row_ptr[r.user + 1] += 1;
        }
        for u in 0..n_users {
            row_ptr[u + 1] += row_ptr[u];
        }
        RatingMatrix {
            n_users,
            n_events,
            observations,
            row_ptr,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    /// All observations, sorted by `(user, event)`.
    pub fn observations(&self) -> &[Rating] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn density(&self) -> f64 {
        let cells = self.n_users * self.n_events;
        if cells == 0 {
            0.0
        } else {
            self.observations.len() as f64 / cells as f64
        }
    }

    /// Observations of one user, sorted by event. Empty for out-of-range users.
    pub fn user_ratings(&self, user: usize) -> &[Rating] {
        if user >= self.n_users {
            return &[];
        }
        &self.observations[self.row_ptr[user]..self.row_ptr[user + 1]]
    }

    pub fn get(&self, user: usize, event: usize) -> Option<f64> {
        let row = self.user_ratings(user);
        row.binary_search_by_key(&event, |r| r.event)
            .ok()
            .map(|i| row[i].value)
    }

    /// Keeps only the rows for which `keep(user)` holds; dimensions are unchanged.
    pub fn filter_users(&self, mut keep: impl FnMut(usize) -> bool) -> RatingMatrix {
        let observations = self
            .observations
            .iter()
            .copied()
            .filter(|r| keep(r.user))
            .collect();
        Self::from_sorted(observations, self.n_users, self.n_events)
    }

    /// Returns a copy with `extra` observations added. Existing entries are
    /// never overwritten: adding an already observed pair with a different
    /// value is a `DuplicateEntry` error.
    pub fn with_added(&self, extra: impl IntoIterator<Item = Rating>) -> Result<RatingMatrix> {
        let mut all = self.observations.clone();
        for r in extra {
            if r.user >= self.n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: r.user,
                    bound: self.n_users,
                });
            }
            if r.event >= self.n_events {
                return Err(Error::IndexOutOfRange {
                    what: "event",
                    index: r.event,
                    bound: self.n_events,
                });
            }
            if !r.value.is_finite() || r.value < 0.0 {
                return Err(Error::InvalidValue {
                    user: r.user,
                    event: r.event,
                    value: r.value,
                });
            }
            all.push(r);
        }
        Self::from_ratings(all, self.n_users, self.n_events)
    }

    /// Random train/test partition. `|test| = round(fraction * len)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(RatingMatrix, RatingMatrix)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "holdout fraction must be in [0, 1), got {fraction}"
            )));
        }
        let n_test = (fraction * self.observations.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.observations.len()).collect();
        let mut rng = rng::seeded(seed);
        rng::fisher_yates(&mut order, &mut rng);

        let mut in_test = vec![false; self.observations.len()];
        for &i in &order[..n_test] {
            in_test[i] = true;
        }
        let (test, train): (Vec<_>, Vec<_>) = self
            .observations
            .iter()
            .zip(&in_test)
            .partition(|(_, &t)| t);
        let strip = |v: Vec<(&Rating, &bool)>| v.into_iter().map(|(r, _)| *r).collect();
        Ok((
            Self::from_sorted(strip(train), self.n_users, self.n_events),
            Self::from_sorted(strip(test), self.n_users, self.n_events),
        ))
    }

    /// Parses the `user,event,value` CSV format.
    ///
    /// Lines starting with `#` are comments, except a `# users=N events=M`
    /// header which fixes the dimensions. Without it, dimensions are the
    /// largest index seen plus one.
    pub fn parse_csv(text: &str) -> Result<RatingMatrix> {
        let mut declared: Option<(usize, usize)> = None;
        let mut triplets = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(dims) = parse_header(comment, line_no)? {
                    declared = Some(dims);
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 fields `user,event,value`, found {}", fields.len()),
                });
            }
            let parse_index = |s: &str, name: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad {name} index {s:?}: {e}"),
                })
            };
            let user = parse_index(fields[0], "user")?;
            let event = parse_index(fields[1], "event")?;
            let value = fields[2].parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad value {:?}: {e}", fields[2]),
            })?;
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("value must be a finite non-negative number, got {value}"),
                });
            }
            triplets.push((user, event, value));
        }

        if triplets.is_empty() && declared.is_none() {
            return Err(Error::EmptyInput);
        }
        let (n_users, n_events) = match declared {
            Some(dims) => dims,
            None => {
                let users = triplets.iter().map(|t| t.0).max().unwrap_or(0) + 1;
                let events = triplets.iter().map(|t| t.1).max().unwrap_or(0) + 1;
                (users, events)
            }
        };
        Self::from_triplets(triplets, n_users, n_events)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<RatingMatrix> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    /// Serializes to CSV with an explicit dimension header. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# users={} events={}\n", self.n_users, self.n_events);
        for r in &self.observations {
            let _ = writeln!(out, "{},{},{:?}", r.user, r.event, r.value);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(comment: &str, line: usize) -> Result<Option<(usize, usize)>> {
    let mut users = None;
    let mut events = None;
    for token in comment.split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        let target = match key {
            "users" => &mut users,
            "events" => &mut events,
            _ => continue,
        };
        let n = value.parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("bad header value {value:?}: {e}"),
        })?;
        *target = Some(n);
    }
    match (users, events) {
        (Some(u), Some(e)) => Ok(Some((u, e))),
        (None, None) => Ok(None),
        _ => Err(Error::Parse {
            line,
            message: "header must declare both users= and events=".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn keyset(m: &RatingMatrix) -> BTreeSet<(usize, usize)> {
        m.observations().iter().map(|r| (r.user, r.event)).collect()
    }

    #[test]
    fn empty_triplets_give_valid_empty_matrix() {
        let m = RatingMatrix::from_triplets(vec![], 3, 3).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.density(), 0.0);
        assert_eq!(m.n_users(), 3);
    }

    #[test]
    fn table_row_values_are_kept() {
        // last two events of a row holding 4 and 2
        let l = 9;
        let m = RatingMatrix::from_triplets(vec![(0, l - 1, 4.0), (0, l, 2.0)], 1, l + 1).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.get(0, l - 1), Some(4.0));
        assert_eq!(m.get(0, l), Some(2.0));
    }

    #[test]
    fn explicit_zero_is_dropped() {
        let m = RatingMatrix::from_triplets(vec![(0, 0, 0.0), (0, 1, 5.0)], 1, 2).unwrap();
        assert_eq!(m.observations(), &[Rating::new(0, 1, 5.0)]);
    }

    #[test]
    fn out_of_range_and_duplicates_are_rejected() {
        assert!(matches!(
            RatingMatrix::from_triplets(vec![(3, 0, 1.0)], 3, 3),
            Err(Error::IndexOutOfRange { what: "user", .. })
        ));
        assert!(matches!(
            RatingMatrix::from_triplets(vec![(0, 5, 1.0)], 3, 3),
            Err(Error::IndexOutOfRange { what: "event", .. })
        ));
        assert!(matches!(
            RatingMatrix::from_triplets(vec![(1, 1, 1.0), (1, 1, 2.0)], 3, 3),
            Err(Error::DuplicateEntry { user: 1, event: 1, .. })
        ));
        assert!(matches!(
            RatingMatrix::from_triplets(vec![(1, 1, -1.0)], 3, 3),
            Err(Error::InvalidValue { .. })
        ));
        // same value twice collapses
        let m = RatingMatrix::from_triplets(vec![(1, 1, 2.0), (1, 1, 2.0)], 3, 3).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn csv_basic_and_errors() {
        let m = RatingMatrix::parse_csv("0,0,4\n1,1,2").unwrap();
        assert_eq!((m.n_users(), m.n_events(), m.len()), (2, 2, 2));

        assert!(matches!(RatingMatrix::parse_csv(""), Err(Error::EmptyInput)));
        assert!(matches!(
            RatingMatrix::parse_csv("# just a comment\n"),
            Err(Error::EmptyInput)
        ));
        match RatingMatrix::parse_csv("0,0,abc") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match RatingMatrix::parse_csv("0,0,1\n# note\n0,1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_header_overrides_dimensions() {
        let m = RatingMatrix::parse_csv("# users=5 events=7\n0,0,1\n").unwrap();
        assert_eq!((m.n_users(), m.n_events()), (5, 7));
        assert!(matches!(
            RatingMatrix::parse_csv("# users=1 events=1\n2,0,1\n"),
            Err(Error::IndexOutOfRange { .. })
        ));
        let empty = RatingMatrix::parse_csv("# users=2 events=2\n").unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn csv_file_round_trip() {
        let m = RatingMatrix::from_triplets(
            vec![(0, 2, 0.1), (3, 1, 4.25), (2, 2, 1.0 / 3.0)],
            5,
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        assert_eq!(RatingMatrix::load_csv(&path).unwrap(), m);
    }

    #[test]
    fn split_zero_fraction_is_identity() {
        let m = RatingMatrix::from_triplets(vec![(0, 0, 1.0), (1, 1, 2.0)], 2, 2).unwrap();
        let (train, test) = m.split_holdout(0.0, 3).unwrap();
        assert_eq!(train, m);
        assert!(test.is_empty());
        assert!(m.split_holdout(1.0, 3).is_err());
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let triplets: Vec<_> = (0..10)
            .flat_map(|u| (0..10).map(move |e| (u, e, 1.0 + (u * 10 + e) as f64)))
            .collect();
        let m = RatingMatrix::from_triplets(triplets, 10, 10).unwrap();
        let a = m.split_holdout(0.3, 11).unwrap();
        let b = m.split_holdout(0.3, 11).unwrap();
        assert_eq!(a, b);
        let (train, test) = a;
        assert_eq!(test.len(), 30);
        assert_eq!(train.len(), 70);
        // brute-force disjointness
        for t in test.observations() {
            for r in train.observations() {
                assert!((t.user, t.event) != (r.user, r.event));
            }
        }
        let mut union = keyset(&train);
        union.extend(keyset(&test));
        assert_eq!(union, keyset(&m));
    }

    #[test]
    fn user_rows_and_filtering() {
        let m = RatingMatrix::from_triplets(
            vec![(0, 1, 1.0), (2, 0, 2.0), (2, 3, 3.0), (3, 3, 4.0)],
            4,
            4,
        )
        .unwrap();
        assert_eq!(m.user_ratings(1), &[]);
        assert_eq!(m.user_ratings(2).len(), 2);
        let kept = m.filter_users(|u| u != 2);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept.n_users(), 4);
        assert!(kept.user_ratings(2).is_empty());
    }

    #[test]
    fn with_added_keeps_existing() {
        let m = RatingMatrix::from_triplets(vec![(0, 0, 3.0)], 2, 2).unwrap();
        let grown = m.with_added(vec![Rating::new(1, 1, 1.0)]).unwrap();
        assert_eq!(grown.len(), 2);
        assert_eq!(grown.get(0, 0), Some(3.0));
        assert!(m.with_added(vec![Rating::new(0, 0, 1.0)]).is_err());
    }
}

//! Minkowski geometry in the agreed reference frame.
//!
//! Units have the speed of light equal to one: a time coordinate and a
//! spatial coordinate are measured in the same unit. Every event used by the
//! simulator is expressed in this single frame, so no boosts are needed.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Lightlike classification tolerance, in coordinate units.
pub const GEOMETRY_TOLERANCE: f64 = 1e-9;

pub type Vec3 = [f64; 3];

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// A point `(t; x, y, z)` of spacetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeEvent {
    pub t: f64,
    pub pos: Vec3,
}

impl SpacetimeEvent {
    pub fn new(t: f64, pos: Vec3) -> Self {
        Self { t, pos }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.pos.iter().all(|c| c.is_finite())
    }

    /// The same spatial point at a different time.
    pub fn at_time(&self, t: f64) -> Self {
        Self { t, pos: self.pos }
    }

    pub fn translated(&self, dt: f64, dpos: Vec3) -> Self {
        Self {
            t: self.t + dt,
            pos: [self.pos[0] + dpos[0], self.pos[1] + dpos[1], self.pos[2] + dpos[2]],
        }
    }
}

impl fmt::Display for SpacetimeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}; {}, {}, {})", self.t, self.pos[0], self.pos[1], self.pos[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Separation {
    Spacelike,
    Timelike,
    Lightlike,
}

/// Classifies the interval between two events.
///
/// Spacelike iff `|Δt| < ‖Δpos‖`, timelike iff `|Δt| > ‖Δpos‖`; pairs whose
/// difference is within [`GEOMETRY_TOLERANCE`] are reported as lightlike.
pub fn separation(a: &SpacetimeEvent, b: &SpacetimeEvent) -> Separation {
    let dt = (b.t - a.t).abs();
    let dx = distance(a.pos, b.pos);
    if (dt - dx).abs() <= GEOMETRY_TOLERANCE {
        Separation::Lightlike
    } else if dt < dx {
        Separation::Spacelike
    } else {
        Separation::Timelike
    }
}

/// `‖Δpos‖ − Δt` for a signal from `cause` to `effect`. Positive means the
/// effect is not in the causal future of the cause.
pub fn causal_deficit(cause: &SpacetimeEvent, effect: &SpacetimeEvent) -> f64 {
    distance(cause.pos, effect.pos) - (effect.t - cause.t)
}

/// Whether `effect` lies in the causal future (or on the future light cone)
/// of `cause`.
pub fn can_influence(cause: &SpacetimeEvent, effect: &SpacetimeEvent) -> bool {
    causal_deficit(cause, effect) <= GEOMETRY_TOLERANCE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec3,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        distance(self.center, p) <= self.radius + GEOMETRY_TOLERANCE
    }

    /// Point of this ball closest to `other`.
    pub fn nearest_point_towards(&self, other: &Ball) -> Vec3 {
        let d = distance(self.center, other.center);
        if d == 0.0 {
            return self.center;
        }
        let s = self.radius / d;
        [
            self.center[0] + (other.center[0] - self.center[0]) * s,
            self.center[1] + (other.center[1] - self.center[1]) * s,
            self.center[2] + (other.center[2] - self.center[2]) * s,
        ]
    }
}

/// One broken layout constraint. Party indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum LayoutViolation {
    TooFewBalls { count: usize },
    DeadlineCount { balls: usize, deadlines: usize },
    NonFinite { i: usize },
    NonPositiveRadius { i: usize, radius: f64 },
    /// `d_ij ≤ 0`: the balls touch or intersect.
    Overlap { i: usize, j: usize, gap: f64 },
    /// `2 r_i ≥ d_ij`.
    RadiusTooLarge { i: usize, j: usize, radius: f64, gap: f64 },
    /// `t_i ≤ 0`.
    DeadlineNotPositive { i: usize, deadline: f64 },
    /// `t_i ≥ d_ij`.
    DeadlineTooLate { i: usize, j: usize, deadline: f64, gap: f64 },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use LayoutViolation::*;
        match self {
            TooFewBalls { count } => write!(f, "layout needs at least 2 balls, got {count}"),
            DeadlineCount { balls, deadlines } => {
                write!(f, "{balls} balls but {deadlines} deadlines")
            }
            NonFinite { i } => write!(f, "ball {i}: non-finite coordinate"),
            NonPositiveRadius { i, radius } => {
                write!(f, "ball {i}: radius r_i > 0 violated (r = {radius})")
            }
            Overlap { i, j, gap } => {
                write!(f, "balls {i},{j}: d_ij > 0 violated (balls intersect, d = {gap})")
            }
            RadiusTooLarge { i, j, radius, gap } => {
                write!(f, "balls {i},{j}: 2r_i < d_ij violated (r_i = {radius}, d_ij = {gap})")
            }
            DeadlineNotPositive { i, deadline } => {
                write!(f, "party {i}: 0 < t_i violated (t_i = {deadline})")
            }
            DeadlineTooLate { i, j, deadline, gap } => {
                write!(f, "parties {i},{j}: t_i < d_ij violated (t_i = {deadline}, d_ij = {gap})")
            }
        }
    }
}

/// The balls `B_i`, their gap distances `d_ij` and the deadlines `t_i`.
///
/// Construction never fails; [`validate_layout`] reports what is wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    balls: Vec<Ball>,
    deadlines: Vec<f64>,
    #[serde(skip)]
    gaps: Vec<Vec<f64>>,
}

impl Layout {
    pub fn new(balls: Vec<Ball>, deadlines: Vec<f64>) -> Self {
        let gaps = balls
            .iter()
            .map(|a| {
                balls
                    .iter()
                    .map(|b| distance(a.center, b.center) - a.radius - b.radius)
                    .collect()
            })
            .collect();
        Self { balls, deadlines, gaps }
    }

    /// Balls on a circle of the given radius in the `xy` plane, all with the
    /// same ball radius and deadline.
    pub fn regular(parties: usize, ring_radius: f64, ball_radius: f64, deadline: f64) -> Self {
        let balls = (0..parties)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / parties as f64;
                Ball::new([ring_radius * phi.cos(), ring_radius * phi.sin(), 0.0], ball_radius)
            })
            .collect();
        Self::new(balls, vec![deadline; parties])
    }

    pub fn parties(&self) -> usize {
        self.balls.len()
    }

    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn ball(&self, i: usize) -> &Ball {
        &self.balls[i]
    }

    pub fn deadlines(&self) -> &[f64] {
        &self.deadlines
    }

    pub fn deadline(&self, i: usize) -> f64 {
        self.deadlines[i]
    }

    /// Gap distance `d_ij`: center distance minus both radii.
    pub fn gap(&self, i: usize, j: usize) -> f64 {
        self.gaps[i][j]
    }

    pub fn center_distance(&self, i: usize, j: usize) -> f64 {
        distance(self.balls[i].center, self.balls[j].center)
    }

    pub fn with_deadline(&self, i: usize, deadline: f64) -> Self {
        let mut deadlines = self.deadlines.clone();
        deadlines[i] = deadline;
        Self::new(self.balls.clone(), deadlines)
    }

    pub fn with_ball(&self, i: usize, ball: Ball) -> Self {
        let mut balls = self.balls.clone();
        balls[i] = ball;
        Self::new(balls, self.deadlines.clone())
    }

    /// Reorders parties: party `i` of the result is party `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::new(
            perm.iter().map(|&p| self.balls[p]).collect(),
            perm.iter().map(|&p| self.deadlines[p]).collect(),
        )
    }

    /// Rebuilds the cached distance matrix; needed after deserialization.
    pub fn refreshed(self) -> Self {
        Self::new(self.balls, self.deadlines)
    }
}

/// Checks every layout constraint and returns all violations found.
pub fn validate_layout(layout: &Layout) -> Result<(), Vec<LayoutViolation>> {
    let m = layout.parties();
    let mut out = Vec::new();
    if m < 2 {
        out.push(LayoutViolation::TooFewBalls { count: m });
    }
    if layout.deadlines.len() != m {
        out.push(LayoutViolation::DeadlineCount { balls: m, deadlines: layout.deadlines.len() });
        return Err(out);
    }
    for (i, ball) in layout.balls.iter().enumerate() {
        let finite = ball.radius.is_finite()
            && ball.center.iter().all(|c| c.is_finite())
            && layout.deadlines[i].is_finite();
        if !finite {
            out.push(LayoutViolation::NonFinite { i });
        }
    }
    if !out.is_empty() {
        return Err(out);
    }
    for (i, ball) in layout.balls.iter().enumerate() {
        if ball.radius <= 0.0 {
            out.push(LayoutViolation::NonPositiveRadius { i, radius: ball.radius });
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let gap = layout.gap(i, j);
            if gap <= 0.0 {
                out.push(LayoutViolation::Overlap { i, j, gap });
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let gap = layout.gap(i, j);
            let radius = layout.balls[i].radius;
            if 2.0 * radius >= gap {
                out.push(LayoutViolation::RadiusTooLarge { i, j, radius, gap });
            }
        }
    }
    for i in 0..m {
        let deadline = layout.deadlines[i];
        if deadline <= 0.0 {
            out.push(LayoutViolation::DeadlineNotPositive { i, deadline });
        }
        for j in 0..m {
            if i != j && deadline >= layout.gap(i, j) {
                out.push(LayoutViolation::DeadlineTooLate { i, j, deadline, gap: layout.gap(i, j) });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegionError {
    #[error("party index {index} out of range for {parties} parties")]
    IndexOutOfRange { index: usize, parties: usize },
    #[error("regions Q_ki and Q_ik need two distinct parties, got {0} twice")]
    SameParty(usize),
}

/// Whether the delivery regions `Q_ki` (ball `B_i`, times `[0, t_i]`) and
/// `Q_ik` (ball `B_k`, times `[0, t_k]`) are spacelike separated.
///
/// Both windows start at 0, so the largest `|Δt|` over the two regions is
/// `max(t_i, t_k)` and the smallest `‖Δpos‖` is `d_ik`, and both extremes are
/// attained together (the time and space coordinates vary independently).
/// The regions are therefore spacelike iff the corner pair formed by the
/// nearest points at times 0 and `max(t_i, t_k)` is spacelike, which is
/// `max(t_i, t_k) < d_ik` up to the lightlike tolerance.
pub fn regions_spacelike(layout: &Layout, i: usize, k: usize) -> Result<bool, RegionError> {
    let m = layout.parties();
    for index in [i, k] {
        if index >= m {
            return Err(RegionError::IndexOutOfRange { index, parties: m });
        }
    }
    if i == k {
        return Err(RegionError::SameParty(i));
    }
    let (bi, bk) = (layout.ball(i), layout.ball(k));
    let a = SpacetimeEvent::new(0.0, bi.nearest_point_towards(bk));
    let b = SpacetimeEvent::new(layout.deadline(i).max(layout.deadline(k)), bk.nearest_point_towards(bi));
    Ok(separation(&a, &b) == Separation::Spacelike)
}

//! Self/other segmentation of a decimated visual field.
//!
//! Each cell holds the log-odds that it shows the agent's own body. A
//! prediction step moves belief along a learned four-direction velocity field;
//! a measurement step adds evidence from the windowed correlation between the
//! cell's saliency and the agent's self-motion.

mod export;
mod synth;

pub use export::{metrics_csv, pbm_bytes, pgm_bytes, FrameMetrics};
pub use synth::{synthetic_sequence, SceneConfig, SyntheticScene};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const LOG_ODDS_MIN: f64 = -6.0;
pub const LOG_ODDS_MAX: f64 = 6.0;

fn clamp_log_odds(l: f64) -> f64 {
    l.clamp(LOG_ODDS_MIN, LOG_ODDS_MAX)
}

pub fn probability(log_odds: f64) -> f64 {
    1.0 / (1.0 + (-log_odds).exp())
}

pub fn log_odds(p: f64) -> f64 {
    clamp_log_odds((p / (1.0 - p)).ln())
}

/// Grid geometry and filter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    /// Image pixels per cell side.
    pub decimation: usize,
    /// Evidence window length [frames].
    pub window: usize,
    /// Likelihood steepness.
    pub beta: f64,
    /// Velocity EMA rate.
    pub rho: f64,
    /// Inbody threshold on P.
    pub tau: f64,
    #[serde(default)]
    pub per_cell_velocity: bool,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            width: 64,
            height: 48,
            decimation: 10,
            window: 15,
            beta: 2.0,
            rho: 0.1,
            tau: 0.5,
            per_cell_velocity: false,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.decimation == 0 {
            return bad("grid dimensions and decimation must be non-zero".into());
        }
        if self.window < 2 {
            return bad(format!(
                "evidence window must be at least 2 frames, got {}",
                self.window
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        Ok(())
    }
}

/// Row-major `width x height` field of cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub index: usize,
}

impl SaliencyFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, index: usize) -> Result<SaliencyFrame> {
        if data.len() != width * height {
            return Err(Error::domain(format!(
                "frame has {} cells, expected {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("saliency activations must lie in [0, 1]"));
        }
        Ok(SaliencyFrame {
            width,
            height,
            data,
            index,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    pub width: usize,
    pub height: usize,
    pub decimation: usize,
    log_odds: Vec<f64>,
}

impl BeliefGrid {
    /// Uniform prior P = 0.5.
    pub fn new(width: usize, height: usize, decimation: usize) -> BeliefGrid {
        BeliefGrid {
            width,
            height,
            decimation,
            log_odds: vec![0.0; width * height],
        }
    }

    pub fn from_log_odds(
        width: usize,
        height: usize,
        decimation: usize,
        values: Vec<f64>,
    ) -> Result<BeliefGrid> {
        if values.len() != width * height {
            return Err(Error::domain("log-odds field has the wrong size"));
        }
        Ok(BeliefGrid {
            width,
            height,
            decimation,
            log_odds: values.into_iter().map(clamp_log_odds).collect(),
        })
    }

    pub fn log_odds(&self) -> &[f64] {
        &self.log_odds
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_odds.iter().map(|&l| probability(l)).collect()
    }

    pub fn probability_at(&self, x: usize, y: usize) -> f64 {
        probability(self.log_odds[y * self.width + x])
    }

    fn same_shape(&self, w: usize, h: usize) -> Result<()> {
        if (self.width, self.height) != (w, h) {
            return Err(Error::domain(format!(
                "grid is {}x{} but input is {w}x{h}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Four-direction velocities [cells/frame].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity4 {
    pub up: f64,
    pub down: f64,
    pub left: f64,
    pub right: f64,
}

/// Order of the weights returned by [`Velocity4::transition_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    /// Cell whose content arrives at `(x, y)` when content moves this way.
    fn source(self, x: usize, y: usize, w: usize, h: usize) -> Option<(usize, usize)> {
        match self {
            Direction::Up => (y + 1 < h).then(|| (x, y + 1)),
            Direction::Down => (y > 0).then(|| (x, y - 1)),
            Direction::Left => (x + 1 < w).then(|| (x + 1, y)),
            Direction::Right => (x > 0).then(|| (x - 1, y)),
        }
    }
}

impl Velocity4 {
    pub fn get(&self, d: Direction) -> f64 {
        match d {
            Direction::Up => self.up,
            Direction::Down => self.down,
            Direction::Left => self.left,
            Direction::Right => self.right,
        }
    }

    fn set(&mut self, d: Direction, v: f64) {
        match d {
            Direction::Up => self.up = v,
            Direction::Down => self.down = v,
            Direction::Left => self.left = v,
            Direction::Right => self.right = v,
        }
    }

    pub fn stay_weight(&self) -> f64 {
        (1.0 - (self.up + self.down + self.left + self.right)).max(0.0)
    }

    /// Normalized `[stay, up, down, left, right]`.
    pub fn transition_weights(&self) -> [f64; 5] {
        let raw = [
            self.stay_weight(),
            self.up,
            self.down,
            self.left,
            self.right,
        ];
        let total: f64 = raw.iter().sum();
        raw.map(|w| w / total)
    }

    fn ema(&mut self, target: &Velocity4, rho: f64) {
        for d in Direction::ALL {
            self.set(d, (1.0 - rho) * self.get(d) + rho * target.get(d));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    Global(Velocity4),
    PerCell {
        width: usize,
        height: usize,
        cells: Vec<Velocity4>,
    },
}

impl VelocityField {
    pub fn zero(params: &GridParams) -> VelocityField {
        if params.per_cell_velocity {
            VelocityField::PerCell {
                width: params.width,
                height: params.height,
                cells: vec![Velocity4::default(); params.width * params.height],
            }
        } else {
            VelocityField::Global(Velocity4::default())
        }
    }

    fn at(&self, i: usize) -> &Velocity4 {
        match self {
            VelocityField::Global(v) => v,
            VelocityField::PerCell { cells, .. } => &cells[i],
        }
    }
}

/// Prediction step: each cell becomes the weighted average of itself and the
/// neighbours whose content flows into it.
///
/// At the border, missing neighbours are dropped and the remaining weights
/// renormalized; a cell with no remaining weight keeps its value. Per-cell
/// fields use the receiving cell's weights.
pub fn predict(exec: Exec, grid: &BeliefGrid, vel: &VelocityField) -> BeliefGrid {
    let (w, h) = (grid.width, grid.height);
    let p = grid.probabilities();
    let mut out = vec![0.0; w * h];
    par::for_each_indexed(exec, &mut out, |i, cell| {
        let (x, y) = (i % w, i / w);
        let weights = vel.at(i).transition_weights();
        let mut acc = weights[0] * p[i];
        let mut norm = weights[0];
        for (k, d) in Direction::ALL.iter().enumerate() {
            let wd = weights[k + 1];
            if wd == 0.0 {
                continue;
            }
            if let Some((sx, sy)) = d.source(x, y, w, h) {
                acc += wd * p[sy * w + sx];
                norm += wd;
            }
        }
        let next = if norm > 0.0 { acc / norm } else { p[i] };
        *cell = log_odds(next);
    });
    BeliefGrid {
        log_odds: out,
        ..grid.clone()
    }
}

/// Pearson correlation, or 0 when either series is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "series lengths differ");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let degenerate = |ss: f64, s: &[f64]| {
        let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ss <= n * (1e-9 * scale).powi(2)
    };
    if degenerate(saa, a) || degenerate(sbb, b) {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// L = exp(beta r), within [e^-beta, e^beta].
pub fn correlation_likelihood(cell_window: &[f64], motion_window: &[f64], beta: f64) -> f64 {
    (beta * pearson(cell_window, motion_window)).exp()
}

/// Trailing window of saliency frames and self-motion values.
#[derive(Debug, Clone)]
pub struct EvidenceWindow {
    len: usize,
    frames: VecDeque<SaliencyFrame>,
    motion: VecDeque<f64>,
}

impl EvidenceWindow {
    pub fn new(len: usize) -> Result<EvidenceWindow> {
        if len < 2 {
            return Err(Error::domain("window length must be at least 2"));
        }
        Ok(EvidenceWindow {
            len,
            frames: VecDeque::with_capacity(len),
            motion: VecDeque::with_capacity(len),
        })
    }

    pub fn push(&mut self, frame: SaliencyFrame, motion: f64) -> Result<()> {
        if !(motion >= 0.0 && motion.is_finite()) {
            return Err(Error::domain(format!(
                "self-motion must be non-negative, got {motion}"
            )));
        }
        if let Some(f) = self.frames.front() {
            if (f.width, f.height) != (frame.width, frame.height) {
                return Err(Error::domain("frame shape changed within the window"));
            }
        }
        if self.frames.len() == self.len {
            self.frames.pop_front();
            self.motion.pop_front();
        }
        self.frames.push_back(frame);
        self.motion.push_back(motion);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() == self.len
    }

    /// Per-cell log-likelihood `beta r`; `None` until the window is full.
    pub fn log_likelihoods(&self, exec: Exec, beta: f64) -> Option<Vec<f64>> {
        if !self.is_full() {
            return None;
        }
        let f0 = &self.frames[0];
        let motion: Vec<f64> = self.motion.iter().copied().collect();
        Some(par::map_range(exec, f0.width * f0.height, |i| {
            let series: Vec<f64> = self.frames.iter().map(|f| f.data[i]).collect();
            beta * pearson(&series, &motion)
        }))
    }
}

/// Adds per-cell log-likelihoods and clamps.
pub fn apply_log_likelihood(exec: Exec, grid: &BeliefGrid, log_l: &[f64]) -> Result<BeliefGrid> {
    if log_l.len() != grid.log_odds.len() {
        return Err(Error::domain("likelihood field has the wrong size"));
    }
    let mut out = grid.log_odds.clone();
    par::for_each_indexed(exec, &mut out, |i, l| *l = clamp_log_odds(*l + log_l[i]));
    Ok(BeliefGrid {
        log_odds: out,
        ..grid.clone()
    })
}

/// Measurement step; a window that is not yet full leaves the grid unchanged.
pub fn update(
    exec: Exec,
    grid: &BeliefGrid,
    window: &EvidenceWindow,
    beta: f64,
) -> Result<BeliefGrid> {
    if let Some(f) = window.frames.front() {
        grid.same_shape(f.width, f.height)?;
    }
    match window.log_likelihoods(exec, beta) {
        Some(ll) => apply_log_likelihood(exec, grid, &ll),
        None => Ok(grid.clone()),
    }
}

/// Correlation of `curr` with `prev` displaced one cell in `dir` (or not at
/// all), over the cells where the displaced source exists.
fn match_score(
    prev: &SaliencyFrame,
    curr: &SaliencyFrame,
    dir: Option<Direction>,
    region: Option<(usize, usize)>,
) -> f64 {
    let (w, h) = (curr.width, curr.height);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let (xs, ys) = match region {
        Some((cx, cy)) => (
            cx.saturating_sub(1)..(cx + 2).min(w),
            cy.saturating_sub(1)..(cy + 2).min(h),
        ),
        None => (0..w, 0..h),
    };
    for y in ys {
        for x in xs.clone() {
            let src = match dir {
                None => Some((x, y)),
                Some(d) => d.source(x, y, w, h),
            };
            if let Some((sx, sy)) = src {
                a.push(curr.at(x, y));
                b.push(prev.at(sx, sy));
            }
        }
    }
    pearson(&a, &b)
}

fn instantaneous_velocity(
    prev: &SaliencyFrame,
    curr: &SaliencyFrame,
    region: Option<(usize, usize)>,
) -> Velocity4 {
    let stay = match_score(prev, curr, None, region);
    let mut v = Velocity4::default();
    for d in Direction::ALL {
        v.set(
            d,
            (match_score(prev, curr, Some(d), region) - stay).max(0.0),
        );
    }
    let total = v.up + v.down + v.left + v.right;
    if total > 0.0 {
        for d in Direction::ALL {
            v.set(d, v.get(d) / total);
        }
    }
    v
}

/// EMA update of the velocity field from two consecutive frames.
///
/// Per-cell fields score each cell on its 3x3 neighbourhood.
pub fn learn_velocities(
    exec: Exec,
    prev: &SaliencyFrame,
    curr: &SaliencyFrame,
    field: &VelocityField,
    rho: f64,
) -> Result<VelocityField> {
    if (prev.width, prev.height) != (curr.width, curr.height) {
        return Err(Error::domain("consecutive frames differ in shape"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::domain(format!("rho must lie in (0, 1], got {rho}")));
    }
    Ok(match field {
        VelocityField::Global(v) => {
            let mut next = *v;
            next.ema(&instantaneous_velocity(prev, curr, None), rho);
            VelocityField::Global(next)
        }
        VelocityField::PerCell {
            width,
            height,
            cells,
        } => {
            let (w, h) = (*width, *height);
            if (w, h) != (curr.width, curr.height) {
                return Err(Error::domain("velocity field and frames differ in shape"));
            }
            let mut next = cells.clone();
            par::for_each_indexed(exec, &mut next, |i, v| {
                v.ema(
                    &instantaneous_velocity(prev, curr, Some((i % w, i / w))),
                    rho,
                );
            });
            VelocityField::PerCell {
                width: w,
                height: h,
                cells: next,
            }
        }
    })
}

/// Row-major inbody mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

/// Inbody iff P >= tau (ties are inbody).
pub fn classify(grid: &BeliefGrid, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain(format!(
            "threshold must lie in (0, 1), got {tau}"
        )));
    }
    Ok(Mask {
        width: grid.width,
        height: grid.height,
        cells: grid
            .log_odds
            .iter()
            .map(|&l| probability(l) >= tau)
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub grid: BeliefGrid,
    pub velocity: VelocityField,
    pub mask: Mask,
}

pub fn run_sequence(
    exec: Exec,
    frames: &[SaliencyFrame],
    motions: &[f64],
    params: &GridParams,
) -> Result<SequenceResult> {
    run_sequence_observed(exec, frames, motions, params, |_, _| {})
}

/// Runs the filter, calling `observe(frame_index, grid)` after each frame.
pub fn run_sequence_observed(
    exec: Exec,
    frames: &[SaliencyFrame],
    motions: &[f64],
    params: &GridParams,
    mut observe: impl FnMut(usize, &BeliefGrid),
) -> Result<SequenceResult> {
    params.validate()?;
    if frames.len() != motions.len() {
        return Err(Error::domain(format!(
            "{} frames but {} self-motion samples",
            frames.len(),
            motions.len()
        )));
    }
    let mut grid = BeliefGrid::new(params.width, params.height, params.decimation);
    let mut velocity = VelocityField::zero(params);
    let mut window = EvidenceWindow::new(params.window)?;
    for (t, (frame, &m)) in frames.iter().zip(motions).enumerate() {
        grid.same_shape(frame.width, frame.height)?;
        if t > 0 {
            velocity = learn_velocities(exec, &frames[t - 1], frame, &velocity, params.rho)?;
        }
        grid = predict(exec, &grid, &velocity);
        window.push(frame.clone(), m)?;
        grid = update(exec, &grid, &window, params.beta)?;
        observe(t, &grid);
    }
    let mask = classify(&grid, params.tau)?;
    Ok(SequenceResult {
        grid,
        velocity,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_from_p(w: usize, h: usize, p: &[f64]) -> BeliefGrid {
        BeliefGrid::from_log_odds(w, h, 1, p.iter().map(|&v| log_odds(v)).collect()).unwrap()
    }

    fn global(up: f64, down: f64, left: f64, right: f64) -> VelocityField {
        VelocityField::Global(Velocity4 {
            up,
            down,
            left,
            right,
        })
    }

    fn frame(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> SaliencyFrame {
        SaliencyFrame::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect(), 0).unwrap()
    }

    #[test]
    fn zero_velocity_is_identity() {
        let g = grid_from_p(
            4,
            3,
            &[
                0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.35, 0.45, 0.55,
            ],
        );
        let next = predict(Exec::Sequential, &g, &global(0.0, 0.0, 0.0, 0.0));
        for (a, b) in g.log_odds().iter().zip(next.log_odds()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_grid_stays_uniform() {
        let g = grid_from_p(5, 5, &[0.3; 25]);
        let next = predict(Exec::Sequential, &g, &global(0.1, 0.2, 0.05, 0.3));
        assert!(next.probabilities().iter().all(|p| (p - 0.3).abs() < 1e-12));
    }

    #[test]
    fn mass_moves_right_one_cell() {
        let (lo, hi) = (0.01, 0.9);
        let mut p = [lo; 9];
        p[4] = hi;
        let g = grid_from_p(3, 3, &p);
        let next = predict(Exec::Sequential, &g, &global(0.0, 0.0, 0.0, 1.0)).probabilities();
        // Hand propagation: column x >= 1 takes its left neighbour, column 0 keeps itself.
        let mut expected = [lo; 9];
        expected[5] = hi;
        for i in 0..9 {
            assert!((next[i] - expected[i]).abs() < 1e-12, "cell {i}");
        }
    }

    #[test]
    fn interior_mass_is_conserved() {
        let (w, h) = (9, 7);
        let mut p = vec![0.2; w * h];
        p[3 * w + 4] = 0.9;
        p[3 * w + 3] = 0.6;
        let g = grid_from_p(w, h, &p);
        let next = predict(Exec::Sequential, &g, &global(0.1, 0.15, 0.2, 0.05));
        let before: f64 = g.probabilities().iter().sum();
        let after: f64 = next.probabilities().iter().sum();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn transition_weights_sum_to_one() {
        for v in [
            Velocity4 {
                up: 0.0,
                down: 0.0,
                left: 0.0,
                right: 0.0,
            },
            Velocity4 {
                up: 0.4,
                down: 0.4,
                left: 0.4,
                right: 0.4,
            },
            Velocity4 {
                up: 0.1,
                down: 0.0,
                left: 0.3,
                right: 0.2,
            },
        ] {
            assert!((v.transition_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_extremes() {
        let m = [0.0, 1.0, 0.5, 0.2, 0.9];
        let beta = 2.0;
        let scaled: Vec<f64> = m.iter().map(|v| 0.1 + 0.5 * v).collect();
        assert!((correlation_likelihood(&scaled, &m, beta) - beta.exp()).abs() < 1e-12);
        let anti: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        assert!((correlation_likelihood(&anti, &m, beta) - (-beta).exp()).abs() < 1e-12);
        assert_eq!(correlation_likelihood(&[0.1; 5], &m, beta), 1.0);
        assert_eq!(correlation_likelihood(&m, &[0.0; 5], beta), 1.0);
    }

    #[test]
    fn single_bayes_step() {
        let g = BeliefGrid::new(1, 1, 1);
        let next = apply_log_likelihood(Exec::Sequential, &g, &[3f64.ln()]).unwrap();
        assert!((next.probability_at(0, 0) - 0.75).abs() < 1e-12);
        let same = apply_log_likelihood(Exec::Sequential, &g, &[0.0]).unwrap();
        assert_eq!(same, g);
    }

    #[test]
    fn update_waits_for_full_window() {
        let g = BeliefGrid::new(2, 2, 1);
        let mut win = EvidenceWindow::new(3).unwrap();
        win.push(frame(2, 2, |x, _| x as f64 * 0.5), 0.3).unwrap();
        win.push(frame(2, 2, |_, y| y as f64 * 0.5), 0.7).unwrap();
        assert_eq!(update(Exec::Sequential, &g, &win, 2.0).unwrap(), g);
    }

    #[test]
    fn scripted_three_by_three_matches_manual_recursion() {
        // Window 2: correlation of two points is the sign of the product of
        // the two increments (or 0 if either is flat).
        let beta = 1.5;
        let motions: [f64; 3] = [0.2, 0.8, 0.5];
        let frames = [
            frame(3, 3, |x, y| 0.1 * (x + y) as f64),
            frame(3, 3, |x, y| if x == 1 { 0.9 } else { 0.1 * (x + y) as f64 }),
            frame(3, 3, |x, y| {
                if y == 2 {
                    0.0
                } else if x == 1 {
                    0.4
                } else {
                    0.1 * (x + y) as f64
                }
            }),
        ];
        let mut manual = [0.0f64; 9];
        for t in 1..3 {
            let dm = motions[t] - motions[t - 1];
            for i in 0..9 {
                let ds = frames[t].data[i] - frames[t - 1].data[i];
                let r = if ds.abs() < 1e-12 || dm.abs() < 1e-12 {
                    0.0
                } else {
                    (ds * dm).signum()
                };
                manual[i] = (manual[i] + beta * r).clamp(-6.0, 6.0);
            }
        }
        let mut grid = BeliefGrid::new(3, 3, 1);
        let mut win = EvidenceWindow::new(2).unwrap();
        for t in 0..3 {
            win.push(frames[t].clone(), motions[t]).unwrap();
            grid = update(Exec::Sequential, &grid, &win, beta).unwrap();
        }
        for i in 0..9 {
            assert!((grid.log_odds()[i] - manual[i]).abs() < 1e-12, "cell {i}");
        }
    }

    #[test]
    fn static_scene_decays_velocity() {
        let f = frame(8, 6, |x, y| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        let v =
            learn_velocities(Exec::Sequential, &f, &f, &global(0.4, 0.0, 0.2, 0.1), 0.5).unwrap();
        assert_eq!(v, global(0.2, 0.0, 0.1, 0.05));
    }

    fn stripes(shift: i64) -> SaliencyFrame {
        frame(16, 6, |x, _| {
            0.5 + 0.5 * (2.0 * std::f64::consts::PI * (x as i64 - shift) as f64 / 16.0).sin()
        })
    }

    #[test]
    fn pure_translation_converges_right() {
        let mut field = VelocityField::zero(&GridParams::default());
        let rho = 0.3;
        for k in 0..30 {
            field = learn_velocities(Exec::Sequential, &stripes(k), &stripes(k + 1), &field, rho)
                .unwrap();
            let VelocityField::Global(v) = field else {
                unreachable!()
            };
            let expected = 1.0 - (1.0 - rho).powi(k as i32 + 1);
            assert!((v.right - expected).abs() < 1e-9, "step {k}: {}", v.right);
            assert!(v.left.abs() < 1e-9 && v.up.abs() < 1e-9 && v.down.abs() < 1e-9);
        }
    }

    #[test]
    fn alternating_shifts_follow_ema_closed_form() {
        let rho = 0.5;
        let mut field = VelocityField::zero(&GridParams::default());
        let (mut r, mut l) = (0.0f64, 0.0f64);
        let mut pos = 0;
        for k in 0..12 {
            let next = if k % 2 == 0 { pos + 1 } else { pos - 1 };
            field = learn_velocities(Exec::Sequential, &stripes(pos), &stripes(next), &field, rho)
                .unwrap();
            let (tr, tl) = if k % 2 == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            r = (1.0 - rho) * r + rho * tr;
            l = (1.0 - rho) * l + rho * tl;
            let VelocityField::Global(v) = field else {
                unreachable!()
            };
            assert!(
                (v.right - r).abs() < 1e-9 && (v.left - l).abs() < 1e-9,
                "step {k}"
            );
            pos = next;
        }
    }

    #[test]
    fn per_cell_translation_points_right_in_the_interior() {
        let params = GridParams {
            per_cell_velocity: true,
            width: 16,
            height: 6,
            ..GridParams::default()
        };
        let mut field = VelocityField::zero(&params);
        for k in 0..10 {
            field = learn_velocities(Exec::Parallel, &stripes(k), &stripes(k + 1), &field, 0.5)
                .unwrap();
        }
        let VelocityField::PerCell { cells, .. } = &field else {
            unreachable!()
        };
        let v = cells[3 * 16 + 7];
        assert!(v.right > 0.99 && v.left < 1e-9);
    }

    #[test]
    fn classify_rules() {
        let sat = BeliefGrid::from_log_odds(2, 2, 1, vec![6.0; 4]).unwrap();
        assert!(classify(&sat, 0.5).unwrap().cells.iter().all(|&c| c));
        let tie = BeliefGrid::new(2, 2, 1);
        assert!(classify(&tie, 0.5).unwrap().cells.iter().all(|&c| c));
        let mixed = BeliefGrid::from_log_odds(3, 1, 1, vec![-1.0, 0.3, 2.0]).unwrap();
        let oracle: Vec<bool> = mixed
            .log_odds()
            .iter()
            .map(|&l| 1.0 / (1.0 + (-l).exp()) >= 0.6)
            .collect();
        assert_eq!(classify(&mixed, 0.6).unwrap().cells, oracle);
        assert!(classify(&tie, 1.0).is_err());
    }

    #[test]
    fn stream_length_mismatch_rejected() {
        let f = frame(2, 2, |_, _| 0.5);
        let r = run_sequence(
            Exec::Sequential,
            &[f],
            &[0.1, 0.2],
            &GridParams {
                width: 2,
                height: 2,
                ..GridParams::default()
            },
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn static_scene_without_motion_stays_at_prior() {
        let params = GridParams {
            width: 4,
            height: 3,
            window: 3,
            ..GridParams::default()
        };
        let frames: Vec<_> = (0..10)
            .map(|_| frame(4, 3, |x, y| 0.1 * (x + y) as f64))
            .collect();
        let out = run_sequence(Exec::Sequential, &frames, &[0.0; 10], &params).unwrap();
        assert!(out.grid.log_odds().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn synthetic_arm_and_distractor_separate() {
        let params = GridParams::default();
        let arm = crate::arm_sim::ArmConfig::default();
        let pose = crate::arm_sim::JointState::new(0.3, 1.2, 0.9);
        for seed in [1, 2, 3] {
            let scene =
                synthetic_sequence(&arm, &pose, &params, &SceneConfig::default(), seed).unwrap();
            let out = run_sequence(Exec::Parallel, &scene.frames, &scene.motion, &params).unwrap();
            let p = out.grid.probabilities();
            let frac = |sel: &dyn Fn(usize) -> bool, ok: &dyn Fn(f64) -> bool| {
                let idx: Vec<usize> = (0..p.len()).filter(|&i| sel(i)).collect();
                idx.iter().filter(|&&i| ok(p[i])).count() as f64 / idx.len() as f64
            };
            let inb = frac(&|i| scene.inbody[i], &|v| v > 0.9);
            let outb = frac(&|i| !scene.inbody[i], &|v| v < 0.1);
            let dist = frac(&|i| scene.distractor[i], &|v| v < 0.1);
            assert!(
                inb >= 0.95 && outb >= 0.95 && dist >= 0.95,
                "seed {seed}: {inb} {outb} {dist}"
            );
        }
    }

    proptest! {
        #[test]
        fn log_odds_stay_clamped(vals in proptest::collection::vec(-20.0f64..20.0, 12), ll in proptest::collection::vec(-20.0f64..20.0, 12),
                                 v in (0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.5)) {
            let g = BeliefGrid::from_log_odds(4, 3, 1, vals).unwrap();
            let g = apply_log_likelihood(Exec::Sequential, &g, &ll).unwrap();
            let g = predict(Exec::Sequential, &g, &global(v.0, v.1, v.2, v.3));
            prop_assert!(g.log_odds().iter().all(|l| (LOG_ODDS_MIN..=LOG_ODDS_MAX).contains(l)));
        }

        #[test]
        fn update_commutes_with_cell_order(ll in proptest::collection::vec(-3.0f64..3.0, 9), perm_seed in 0u64..1000) {
            let g = BeliefGrid::from_log_odds(3, 3, 1, (0..9).map(|i| i as f64 * 0.3 - 1.2).collect()).unwrap();
            let direct = apply_log_likelihood(Exec::Sequential, &g, &ll).unwrap();
            // Visit cells in a shuffled order, one single-cell update at a time.
            let mut order: Vec<usize> = (0..9).collect();
            order.rotate_left((perm_seed % 9) as usize);
            if perm_seed % 2 == 1 { order.reverse(); }
            let mut step = g.clone();
            for i in order {
                let mut one = vec![0.0; 9];
                one[i] = ll[i];
                step = apply_log_likelihood(Exec::Sequential, &step, &one).unwrap();
            }
            prop_assert_eq!(direct, step);
        }

        #[test]
        fn learned_velocities_stay_in_unit_interval(seed in 0u64..500, rho in 0.05f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut field = VelocityField::zero(&GridParams::default());
            for _ in 0..5 {
                let a = frame(6, 5, |_, _| rng.gen::<f64>());
                let b = frame(6, 5, |_, _| rng.gen::<f64>());
                field = learn_velocities(Exec::Sequential, &a, &b, &field, rho).unwrap();
            }
            let VelocityField::Global(v) = field else { unreachable!() };
            for d in Direction::ALL { prop_assert!((0.0..=1.0).contains(&v.get(d))); }
            prop_assert!((v.transition_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

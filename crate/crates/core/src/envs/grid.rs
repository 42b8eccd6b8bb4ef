//! Pixel-observation grid world: a 7x4-cell room rendered to a 28x28
//! grayscale image in [0, 1]. The goal cell is absorbing; every step on the
//! goal pays the full reward, every step off it the small one, so delaying
//! the agent is directly visible in the return.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepOutcome};
use crate::scalar::Scalar;

pub const GRID_ACTIONS: usize = 4; // up, down, left, right

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridLayout {
    /// Cells across.
    pub cols: usize,
    /// Cells down.
    pub rows: usize,
    /// Pixels per cell horizontally / vertically.
    pub cell_w: usize,
    pub cell_h: usize,
    /// (row, col) of the absorbing goal.
    pub goal: (usize, usize),
    /// Fixed start cell; None draws a random non-goal cell per episode.
    pub start: Option<(usize, usize)>,
    pub horizon: usize,
    pub step_reward: f64,
    pub goal_reward: f64,
    /// Rendering shades.
    pub background: f64,
    pub goal_shade: f64,
    pub agent_shade: f64,
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout {
            cols: 7,
            rows: 4,
            cell_w: 4,
            cell_h: 7,
            goal: (3, 6),
            start: None,
            horizon: 40,
            step_reward: 0.1,
            goal_reward: 1.0,
            background: 0.1,
            goal_shade: 0.5,
            agent_shade: 0.9,
        }
    }
}

impl GridLayout {
    pub fn image_height(&self) -> usize {
        self.rows * self.cell_h
    }

    pub fn image_width(&self) -> usize {
        self.cols * self.cell_w
    }

    /// Shortest-path distance in moves from `from` to the goal, by
    /// breadth-first search over cells.
    pub fn bfs_distance(&self, from: (usize, usize)) -> usize {
        if from == self.goal {
            return 0;
        }
        let mut dist = vec![usize::MAX; self.rows * self.cols];
        let idx = |r: usize, c: usize| r * self.cols + c;
        let mut queue = std::collections::VecDeque::new();
        dist[idx(from.0, from.1)] = 0;
        queue.push_back(from);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[idx(r, c)];
            if (r, c) == self.goal {
                return d;
            }
            let mut push = |nr: usize, nc: usize| {
                if dist[idx(nr, nc)] == usize::MAX {
                    dist[idx(nr, nc)] = d + 1;
                    queue.push_back((nr, nc));
                }
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < self.rows {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < self.cols {
                push(r, c + 1);
            }
        }
        usize::MAX
    }

    /// Return of the shortest-path-then-stay policy from `start`.
    pub fn oracle_return(&self, start: (usize, usize)) -> f64 {
        let d = self.bfs_distance(start);
        if d >= self.horizon {
            return self.step_reward * self.horizon as f64;
        }
        // moves 1..d-1 pay step_reward, move d lands on the goal, the rest stay
        self.step_reward * (d.saturating_sub(1)) as f64
            + self.goal_reward * (self.horizon - d + 1).min(self.horizon) as f64
    }
}

/// Pure rendering: cell state -> 28x28 grayscale, deterministic, values in
/// [0, 1], distinct agent cells give distinct images.
pub fn render<F: Scalar>(layout: &GridLayout, agent: (usize, usize)) -> Vec<F> {
    let (h, w) = (layout.image_height(), layout.image_width());
    let mut img = vec![F::from_f64_c(layout.background); h * w];
    let mut fill = |cell: (usize, usize), shade: f64| {
        let top = cell.0 * layout.cell_h;
        let left = cell.1 * layout.cell_w;
        for y in top..top + layout.cell_h {
            for x in left..left + layout.cell_w {
                img[y * w + x] = F::from_f64_c(shade);
            }
        }
    };
    fill(layout.goal, layout.goal_shade);
    fill(agent, layout.agent_shade);
    img
}

#[derive(Clone)]
pub struct GridPixels<F: Scalar> {
    pub layout: GridLayout,
    agent: (usize, usize),
    steps: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> GridPixels<F> {
    pub fn new(layout: GridLayout) -> Self {
        let start = layout.start.unwrap_or((0, 0));
        GridPixels { layout, agent: start, steps: 0, _marker: std::marker::PhantomData }
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    /// Start cell drawn for a given episode seed (shared by the oracle).
    pub fn start_cell_for_seed(layout: &GridLayout, seed: u64) -> (usize, usize) {
        if let Some(s) = layout.start {
            return s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let r = rng.gen_range(0..layout.rows);
            let c = rng.gen_range(0..layout.cols);
            if (r, c) != layout.goal {
                return (r, c);
            }
        }
    }
}

impl<F: Scalar> Environment<F> for GridPixels<F> {
    fn id(&self) -> &str {
        "grid"
    }

    fn obs_dim(&self) -> usize {
        self.layout.image_height() * self.layout.image_width()
    }

    fn n_actions(&self) -> usize {
        GRID_ACTIONS
    }

    fn horizon(&self) -> usize {
        self.layout.horizon
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        Some((self.layout.image_height(), self.layout.image_width()))
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (0.0, self.layout.goal_reward)
    }

    fn reset(&mut self, seed: u64) -> Vec<F> {
        self.agent = Self::start_cell_for_seed(&self.layout, seed);
        self.steps = 0;
        render(&self.layout, self.agent)
    }

    fn step(&mut self, action: usize) -> StepOutcome<F> {
        if self.agent != self.layout.goal {
            let (r, c) = self.agent;
            self.agent = match action {
                0 => (r.saturating_sub(1), c),
                1 => ((r + 1).min(self.layout.rows - 1), c),
                2 => (r, c.saturating_sub(1)),
                _ => (r, (c + 1).min(self.layout.cols - 1)),
            };
        }
        self.steps += 1;
        let on_goal = self.agent == self.layout.goal;
        StepOutcome {
            obs: render(&self.layout, self.agent),
            reward: F::from_f64_c(if on_goal { self.layout.goal_reward } else { self.layout.step_reward }),
            done: self.steps >= self.layout.horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_agent_cells_render_distinct_images() {
        let layout = GridLayout::default();
        let a: Vec<f64> = render(&layout, (0, 0));
        let b: Vec<f64> = render(&layout, (0, 1));
        assert_ne!(a, b);
        let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(diff >= 1);
    }

    #[test]
    fn render_is_pure() {
        let layout = GridLayout::default();
        let a: Vec<f64> = render(&layout, (2, 3));
        let b: Vec<f64> = render(&layout, (2, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn image_patchifies_into_four_patches() {
        let layout = GridLayout::default();
        assert_eq!(layout.image_height(), 28);
        assert_eq!(layout.image_width(), 28);
        let side = 14;
        let x = (layout.image_height() / side) * (layout.image_width() / side);
        assert_eq!(x, 4);
    }

    #[test]
    fn bfs_matches_manhattan_in_open_grid() {
        let layout = GridLayout::default();
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                let manhattan =
                    (layout.goal.0 as i64 - r as i64).unsigned_abs() as usize
                        + (layout.goal.1 as i64 - c as i64).unsigned_abs() as usize;
                assert_eq!(layout.bfs_distance((r, c)), manhattan);
            }
        }
    }

    #[test]
    fn oracle_return_matches_simulated_shortest_path() {
        let layout = GridLayout::default();
        // simulate: go right then down from (0, 0)
        let mut env: GridPixels<f64> = GridPixels::new(GridLayout { start: Some((0, 0)), ..layout.clone() });
        env.reset(0);
        let mut total = 0.0;
        for step in 0..layout.horizon {
            let action = if step < 6 { 3 } else { 1 }; // 6 right, then down
            let out = env.step(action);
            total += out.reward;
        }
        assert!((total - layout.oracle_return((0, 0))).abs() < 1e-9);
    }

    #[test]
    fn rewards_stay_in_unit_interval() {
        let layout = GridLayout::default();
        let mut env: GridPixels<f64> = GridPixels::new(layout);
        env.reset(3);
        for _ in 0..40 {
            let out = env.step(1);
            assert!(out.reward > 0.0 && out.reward <= 1.0);
        }
    }
}

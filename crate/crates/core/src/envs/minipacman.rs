use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Observation, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up = 0,
    Left = 1,
    Down = 2,
    Right = 3,
    Noop = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Up, Action::Left, Action::Down, Action::Right, Action::Noop];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Left => (0, -1),
            Action::Down => (1, 0),
            Action::Right => (0, 1),
            Action::Noop => (0, 0),
        }
    }
}

/// Layout legend: `#` wall, `.` pill, ` ` empty corridor, `P` player start,
/// `G` ghost start. Rows must have equal length.
pub const DEFAULT_LAYOUT: [&str; 13] = [
    "#############",
    "#P....#.....#",
    "#.##..#..##.#",
    "#...........#",
    "#.##.###.##.#",
    "#.....G.....#",
    "###.#####.###",
    "#.....G.....#",
    "#.##.###.##.#",
    "#...........#",
    "#.##..#..##.#",
    "#.....#.....#",
    "#############",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniPacmanConfig {
    pub layout: Vec<String>,
    /// Ghosts move once every this many raw steps.
    pub ghost_period: usize,
    /// Episodes end after this many raw steps.
    pub max_steps: usize,
    pub pill_reward: f64,
    pub ghost_reward: f64,
}

impl Default for MiniPacmanConfig {
    fn default() -> Self {
        Self {
            layout: DEFAULT_LAYOUT.iter().map(|s| s.to_string()).collect(),
            ghost_period: 2,
            max_steps: 400,
            pill_reward: 1.0,
            ghost_reward: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacmanState {
    pub player: (usize, usize),
    pub ghosts: Vec<(usize, usize)>,
    pub pills: Vec<bool>,
    pub done: bool,
    pub steps: usize,
}

const WALL: [u8; 3] = [40, 60, 220];
const PILL: [u8; 3] = [255, 255, 255];
const PLAYER: [u8; 3] = [255, 230, 0];
const GHOST: [u8; 3] = [230, 30, 30];

#[derive(Clone, Debug)]
pub struct MiniPacman {
    config: MiniPacmanConfig,
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    start_player: (usize, usize),
    start_ghosts: Vec<(usize, usize)>,
    start_pills: Vec<bool>,
    height: usize,
    width: usize,
    state: PacmanState,
    rng: ChaCha8Rng,
    raw_steps: u64,
}

impl MiniPacman {
    pub fn new(config: MiniPacmanConfig, height: usize, width: usize, rng: ChaCha8Rng) -> Result<Self> {
        let rows = config.layout.len();
        let cols = config.layout.first().map_or(0, |r| r.chars().count());
        if rows == 0 || cols == 0 || config.layout.iter().any(|r| r.chars().count() != cols) {
            return Err(Error::Config("layout rows must be nonempty and of equal length".into()));
        }
        if height < rows || width < cols {
            return Err(Error::Config(format!(
                "{rows}x{cols} layout does not fit a {height}x{width} frame"
            )));
        }
        if config.ghost_period == 0 || config.max_steps == 0 {
            return Err(Error::Config("ghost_period and max_steps must be positive".into()));
        }
        let mut walls = vec![false; rows * cols];
        let mut pills = vec![false; rows * cols];
        let mut player = None;
        let mut ghosts = Vec::new();
        for (r, line) in config.layout.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                let i = r * cols + c;
                match ch {
                    '#' => walls[i] = true,
                    '.' => pills[i] = true,
                    ' ' => {}
                    'P' if player.is_none() => player = Some((r, c)),
                    'G' => ghosts.push((r, c)),
                    other => return Err(Error::Config(format!("unexpected layout cell {other:?}"))),
                }
            }
        }
        let player = player.ok_or_else(|| Error::Config("layout has no player".into()))?;
        let state = PacmanState {
            player,
            ghosts: ghosts.clone(),
            pills: pills.clone(),
            done: false,
            steps: 0,
        };
        Ok(Self {
            config,
            rows,
            cols,
            walls,
            start_player: player,
            start_ghosts: ghosts,
            start_pills: pills,
            height,
            width,
            state,
            rng,
            raw_steps: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn state(&self) -> &PacmanState {
        &self.state
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls[r * self.cols + c]
    }

    pub fn pills_left(&self) -> usize {
        self.state.pills.iter().filter(|&&p| p).count()
    }

    pub fn reset(&mut self) -> Observation {
        self.state = PacmanState {
            player: self.start_player,
            ghosts: self.start_ghosts.clone(),
            pills: self.start_pills.clone(),
            done: false,
            steps: 0,
        };
        self.render()
    }

    fn moved(&self, pos: (usize, usize), a: Action) -> (usize, usize) {
        let (dr, dc) = a.delta();
        let r = pos.0 as isize + dr;
        let c = pos.1 as isize + dc;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            return pos;
        }
        let (r, c) = (r as usize, c as usize);
        if self.is_wall(r, c) {
            pos
        } else {
            (r, c)
        }
    }

    /// Open neighbouring cells of `pos`, in action order.
    pub fn neighbours(&self, pos: (usize, usize)) -> Vec<(Action, (usize, usize))> {
        Action::ALL[..4]
            .iter()
            .map(|&a| (a, self.moved(pos, a)))
            .filter(|&(_, p)| p != pos)
            .collect()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        let a =
            Action::from_index(action).ok_or_else(|| Error::InvalidInput(format!("action {action} out of range")))?;
        self.raw_steps += 1;
        self.state.steps += 1;
        let mut reward = 0.0;
        let before = self.state.player;
        self.state.player = self.moved(before, a);
        let p = self.state.player;
        let idx = p.0 * self.cols + p.1;
        if self.state.pills[idx] {
            self.state.pills[idx] = false;
            reward += self.config.pill_reward;
        }
        let mut caught = self.state.ghosts.contains(&p);
        if !caught && self.state.steps.is_multiple_of(self.config.ghost_period) {
            let old = self.state.ghosts.clone();
            for (g, &from) in old.iter().enumerate() {
                let options = self.neighbours(from);
                if !options.is_empty() {
                    let k = self.rng.random_range(0..options.len());
                    self.state.ghosts[g] = options[k].1;
                }
                // Caught either on the same cell or by swapping cells.
                let new = self.state.ghosts[g];
                if new == p || (new == before && from == p) {
                    caught = true;
                }
            }
        }
        if caught {
            reward += self.config.ghost_reward;
        }
        let done = caught || !self.state.pills.iter().any(|&x| x) || self.state.steps >= self.config.max_steps;
        self.state.done = done;
        Ok(StepResult {
            observation: self.render(),
            reward,
            done,
        })
    }

    pub fn render(&self) -> Observation {
        let mut obs = Observation::blank(self.height, self.width).expect("validated frame size");
        let cell = (self.height / self.rows).min(self.width / self.cols);
        let oy = (self.height - cell * self.rows) / 2;
        let ox = (self.width - cell * self.cols) / 2;
        let at = |r: usize, c: usize| (oy + r * cell, ox + c * cell);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (y, x) = at(r, c);
                if self.is_wall(r, c) {
                    obs.fill_rect(y, x, cell, cell, WALL);
                } else if self.state.pills[r * self.cols + c] {
                    let s = (cell / 3).max(1);
                    let off = (cell - s) / 2;
                    obs.fill_rect(y + off, x + off, s, s, PILL);
                }
            }
        }
        let (y, x) = at(self.state.player.0, self.state.player.1);
        obs.fill_rect(y, x, cell, cell, PLAYER);
        for &(r, c) in &self.state.ghosts {
            let (y, x) = at(r, c);
            obs.fill_rect(y, x, cell, cell, GHOST);
        }
        obs
    }

    pub fn raw_steps(&self) -> u64 {
        self.raw_steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// First action of a shortest path to the nearest pill that keeps clear of
    /// cells next to a ghost; falls back to ignoring ghosts. `None` if no pill
    /// is reachable.
    pub fn nearest_pill_action(&self) -> Option<Action> {
        let mut danger = vec![false; self.rows * self.cols];
        for &g in &self.state.ghosts {
            danger[g.0 * self.cols + g.1] = true;
            for (_, q) in self.neighbours(g) {
                danger[q.0 * self.cols + q.1] = true;
            }
        }
        self.pill_search(&danger)
            .or_else(|| self.pill_search(&vec![false; self.rows * self.cols]))
    }

    fn pill_search(&self, blocked: &[bool]) -> Option<Action> {
        let start = self.state.player;
        let mut first: Vec<Option<Action>> = vec![None; self.rows * self.cols];
        let mut seen = vec![false; self.rows * self.cols];
        let mut queue = VecDeque::new();
        seen[start.0 * self.cols + start.1] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let i = p.0 * self.cols + p.1;
            if p != start && self.state.pills[i] {
                return first[i];
            }
            for (a, q) in self.neighbours(p) {
                let j = q.0 * self.cols + q.1;
                if !seen[j] && !blocked[j] {
                    seen[j] = true;
                    first[j] = if p == start { Some(a) } else { first[i] };
                    queue.push_back(q);
                }
            }
        }
        None
    }
}

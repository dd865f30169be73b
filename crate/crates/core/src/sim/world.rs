use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    /// Unit step in grid coordinates; y grows downward (screen-up is N).
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn left(self) -> Self {
        Self::ALL[(self as usize + 3) % 4]
    }

    pub fn right(self) -> Self {
        Self::ALL[(self as usize + 1) % 4]
    }
}

/// The six heading-relative actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    Backward,
    StrafeLeft,
    StrafeRight,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::Forward,
        Action::Backward,
        Action::StrafeLeft,
        Action::StrafeRight,
        Action::TurnLeft,
        Action::TurnRight,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn is_move(self) -> bool {
        !matches!(self, Action::TurnLeft | Action::TurnRight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub grid_size: i32,
    pub agent: (i32, i32),
    pub heading: Heading,
    pub target: (i32, i32),
    pub step_count: usize,
    pub horizon: usize,
}

pub fn manhattan(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

impl WorldState {
    pub fn in_bounds(&self, p: (i32, i32)) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.grid_size && p.1 < self.grid_size
    }

    pub fn at_target(&self) -> bool {
        self.agent == self.target
    }

    /// On the target or one of its 4-neighbours.
    pub fn near_target(&self) -> bool {
        manhattan(self.agent, self.target) <= 1
    }

    pub fn distance_to_target(&self) -> i32 {
        manhattan(self.agent, self.target)
    }

    pub fn finished(&self) -> bool {
        self.step_count >= self.horizon
    }

    /// Memo key for pure functions of the visible state.
    pub fn key(&self) -> (i32, i32, u8, i32, i32) {
        (
            self.agent.0,
            self.agent.1,
            self.heading.index(),
            self.target.0,
            self.target.1,
        )
    }

    /// Agent position in the frame of the agent: (forward, right) offsets
    /// of `p` relative to the agent.
    pub fn relative(&self, p: (i32, i32)) -> (i32, i32) {
        let (dx, dy) = (p.0 - self.agent.0, p.1 - self.agent.1);
        let f = self.heading.delta();
        let r = self.heading.right().delta();
        (dx * f.0 + dy * f.1, dx * r.0 + dy * r.1)
    }

    /// World cell at a (forward, right) offset from the agent.
    pub fn absolute(&self, forward: i32, right: i32) -> (i32, i32) {
        let f = self.heading.delta();
        let r = self.heading.right().delta();
        (
            self.agent.0 + forward * f.0 + right * r.0,
            self.agent.1 + forward * f.1 + right * r.1,
        )
    }
}

/// Cells eligible as reset targets, in row-major order.
pub fn eligible_targets(config: &EnvConfig) -> Vec<(i32, i32)> {
    let g = config.grid_size as i32;
    let center = (g / 2, g / 2);
    let mut cells = Vec::new();
    for y in 0..g {
        for x in 0..g {
            if manhattan((x, y), center) >= config.min_target_distance as i32 {
                cells.push((x, y));
            }
        }
    }
    cells
}

/// Agent at the grid centre heading N; target uniform over the eligible
/// cells, drawn from `seed`.
pub fn reset(config: &EnvConfig, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = eligible_targets(config);
    let target = cells[rng.gen_range(0..cells.len())];
    with_target(config, target)
}

/// Reset state with a given target.
pub fn with_target(config: &EnvConfig, target: (i32, i32)) -> WorldState {
    let g = config.grid_size as i32;
    WorldState {
        grid_size: g,
        agent: (g / 2, g / 2),
        heading: Heading::N,
        target,
        step_count: 0,
        horizon: config.horizon,
    }
}

/// Deterministic transition. Moves into walls leave the position unchanged
/// but still consume a step.
pub fn step(state: &WorldState, action: Action) -> Result<WorldState, SimError> {
    if state.finished() {
        return Err(SimError::EpisodeFinished {
            horizon: state.horizon,
        });
    }
    let mut next = *state;
    next.step_count += 1;
    let delta = match action {
        Action::TurnLeft => {
            next.heading = state.heading.left();
            return Ok(next);
        }
        Action::TurnRight => {
            next.heading = state.heading.right();
            return Ok(next);
        }
        Action::Forward => state.heading.delta(),
        Action::Backward => {
            let (x, y) = state.heading.delta();
            (-x, -y)
        }
        Action::StrafeLeft => state.heading.left().delta(),
        Action::StrafeRight => state.heading.right().delta(),
    };
    let p = (state.agent.0 + delta.0, state.agent.1 + delta.1);
    if state.in_bounds(p) {
        next.agent = p;
    }
    Ok(next)
}

/// Greedy oracle: forward while the target lies within ±45° of the heading,
/// otherwise turn toward it; a target straight behind turns left. On the
/// target itself the oracle answers `Forward`.
pub fn expert_action(state: &WorldState) -> Action {
    let (f, r) = state.relative(state.target);
    if f == 0 && r == 0 {
        return Action::Forward;
    }
    if f > 0 && r.abs() <= f {
        Action::Forward
    } else if r > 0 {
        Action::TurnRight
    } else {
        Action::TurnLeft
    }
}

//! MiniInvaders: a deterministic, Space-Invaders-like arcade game rendered to
//! small RGB frames.
//!
//! The game runs on a 12×14 cell grid. The player occupies the bottom row,
//! a formation of enemies sweeps sideways and descends at the walls, and a
//! row of barriers shields the player. Everything, including enemy fire,
//! is a pure function of the seed and the action sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_COLS: usize = 12;
pub const GRID_ROWS: usize = 14;
pub const FRAME_H: usize = 64;
pub const FRAME_W: usize = 64;
pub const STACK: usize = 4;
pub const CHANNELS: usize = STACK * 3;
pub const NUM_ACTIONS: usize = 6;
pub const DEFAULT_FRAME_SKIP: usize = 4;

const CELL_W: usize = 5;
const CELL_H: usize = 4;
const X_OFFSET: usize = (FRAME_W - GRID_COLS * CELL_W) / 2;
const Y_OFFSET: usize = (FRAME_H - GRID_ROWS * CELL_H) / 2;

const PLAYER_ROW: usize = GRID_ROWS - 1;
const BARRIER_ROW: usize = GRID_ROWS - 3;
const START_LIVES: u32 = 3;
/// The game is lost once any enemy descends to this row.
const INVASION_ROW: usize = 9;
const ENEMY_SHIFT_PERIOD: u64 = 4;
const PLAYER_SHOT_PERIOD: u64 = 2;
const ENEMY_FIRE_PROB: f64 = 0.05;
const FORMATION_COLS: usize = 3;
const FORMATION_ROWS: usize = 3;
const FORMATION_SPACING: usize = 3;
const BARRIER_COLS: [usize; 6] = [1, 2, 5, 6, 9, 10];

const PLAYER_COLOR: [f32; 3] = [0.2, 0.9, 0.2];
const ENEMY_COLOR: [f32; 3] = [1.0, 1.0, 1.0];
const SHOT_COLOR: [f32; 3] = [1.0, 1.0, 0.2];
const BARRIER_COLOR: [f32; 3] = [1.0, 0.55, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    NoOp = 0,
    Left = 1,
    Right = 2,
    Fire = 3,
    LeftFire = 4,
    RightFire = 5,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::NoOp, Action::Left, Action::Right, Action::Fire, Action::LeftFire, Action::RightFire];

    pub fn from_id(id: usize) -> Result<Self> {
        Action::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action id {id} out of range 0..{NUM_ACTIONS}")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::NoOp => "NoOp",
            Action::Left => "Left",
            Action::Right => "Right",
            Action::Fire => "Fire",
            Action::LeftFire => "LeftFire",
            Action::RightFire => "RightFire",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Action::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown action {name:?}")))
    }

    fn dx(self) -> isize {
        match self {
            Action::Left | Action::LeftFire => -1,
            Action::Right | Action::RightFire => 1,
            _ => 0,
        }
    }

    fn fires(self) -> bool {
        matches!(self, Action::Fire | Action::LeftFire | Action::RightFire)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enemy {
    pub col: usize,
    pub row: usize,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barrier {
    pub col: usize,
    pub row: usize,
    pub hp: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub player_x: usize,
    pub enemies: Vec<Enemy>,
    pub enemy_dir: i8,
    pub player_shots: Vec<(usize, usize)>,
    pub enemy_shots: Vec<(usize, usize)>,
    pub barriers: Vec<Barrier>,
    pub lives: u32,
    pub tick: u64,
    pub rng_state: u64,
    pub kills: u32,
    pub deaths: u32,
}

impl GameState {
    pub fn new(seed: u64) -> Self {
        let mut rng_state = seed ^ 0x5DEE_CE66_D1CE_4E5B;
        let span = GRID_COLS - ((FORMATION_COLS - 1) * FORMATION_SPACING + 1);
        let offset = (splitmix64(&mut rng_state) % (span as u64 + 1)) as usize;
        let enemy_dir = if splitmix64(&mut rng_state) & 1 == 0 { 1 } else { -1 };
        let mut enemies = Vec::with_capacity(FORMATION_COLS * FORMATION_ROWS);
        for r in 0..FORMATION_ROWS {
            for c in 0..FORMATION_COLS {
                enemies.push(Enemy { col: offset + c * FORMATION_SPACING, row: 1 + r, alive: true });
            }
        }
        let barriers = BARRIER_COLS.iter().map(|&col| Barrier { col, row: BARRIER_ROW, hp: 3 }).collect();
        GameState {
            player_x: GRID_COLS / 2,
            enemies,
            enemy_dir,
            player_shots: Vec::new(),
            enemy_shots: Vec::new(),
            barriers,
            lives: START_LIVES,
            tick: 0,
            rng_state,
            kills: 0,
            deaths: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.lives == 0 || self.enemies.iter().all(|e| !e.alive)
    }

    pub fn alive_enemies(&self) -> usize {
        self.enemies.iter().filter(|e| e.alive).count()
    }

    fn next_unit(&mut self) -> f64 {
        (splitmix64(&mut self.rng_state) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn barrier_at(&mut self, col: usize, row: usize) -> Option<&mut Barrier> {
        self.barriers.iter_mut().find(|b| b.col == col && b.row == row && b.hp > 0)
    }

    /// Advances one internal tick, returning `(kills, deaths)` that occurred.
    fn tick_once(&mut self, action: Action) -> (u32, u32) {
        let (mut kills, mut deaths) = (0u32, 0u32);

        // Player moves every other tick so a 4-tick step covers two columns.
        if self.tick.is_multiple_of(2) {
            let nx = self.player_x as isize + action.dx();
            if (0..GRID_COLS as isize).contains(&nx) {
                self.player_x = nx as usize;
            }
        }
        if action.fires() && self.player_shots.is_empty() {
            self.player_shots.push((self.player_x, PLAYER_ROW - 1));
        } else if self.tick.is_multiple_of(PLAYER_SHOT_PERIOD) {
            let mut moved = Vec::with_capacity(self.player_shots.len());
            for &(c, r) in &self.player_shots {
                if r > 0 {
                    moved.push((c, r - 1));
                }
            }
            self.player_shots = moved;
        }
        kills += self.resolve_player_shots();

        let mut moved = Vec::with_capacity(self.enemy_shots.len());
        for &(c, r) in &self.enemy_shots {
            if r + 1 < GRID_ROWS {
                moved.push((c, r + 1));
            }
        }
        self.enemy_shots = moved;
        let mut hit_player = false;
        let mut survivors = Vec::with_capacity(self.enemy_shots.len());
        for (c, r) in std::mem::take(&mut self.enemy_shots) {
            if let Some(b) = self.barrier_at(c, r) {
                b.hp -= 1;
            } else if r == PLAYER_ROW && c == self.player_x {
                hit_player = true;
            } else {
                survivors.push((c, r));
            }
        }
        self.enemy_shots = survivors;

        if self.tick % ENEMY_SHIFT_PERIOD == ENEMY_SHIFT_PERIOD - 1 {
            self.shift_formation();
            kills += self.resolve_player_shots();
            for i in 0..self.enemies.len() {
                let e = self.enemies[i];
                if e.alive {
                    if let Some(b) = self.barrier_at(e.col, e.row) {
                        b.hp = 0;
                    }
                }
            }
        }

        let invaded = self.enemies.iter().any(|e| e.alive && e.row >= INVASION_ROW);
        if invaded {
            deaths += 1;
            self.lives = 0;
        } else if hit_player {
            deaths += 1;
            self.lives = self.lives.saturating_sub(1);
            self.enemy_shots.clear();
            self.player_x = GRID_COLS / 2;
        }

        if self.lives > 0 && self.alive_enemies() > 0 && self.next_unit() < ENEMY_FIRE_PROB {
            let mut cols: Vec<usize> = self.enemies.iter().filter(|e| e.alive).map(|e| e.col).collect();
            cols.sort_unstable();
            cols.dedup();
            let pick = cols[(splitmix64(&mut self.rng_state) % cols.len() as u64) as usize];
            let shooter = self
                .enemies
                .iter()
                .filter(|e| e.alive && e.col == pick)
                .max_by_key(|e| e.row)
                .copied()
                .expect("column has an alive enemy");
            if shooter.row + 1 < GRID_ROWS {
                self.enemy_shots.push((shooter.col, shooter.row + 1));
            }
        }

        self.tick += 1;
        self.kills += kills;
        self.deaths += deaths;
        (kills, deaths)
    }

    fn resolve_player_shots(&mut self) -> u32 {
        let mut kills = 0;
        let mut survivors = Vec::with_capacity(self.player_shots.len());
        for (c, r) in std::mem::take(&mut self.player_shots) {
            if let Some(b) = self.barrier_at(c, r) {
                b.hp -= 1;
            } else if let Some(e) = self.enemies.iter_mut().find(|e| e.alive && e.col == c && e.row == r) {
                e.alive = false;
                kills += 1;
            } else {
                survivors.push((c, r));
            }
        }
        self.player_shots = survivors;
        kills
    }

    fn shift_formation(&mut self) {
        let alive = self.enemies.iter().filter(|e| e.alive);
        let (min_c, max_c) = alive.fold((usize::MAX, 0), |(lo, hi), e| (lo.min(e.col), hi.max(e.col)));
        if min_c == usize::MAX {
            return;
        }
        let blocked = (self.enemy_dir < 0 && min_c == 0) || (self.enemy_dir > 0 && max_c + 1 >= GRID_COLS);
        for e in self.enemies.iter_mut().filter(|e| e.alive) {
            if blocked {
                e.row += 1;
            } else if self.enemy_dir > 0 {
                e.col += 1;
            } else {
                e.col -= 1;
            }
        }
        if blocked {
            self.enemy_dir = -self.enemy_dir;
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One rendered RGB frame, stored height × width × 3 with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn blank(height: usize, width: usize) -> Self {
        Frame { height, width, pixels: vec![0.0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` layout.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.pixels[p * 3 + c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Self {
        let plane = height * width;
        let mut pixels = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                pixels[p * 3 + c] = planar[c * plane + p];
            }
        }
        Frame { height, width, pixels }
    }
}

/// Four stacked frames as a planar `[12, h, w]` array, oldest frame first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn channels(&self) -> usize {
        self.data.len() / (self.height * self.width)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height, self.width]
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "observation needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Observation { height, width, data })
    }

    /// The `i`-th stacked frame (0 = oldest).
    pub fn frame(&self, i: usize) -> Frame {
        let plane = self.height * self.width;
        Frame::from_planar(self.height, self.width, &self.data[i * 3 * plane..(i + 1) * 3 * plane])
    }

    pub fn latest_frame(&self) -> Frame {
        self.frame(STACK - 1)
    }

    /// Drops the oldest frame and appends `frame` as the newest.
    pub fn push(&self, frame: &Frame) -> Observation {
        let chunk = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(self.data.len());
        data.extend_from_slice(&self.data[chunk..]);
        data.extend_from_slice(&frame.to_planar());
        Observation { height: self.height, width: self.width, data }
    }
}

/// Channel-concatenates exactly four equally shaped frames, oldest first.
pub fn stack(frames: &[Frame]) -> Result<Observation> {
    if frames.len() != STACK {
        return Err(Error::InvalidArgument(format!("stack needs {STACK} frames, got {}", frames.len())));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::Shape("stacked frames differ in shape".into()));
    }
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for f in frames {
        data.extend_from_slice(&f.to_planar());
    }
    Ok(Observation { height: h, width: w, data })
}

fn fill_rect(frame: &mut Frame, y0: usize, x0: usize, h: usize, w: usize, rgb: [f32; 3]) {
    for y in y0..(y0 + h).min(frame.height) {
        for x in x0..(x0 + w).min(frame.width) {
            frame.set(y, x, rgb);
        }
    }
}

fn cell_origin(col: usize, row: usize) -> (usize, usize) {
    (Y_OFFSET + row * CELL_H, X_OFFSET + col * CELL_W)
}

/// Draws the game state. Pure: identical states give identical frames.
pub fn render(state: &GameState) -> Frame {
    let mut f = Frame::blank(FRAME_H, FRAME_W);
    for b in state.barriers.iter().filter(|b| b.hp > 0) {
        let (y, x) = cell_origin(b.col, b.row);
        // Damage erodes the block from the top.
        let rows = b.hp as usize + 1;
        fill_rect(&mut f, y + CELL_H - rows, x, rows, CELL_W, BARRIER_COLOR);
    }
    for e in state.enemies.iter().filter(|e| e.alive) {
        let (y, x) = cell_origin(e.col, e.row);
        fill_rect(&mut f, y, x + 1, 3, 3, ENEMY_COLOR);
        f.set(y + 1, x, ENEMY_COLOR);
        f.set(y + 1, x + 4, ENEMY_COLOR);
    }
    let (y, x) = cell_origin(state.player_x, PLAYER_ROW);
    fill_rect(&mut f, y + 1, x, 3, CELL_W, PLAYER_COLOR);
    f.set(y, x + 2, PLAYER_COLOR);
    for &(c, r) in state.player_shots.iter().chain(&state.enemy_shots) {
        let (y, x) = cell_origin(c, r);
        fill_rect(&mut f, y, x + 2, 3, 1, SHOT_COLOR);
    }
    f
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: GameState,
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
}

pub fn env_reset(seed: u64) -> (GameState, Observation) {
    let state = GameState::new(seed);
    let frame = render(&state);
    let obs = stack(&[frame.clone(), frame.clone(), frame.clone(), frame]).expect("four equal frames");
    (state, obs)
}

/// Applies `action` for `frame_skip` ticks and pushes the last rendered frame
/// onto the observation stack.
pub fn env_step(state: &GameState, obs: &Observation, action: Action, frame_skip: usize) -> Result<Transition> {
    if state.is_terminal() {
        return Err(Error::EpisodeFinished);
    }
    let mut next = state.clone();
    let mut reward = 0.0f32;
    for _ in 0..frame_skip.max(1) {
        let (k, d) = next.tick_once(action);
        reward += k as f32 - d as f32;
        if next.is_terminal() {
            break;
        }
    }
    let observation = obs.push(&render(&next));
    let done = next.is_terminal();
    Ok(Transition { state: next, observation, reward, done })
}

/// Mutable convenience wrapper around the pure step function.
#[derive(Debug, Clone)]
pub struct MiniInvaders {
    pub state: GameState,
    pub observation: Observation,
    pub frame_skip: usize,
    pub score: f32,
    pub steps: usize,
}

impl MiniInvaders {
    pub fn new(seed: u64, frame_skip: usize) -> Self {
        let (state, observation) = env_reset(seed);
        MiniInvaders { state, observation, frame_skip, score: 0.0, steps: 0 }
    }

    pub fn done(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn step(&mut self, action: Action) -> Result<(f32, bool)> {
        let t = env_step(&self.state, &self.observation, action, self.frame_skip)?;
        self.state = t.state;
        self.observation = t.observation;
        self.score += t.reward;
        self.steps += 1;
        Ok((t.reward, t.done))
    }
}

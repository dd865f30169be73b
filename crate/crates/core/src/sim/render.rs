//! Rasterizers for the egocentric (FPV) and fixed-camera (TPV) frames.

use serde::{Deserialize, Serialize};

use super::world::{Heading, WorldState};

pub type Rgb = [f32; 3];

pub const FLOOR_LIGHT: Rgb = [0.86, 0.86, 0.80];
pub const FLOOR_DARK: Rgb = [0.62, 0.66, 0.58];
pub const WALL: Rgb = [0.25, 0.25, 0.25];
pub const TARGET: Rgb = [0.10, 0.35, 1.00];
pub const AGENT: Rgb = [0.95, 0.10, 0.10];
pub const BLACK: Rgb = [0.0, 0.0, 0.0];

/// Cells per side of the egocentric window.
pub const FPV_WINDOW: i32 = 7;
const TPV_SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    Fpv,
    Tpv,
}

/// One `H×W×3` image, stored HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub kind: FrameKind,
    pub view: Option<usize>,
    pub timestep: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn blank(height: usize, width: usize, kind: FrameKind) -> Self {
        Frame {
            height,
            width,
            kind,
            view: None,
            timestep: 0,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * Self::CHANNELS;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Pixels (not channels) whose colour differs between two frames.
    pub fn differing_pixels(&self, other: &Frame) -> usize {
        self.data
            .chunks(3)
            .zip(other.data.chunks(3))
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Channel-first f64 copy, the layout the encoders consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * Self::CHANNELS];
        for (p, px) in self.data.chunks(Self::CHANNELS).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + p] = *v as f64;
            }
        }
        out
    }
}

/// A fixed third-person camera: quarter-turn rotation (counter-clockwise),
/// optional horizontal mirror, then a pixel translation whose uncovered
/// border is black.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub quarter_turns: u8,
    pub mirror: bool,
    pub offset: (i32, i32),
}

const OFFSETS: [(i32, i32); 16] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (-1, -1),
    (2, -1),
    (-2, 1),
    (1, 2),
    (-1, -2),
    (2, 2),
    (-2, -2),
    (0, -2),
    (2, 0),
    (-2, 0),
    (0, 2),
    (1, -1),
    (-1, 1),
];

/// Maximum number of distinct viewpoints [`viewpoints`] can produce.
pub const MAX_VIEWS: usize = OFFSETS.len();

impl Viewpoint {
    pub fn identity() -> Self {
        Viewpoint {
            id: 0,
            quarter_turns: 0,
            mirror: false,
            offset: (0, 0),
        }
    }
}

/// The standard camera set: the 8 rotation/mirror combinations, each with
/// its own offset. `shifted` moves every offset by one pixel (wrapping
/// inside ±2) to build a held-out camera set that differs from the
/// training cameras.
pub fn viewpoints(n: usize, shifted: bool) -> Vec<Viewpoint> {
    assert!(n <= MAX_VIEWS, "at most {MAX_VIEWS} viewpoints");
    (0..n)
        .map(|i| {
            let (mut dx, mut dy) = OFFSETS[i];
            if shifted {
                dx = wrap_offset(dx + 1);
                dy = wrap_offset(dy - 1);
            }
            Viewpoint {
                id: i,
                quarter_turns: (i % 4) as u8,
                mirror: (i / 4) % 2 == 1,
                offset: (dx, dy),
            }
        })
        .collect()
}

fn wrap_offset(v: i32) -> i32 {
    (v + 2).rem_euclid(5) - 2
}

fn checker(x: i32, y: i32) -> Rgb {
    if (x + y).rem_euclid(2) == 0 {
        FLOOR_LIGHT
    } else {
        FLOOR_DARK
    }
}

/// Colour of a world cell as seen from the agent's camera (no agent).
fn world_cell_colour(state: &WorldState, cell: (i32, i32)) -> Rgb {
    if !state.in_bounds(cell) {
        WALL
    } else if cell == state.target {
        TARGET
    } else {
        checker(cell.0, cell.1)
    }
}

/// Window cell `(col, row)` covering FPV pixel `(px, py)`; row 0 is the
/// far edge, the agent sits at the bottom-centre cell.
pub fn fpv_window_cell(px: usize, py: usize, size: usize) -> (i32, i32) {
    let col = ((2 * px + 1) as i32 * FPV_WINDOW) / (2 * size as i32);
    let row = ((2 * py + 1) as i32 * FPV_WINDOW) / (2 * size as i32);
    (col, row)
}

/// World cell seen at window cell `(col, row)`.
pub fn fpv_world_cell(state: &WorldState, col: i32, row: i32) -> (i32, i32) {
    let half = FPV_WINDOW / 2;
    state.absolute(FPV_WINDOW - 1 - row, col - half)
}

/// Egocentric view: a 7×7-cell window in the agent's frame whose centre is
/// 3 cells ahead of the agent. The agent itself is never drawn.
pub fn render_fpv(state: &WorldState, size: usize) -> Frame {
    let mut f = Frame::blank(size, size, FrameKind::Fpv);
    f.timestep = state.step_count;
    for py in 0..size {
        for px in 0..size {
            let (col, row) = fpv_window_cell(px, py, size);
            let cell = fpv_world_cell(state, col, row);
            f.set_pixel(px, py, world_cell_colour(state, cell));
        }
    }
    f
}

/// Is the in-cell point `(u, v)` ∈ [0,1)² inside the agent triangle
/// pointing toward `heading`?
fn in_agent_triangle(u: f32, v: f32, heading: Heading) -> bool {
    // Rotate into the north-facing frame: apex at (0.5, 0.1), base at y=0.9.
    let (a, b) = match heading {
        Heading::N => (u, v),
        Heading::E => (v, 1.0 - u),
        Heading::S => (1.0 - u, 1.0 - v),
        Heading::W => (1.0 - v, u),
    };
    if !(0.1..=0.9).contains(&b) {
        return false;
    }
    let half_width = 0.5 * (b - 0.1) / 0.8;
    (a - 0.5).abs() <= half_width
}

/// Whole-grid render in world coordinates (identity camera), supersampled.
pub fn render_world(state: &WorldState, size: usize) -> Frame {
    let mut f = Frame::blank(size, size, FrameKind::Tpv);
    f.timestep = state.step_count;
    let g = state.grid_size as f32;
    let ss = TPV_SUPERSAMPLE;
    let norm = 1.0 / (ss * ss) as f32;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = (px as f32 + (sx as f32 + 0.5) / ss as f32) * g / size as f32;
                    let y = (py as f32 + (sy as f32 + 0.5) / ss as f32) * g / size as f32;
                    let cell = (x.floor() as i32, y.floor() as i32);
                    let colour = if cell == state.agent
                        && in_agent_triangle(x - cell.0 as f32, y - cell.1 as f32, state.heading)
                    {
                        AGENT
                    } else if cell == state.target {
                        TARGET
                    } else {
                        checker(cell.0, cell.1)
                    };
                    for c in 0..3 {
                        acc[c] += colour[c];
                    }
                }
            }
            f.set_pixel(px, py, acc.map(|v| v * norm));
        }
    }
    f
}

/// Rotate an image a quarter turn counter-clockwise.
pub fn rotate_quarter(src: &Frame) -> Frame {
    let n = src.width;
    debug_assert_eq!(src.height, n);
    let mut out = src.clone();
    for y in 0..n {
        for x in 0..n {
            // Source pixel (x, y) lands at (y, n-1-x).
            out.set_pixel(y, n - 1 - x, src.pixel(x, y));
        }
    }
    out
}

pub fn mirror_horizontal(src: &Frame) -> Frame {
    let mut out = src.clone();
    for y in 0..src.height {
        for x in 0..src.width {
            out.set_pixel(src.width - 1 - x, y, src.pixel(x, y));
        }
    }
    out
}

/// Translate by `(dx, dy)` pixels; uncovered pixels become black.
pub fn translate(src: &Frame, dx: i32, dy: i32) -> Frame {
    let mut out = src.clone();
    for y in 0..src.height as i32 {
        for x in 0..src.width as i32 {
            let (sx, sy) = (x - dx, y - dy);
            let c = if sx >= 0 && sy >= 0 && sx < src.width as i32 && sy < src.height as i32 {
                src.pixel(sx as usize, sy as usize)
            } else {
                BLACK
            };
            out.set_pixel(x as usize, y as usize, c);
        }
    }
    out
}

pub fn apply_viewpoint(world: &Frame, view: &Viewpoint) -> Frame {
    let mut f = world.clone();
    for _ in 0..view.quarter_turns % 4 {
        f = rotate_quarter(&f);
    }
    if view.mirror {
        f = mirror_horizontal(&f);
    }
    let mut f = translate(&f, view.offset.0, view.offset.1);
    f.kind = FrameKind::Tpv;
    f.view = Some(view.id);
    f
}

/// Third-person view of the whole grid through a fixed camera.
pub fn render_tpv(state: &WorldState, view: &Viewpoint, size: usize) -> Frame {
    apply_viewpoint(&render_world(state, size), view)
}

#[cfg(test)]
mod tests {
    use super::super::world::{step, with_target, Action};
    use super::super::EnvConfig;
    use super::*;
    use std::collections::HashMap;

    fn is_agent_like(c: Rgb) -> bool {
        c[0] > c[1] + 0.2 && c[0] > c[2] + 0.2
    }

    /// Map world cell → colour from an FPV frame, asserting each cell is
    /// drawn in one colour.
    fn fpv_cell_colours(state: &WorldState, f: &Frame) -> HashMap<(i32, i32), Rgb> {
        let mut m: HashMap<(i32, i32), Rgb> = HashMap::new();
        for py in 0..f.height {
            for px in 0..f.width {
                let (c, r) = fpv_window_cell(px, py, f.width);
                let cell = fpv_world_cell(state, c, r);
                let col = f.pixel(px, py);
                if let Some(prev) = m.insert(cell, col) {
                    assert_eq!(prev, col);
                }
            }
        }
        m
    }

    #[test]
    fn turn_left_render_agrees_on_overlapping_cells() {
        let c = EnvConfig::default();
        for target in [(2, 2), (9, 1), (6, 10), (0, 6)] {
            let s0 = with_target(&c, target);
            let s1 = step(&s0, Action::TurnLeft).unwrap();
            let a = fpv_cell_colours(&s0, &render_fpv(&s0, 32));
            let b = fpv_cell_colours(&s1, &render_fpv(&s1, 32));
            let mut shared = 0;
            for (cell, col) in &a {
                if let Some(other) = b.get(cell) {
                    assert_eq!(col, other, "cell {cell:?}");
                    shared += 1;
                }
            }
            assert!(shared >= 9, "windows overlap in {shared} cells");
        }
    }

    #[test]
    fn fpv_never_shows_agent_colour() {
        let c = EnvConfig::default();
        for seed in 0..50 {
            let mut s = super::super::world::reset(&c, seed);
            for _ in 0..10 {
                let f = render_fpv(&s, 32);
                assert!(f.data.chunks(3).all(|p| !is_agent_like([p[0], p[1], p[2]])));
                s = step(&s, super::super::world::expert_action(&s)).unwrap();
            }
        }
    }

    #[test]
    fn fpv_ignores_targets_outside_the_window() {
        let c = EnvConfig::default();
        // Behind the agent (heading N) is never visible.
        let a = with_target(&c, (6, 11));
        let b = with_target(&c, (5, 10));
        assert_eq!(render_fpv(&a, 32), render_fpv(&b, 32));
    }

    #[test]
    fn tpv_move_changes_only_agent_cells() {
        let c = EnvConfig::default();
        let s0 = with_target(&c, (1, 1));
        let s1 = step(&s0, Action::Forward).unwrap();
        let a = render_world(&s0, 32);
        let b = render_world(&s1, 32);
        let g = c.grid_size as f32;
        for py in 0..32 {
            for px in 0..32 {
                if a.pixel(px, py) != b.pixel(px, py) {
                    // pixel footprint must touch an agent cell
                    let x0 = (px as f32 * g / 32.0).floor() as i32;
                    let x1 = (((px + 1) as f32 * g / 32.0) - 1e-4).floor() as i32;
                    let y0 = (py as f32 * g / 32.0).floor() as i32;
                    let y1 = (((py + 1) as f32 * g / 32.0) - 1e-4).floor() as i32;
                    let touches =
                        |p: (i32, i32)| (x0..=x1).contains(&p.0) && (y0..=y1).contains(&p.1);
                    assert!(touches(s0.agent) || touches(s1.agent), "pixel ({px},{py})");
                }
            }
        }
        assert!(a.differing_pixels(&b) > 0);
        assert!(a.data.chunks(3).any(|p| is_agent_like([p[0], p[1], p[2]])));
    }

    #[test]
    fn rotated_view_composes() {
        let c = EnvConfig::default();
        let s = with_target(&c, (2, 9));
        let world = render_world(&s, 32);
        let view = Viewpoint {
            id: 3,
            quarter_turns: 2,
            mirror: false,
            offset: (1, -2),
        };
        let expected = translate(&rotate_quarter(&rotate_quarter(&world)), 1, -2);
        let got = render_tpv(&s, &view, 32);
        assert_eq!(got.data, expected.data);
    }

    #[test]
    fn default_views_are_pairwise_distinct() {
        let c = EnvConfig::default();
        for shifted in [false, true] {
            let views = viewpoints(8, shifted);
            for seed in 0..20 {
                let s = super::super::world::reset(&c, seed);
                let frames: Vec<Frame> = views.iter().map(|v| render_tpv(&s, v, 32)).collect();
                for i in 0..frames.len() {
                    for j in i + 1..frames.len() {
                        assert!(
                            frames[i].differing_pixels(&frames[j]) > 0,
                            "views {i},{j} seed {seed}"
                        );
                    }
                }
            }
        }
        let train = viewpoints(8, false);
        let test = viewpoints(8, true);
        assert!(train.iter().zip(&test).all(|(a, b)| a.offset != b.offset));
    }

    #[test]
    fn renders_stay_in_unit_range() {
        let c = EnvConfig::default();
        let s = super::super::world::reset(&c, 3);
        for f in [
            render_fpv(&s, 32),
            render_tpv(&s, &viewpoints(8, false)[5], 32),
        ] {
            assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

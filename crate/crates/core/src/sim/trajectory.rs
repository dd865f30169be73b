//! Synchronized multi-view trajectories and their `EGO1` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EGO1"
//! u32 H, u32 W, u32 C, u32 n_views, u32 L
//! L × u8                      actions
//! L × (5 × u16)               x, y, heading, target_x, target_y
//! L·H·W·C × f32               FPV frames (HWC)
//! n_views × L·H·W·C × f32     TPV streams in view order
//! ```

use std::path::Path;

use super::render::{render_fpv, render_tpv, Frame, FrameKind, Viewpoint};
use super::world::{expert_action, reset, step, Action, Heading, WorldState};
use super::{EnvConfig, SimError};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"EGO1";
const HEADER_LEN: usize = 4 + 5 * 4;

/// Ground-truth state at one timestep, as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateRecord {
    pub x: u16,
    pub y: u16,
    pub heading: Heading,
    pub target_x: u16,
    pub target_y: u16,
}

impl StateRecord {
    pub fn from_state(s: &WorldState) -> Self {
        StateRecord {
            x: s.agent.0 as u16,
            y: s.agent.1 as u16,
            heading: s.heading,
            target_x: s.target.0 as u16,
            target_y: s.target.1 as u16,
        }
    }

    pub fn to_state(&self, config: &EnvConfig, step_count: usize) -> WorldState {
        WorldState {
            grid_size: config.grid_size as i32,
            agent: (self.x as i32, self.y as i32),
            heading: self.heading,
            target: (self.target_x as i32, self.target_y as i32),
            step_count,
            horizon: config.horizon,
        }
    }
}

/// One FPV stream and `n_views` TPV streams of equal length `L`, all
/// rendered from the same state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub height: usize,
    pub width: usize,
    pub fpv: Vec<Frame>,
    pub tpv: Vec<Vec<Frame>>,
    pub actions: Vec<Action>,
    pub states: Vec<StateRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.tpv.len()
    }

    /// Frame `t` of a stream: `None` is the FPV stream, `Some(v)` TPV view `v`.
    pub fn frame(&self, stream: Option<usize>, t: usize) -> &Frame {
        match stream {
            None => &self.fpv[t],
            Some(v) => &self.tpv[v][t],
        }
    }

    /// Exact size of the encoded file.
    pub fn encoded_len(&self) -> usize {
        let l = self.len();
        HEADER_LEN
            + l
            + 10 * l
            + 4 * l * self.height * self.width * Frame::CHANNELS * (1 + self.n_views())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(TRAJECTORY_MAGIC);
        for v in [
            self.height,
            self.width,
            Frame::CHANNELS,
            self.n_views(),
            self.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.actions.iter().map(|a| a.id() as u8));
        for s in &self.states {
            for v in [s.x, s.y, s.heading.index() as u16, s.target_x, s.target_y] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for frame in self.fpv.iter().chain(self.tpv.iter().flatten()) {
            for v in &frame.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SimError> {
        if bytes.len() < 4 {
            return Err(SimError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if &bytes[..4] != TRAJECTORY_MAGIC {
            return Err(SimError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(SimError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let field = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let (h, w, c, n_views, l) = (field(0), field(1), field(2), field(3), field(4));
        if c != Frame::CHANNELS {
            return Err(SimError::InvalidField {
                field: "C",
                value: c as u64,
            });
        }
        if h == 0 || w == 0 {
            return Err(SimError::InvalidField {
                field: if h == 0 { "H" } else { "W" },
                value: 0,
            });
        }
        if n_views == 0 {
            return Err(SimError::InvalidField {
                field: "n_views",
                value: 0,
            });
        }
        let frame_len =
            h.checked_mul(w)
                .and_then(|v| v.checked_mul(c))
                .ok_or(SimError::InvalidField {
                    field: "H*W*C",
                    value: u64::MAX,
                })?;
        let needed = frame_len
            .checked_mul(4)
            .and_then(|v| v.checked_mul(l))
            .and_then(|v| v.checked_mul(1 + n_views))
            .and_then(|v| v.checked_add(HEADER_LEN + 11 * l))
            .ok_or(SimError::InvalidField {
                field: "L",
                value: l as u64,
            })?;
        if bytes.len() < needed {
            return Err(SimError::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(SimError::TrailingBytes(bytes.len() - needed));
        }

        let mut pos = HEADER_LEN;
        let mut actions = Vec::with_capacity(l);
        for &b in &bytes[pos..pos + l] {
            actions.push(Action::from_id(b as usize).ok_or(SimError::InvalidField {
                field: "action",
                value: b as u64,
            })?);
        }
        pos += l;
        let mut states = Vec::with_capacity(l);
        for chunk in bytes[pos..pos + 10 * l].chunks_exact(10) {
            let u = |i: usize| u16::from_le_bytes([chunk[2 * i], chunk[2 * i + 1]]);
            let heading = u8::try_from(u(2))
                .ok()
                .and_then(Heading::from_index)
                .ok_or(SimError::InvalidField {
                    field: "heading",
                    value: u(2) as u64,
                })?;
            states.push(StateRecord {
                x: u(0),
                y: u(1),
                heading,
                target_x: u(3),
                target_y: u(4),
            });
        }
        pos += 10 * l;

        let mut read_stream =
            |kind: FrameKind, view: Option<usize>| -> Result<Vec<Frame>, SimError> {
                let mut frames = Vec::with_capacity(l);
                for t in 0..l {
                    let data: Vec<f32> = bytes[pos..pos + 4 * frame_len]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    pos += 4 * frame_len;
                    if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(SimError::InvalidField {
                            field: "pixel",
                            value: bad.to_bits() as u64,
                        });
                    }
                    frames.push(Frame {
                        height: h,
                        width: w,
                        kind,
                        view,
                        timestep: t,
                        data,
                    });
                }
                Ok(frames)
            };
        let fpv = read_stream(FrameKind::Fpv, None)?;
        let mut tpv = Vec::with_capacity(n_views);
        for v in 0..n_views {
            tpv.push(read_stream(FrameKind::Tpv, Some(v))?);
        }
        Ok(Trajectory {
            height: h,
            width: w,
            fpv,
            tpv,
            actions,
            states,
        })
    }
}

pub fn write_trajectory(t: &Trajectory, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, t.encode())?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, SimError> {
    Trajectory::decode(&std::fs::read(path)?)
}

/// Roll the expert from `reset(seed)` until it stands on the target (or the
/// horizon runs out), rendering every stream at every visited state. The
/// action stored with the final state is the oracle's answer there.
pub fn collect_trajectory(
    config: &EnvConfig,
    seed: u64,
    views: &[Viewpoint],
) -> Result<Trajectory, SimError> {
    if views.is_empty() {
        return Err(SimError::NoViews);
    }
    let mut state = reset(config, seed);
    let mut world_states = vec![state];
    while !state.at_target() && !state.finished() {
        state = step(&state, expert_action(&state))?;
        world_states.push(state);
    }
    Ok(render_trajectory(config, &world_states, views))
}

/// Render an explicit state sequence into a trajectory.
pub fn render_trajectory(
    config: &EnvConfig,
    states: &[WorldState],
    views: &[Viewpoint],
) -> Trajectory {
    let size = config.resolution;
    let fpv = states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut f = render_fpv(s, size);
            f.timestep = t;
            f
        })
        .collect();
    let tpv = views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            states
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let mut f = render_tpv(s, v, size);
                    f.view = Some(i);
                    f.timestep = t;
                    f
                })
                .collect()
        })
        .collect();
    Trajectory {
        height: size,
        width: size,
        fpv,
        tpv,
        actions: states.iter().map(expert_action).collect(),
        states: states.iter().map(StateRecord::from_state).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::render::viewpoints;
    use super::*;

    fn small() -> Trajectory {
        let c = EnvConfig::default();
        collect_trajectory(&c, 11, &viewpoints(2, false)).unwrap()
    }

    #[test]
    fn synchronized_streams() {
        let c = EnvConfig::default();
        let views = viewpoints(3, false);
        let t = collect_trajectory(&c, 5, &views).unwrap();
        assert!(t.len() >= 2);
        assert!(t.tpv.iter().all(|s| s.len() == t.len()));
        assert_eq!(t.fpv.len(), t.len());
        for (i, rec) in t.states.iter().enumerate() {
            let s = rec.to_state(&c, i);
            assert_eq!(render_fpv(&s, 32).data, t.fpv[i].data);
            for (v, view) in views.iter().enumerate() {
                assert_eq!(render_tpv(&s, view, 32).data, t.tpv[v][i].data);
            }
        }
        let last = t.states.last().unwrap();
        assert_eq!((last.x, last.y), (last.target_x, last.target_y));
    }

    #[test]
    fn encode_decode_round_trip_and_size() {
        let t = small();
        let bytes = t.encode();
        let l = t.len();
        assert_eq!(
            bytes.len(),
            4 + 20 + l + 10 * l + 4 * l * 32 * 32 * 3 * (1 + 2)
        );
        assert_eq!(Trajectory::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = small().encode();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            Trajectory::decode(&bad),
            Err(SimError::BadMagic(_))
        ));
        assert!(matches!(
            Trajectory::decode(&bytes[..bytes.len() - 1]),
            Err(SimError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(
            Trajectory::decode(&long),
            Err(SimError::TrailingBytes(2))
        ));
        let mut bad_action = bytes.clone();
        bad_action[HEADER_LEN] = 9;
        assert!(matches!(
            Trajectory::decode(&bad_action),
            Err(SimError::InvalidField {
                field: "action",
                ..
            })
        ));
        let mut bad_c = bytes;
        bad_c[12] = 4;
        assert!(matches!(
            Trajectory::decode(&bad_c),
            Err(SimError::InvalidField { field: "C", .. })
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(small().encode(), small().encode());
    }
}

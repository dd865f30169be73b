use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{viewpoints, Viewpoint};
use super::trajectory::{collect_trajectory, read_trajectory, write_trajectory, Trajectory};
use super::{EnvConfig, SimError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub env: EnvConfig,
    pub seed: u64,
    pub n_views: usize,
    pub train_views: Vec<Viewpoint>,
    pub test_views: Vec<Viewpoint>,
    pub trajectories: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(bytes: &[u8]) -> Result<Self, SimError> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Manifest(msg));
        if self.version != 1 {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.train_views.len() != self.n_views || self.test_views.len() != self.n_views {
            return bad("viewpoint lists must have n_views entries".into());
        }
        for (i, e) in self.trajectories.iter().enumerate() {
            if e.id != i {
                return bad(format!("entry {i} has id {}", e.id));
            }
            let p = Path::new(&e.path);
            if p.is_absolute()
                || p.components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return bad(format!("path {:?} escapes the dataset directory", e.path));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let bytes = std::fs::read(path).map_err(|source| SimError::Path {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&bytes)
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.trajectories
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn views(&self, split: Split) -> &[Viewpoint] {
        match split {
            Split::Train => &self.train_views,
            Split::Test => &self.test_views,
        }
    }
}

/// A manifest plus the trajectories of the splits that were loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Indexed by trajectory id; `None` for entries not loaded.
    pub trajectories: Vec<Option<Trajectory>>,
}

impl Dataset {
    /// Load the manifest in `root` and only the trajectories of `splits`.
    pub fn load(root: &Path, splits: &[Split]) -> Result<Self, SimError> {
        let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
        let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
        for e in &manifest.trajectories {
            if splits.contains(&e.split) {
                let path = root.join(&e.path);
                let t = read_trajectory(&path).map_err(|err| match err {
                    SimError::Io(source) => SimError::Path { path, source },
                    other => other,
                })?;
                if t.n_views() != manifest.n_views {
                    return Err(SimError::Manifest(format!(
                        "{} has {} views, manifest says {}",
                        e.path,
                        t.n_views(),
                        manifest.n_views
                    )));
                }
                trajectories.push(Some(t));
            } else {
                trajectories.push(None);
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            trajectories,
        })
    }

    /// Build an in-memory dataset (no files) from trajectories and splits.
    pub fn in_memory(env: EnvConfig, items: Vec<(Trajectory, Split)>) -> Self {
        let n_views = items.first().map_or(env.n_views, |(t, _)| t.n_views());
        let manifest = Manifest {
            version: 1,
            env,
            seed: 0,
            n_views,
            train_views: viewpoints(n_views, false),
            test_views: viewpoints(n_views, env.shift_test_views),
            trajectories: items
                .iter()
                .enumerate()
                .map(|(i, (t, s))| ManifestEntry {
                    id: i,
                    path: format!("traj_{i:03}.ego"),
                    split: *s,
                    seed: 0,
                    length: t.len(),
                })
                .collect(),
        };
        Dataset {
            root: PathBuf::new(),
            manifest,
            trajectories: items.into_iter().map(|(t, _)| Some(t)).collect(),
        }
    }

    pub fn get(&self, id: usize) -> Option<&Trajectory> {
        self.trajectories.get(id).and_then(Option::as_ref)
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.manifest
            .ids(split)
            .into_iter()
            .filter(|&id| self.get(id).is_some())
            .collect()
    }

    /// Loaded trajectories of one split, with their ids.
    pub fn split(&self, split: Split) -> Vec<(usize, &Trajectory)> {
        self.split_ids(split)
            .into_iter()
            .map(|id| (id, self.get(id).expect("filtered to loaded")))
            .collect()
    }
}

/// Number of held-out trajectories for a test fraction (floor rounding).
pub fn test_count(n: usize, test_fraction: f64) -> usize {
    ((n as f64) * test_fraction + 1e-9).floor() as usize
}

/// Collect `n` expert trajectories into `dir` and write the manifest. The
/// last `floor(n · test_fraction)` trajectories form the test split.
pub fn collect_dataset(
    env: &EnvConfig,
    n: usize,
    test_fraction: f64,
    seed: u64,
    dir: &Path,
) -> Result<Manifest, SimError> {
    env.validate().map_err(SimError::Manifest)?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SimError::Manifest(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    std::fs::create_dir_all(dir)?;
    let n_test = test_count(n, test_fraction);
    let train_views = viewpoints(env.n_views, false);
    let test_views = viewpoints(env.n_views, env.shift_test_views);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let traj_seed: u64 = rng.gen();
        let split = if i + n_test >= n {
            Split::Test
        } else {
            Split::Train
        };
        let views = match split {
            Split::Train => &train_views,
            Split::Test => &test_views,
        };
        let t = collect_trajectory(env, traj_seed, views)?;
        let name = format!("traj_{i:03}.ego");
        write_trajectory(&t, &dir.join(&name))?;
        entries.push(ManifestEntry {
            id: i,
            path: name,
            split,
            seed: traj_seed,
            length: t.len(),
        });
    }
    let manifest = Manifest {
        version: 1,
        env: *env,
        seed,
        n_views: env.n_views,
        train_views,
        test_views,
        trajectories: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

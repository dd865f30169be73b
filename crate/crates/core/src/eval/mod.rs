//! Representation evaluation: temporal alignment error, permutation
//! reconstruction dumps, and PCA projections of the state codes.

mod ppm;

pub use ppm::{decode_ppm, encode_ppm, quantize, read_ppm, write_ppm, PpmError, PpmImage};

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::model::{Branch, DualAe, ModelError};
use crate::sim::{Dataset, Frame, Split, Trajectory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} split has no loaded trajectories")]
    EmptySplit(&'static str),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ppm(#[from] PpmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the candidate nearest to `q` in L2; ties go to the smaller index.
fn nearest(q: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in candidates.iter().enumerate() {
        let d = sq_dist(q, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Mean `|i − j| / L` where `j` is the nearest TPV code to FPV code `i`.
pub fn alignment_error_codes(fpv: &[Vec<f64>], tpv: &[Vec<f64>]) -> Result<f64> {
    let l = fpv.len();
    if l == 0 || tpv.len() != l {
        return Err(EvalError::Invalid(format!(
            "need equal nonempty streams, got {} and {}",
            l,
            tpv.len()
        )));
    }
    let total: usize = fpv
        .iter()
        .enumerate()
        .map(|(i, q)| i.abs_diff(nearest(q, tpv)))
        .sum();
    Ok(total as f64 / (l * l) as f64)
}

/// All-views variant: the neighbour is searched over every TPV stream at
/// once and its timestep is compared.
pub fn alignment_error_codes_all(fpv: &[Vec<f64>], streams: &[Vec<Vec<f64>>]) -> Result<f64> {
    let l = fpv.len();
    if l == 0 || streams.is_empty() || streams.iter().any(|s| s.len() != l) {
        return Err(EvalError::Invalid(
            "streams must share the FPV length".into(),
        ));
    }
    let pool: Vec<Vec<f64>> = streams.iter().flatten().cloned().collect();
    let total: usize = fpv
        .iter()
        .enumerate()
        .map(|(i, q)| i.abs_diff(nearest(q, &pool) % l))
        .sum();
    Ok(total as f64 / (l * l) as f64)
}

fn h_codes(model: &DualAe, frames: &[Frame], branch: Branch) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Frame> = frames.iter().collect();
    Ok(model
        .encode_frames(&refs, branch)?
        .into_iter()
        .map(|l| l.h)
        .collect())
}

/// Alignment error of one trajectory against one TPV view.
pub fn alignment_error(model: &DualAe, traj: &Trajectory, view: usize) -> Result<f64> {
    let tpv = traj
        .tpv
        .get(view)
        .ok_or_else(|| EvalError::Invalid(format!("view {view} of {}", traj.n_views())))?;
    alignment_error_codes(
        &h_codes(model, &traj.fpv, Branch::Fpv)?,
        &h_codes(model, tpv, Branch::Tpv)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentEntry {
    pub trajectory: usize,
    pub view: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub model_id: String,
    pub split: Split,
    pub entries: Vec<AlignmentEntry>,
    /// Mean over the per-view entries.
    pub mean: f64,
    /// Mean over trajectories of the all-views variant.
    pub all_views_mean: f64,
}

impl AlignmentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,split,trajectory,view,alignment_error\n");
        let split = split_name(self.split);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{split},{},{},{}",
                self.model_id, e.trajectory, e.view, e.error
            );
        }
        let _ = writeln!(s, "{},{split},mean,per_view,{}", self.model_id, self.mean);
        let _ = writeln!(
            s,
            "{},{split},mean,all_views,{}",
            self.model_id, self.all_views_mean
        );
        s
    }
}

/// Alignment error over every (trajectory, view) pair of a split.
pub fn eval_alignment(
    model: &DualAe,
    data: &Dataset,
    split: Split,
    model_id: &str,
) -> Result<AlignmentReport> {
    let trajs = data.split(split);
    if trajs.is_empty() {
        return Err(EvalError::EmptySplit(split_name(split)));
    }
    let mut entries = Vec::new();
    let mut all_sum = 0.0;
    for (id, t) in &trajs {
        let hf = h_codes(model, &t.fpv, Branch::Fpv)?;
        let mut streams = Vec::with_capacity(t.n_views());
        for (view, s) in t.tpv.iter().enumerate() {
            let ht = h_codes(model, s, Branch::Tpv)?;
            entries.push(AlignmentEntry {
                trajectory: *id,
                view,
                error: alignment_error_codes(&hf, &ht)?,
            });
            streams.push(ht);
        }
        all_sum += alignment_error_codes_all(&hf, &streams)?;
    }
    let mean = entries.iter().map(|e| e.error).sum::<f64>() / entries.len() as f64;
    Ok(AlignmentReport {
        model_id: model_id.to_string(),
        split,
        entries,
        mean,
        all_views_mean: all_sum / trajs.len() as f64,
    })
}

/// Mean squared pixel error between two frames.
pub fn pixel_mse(a: &Frame, b: &Frame) -> f64 {
    let n = a.data.len().max(1) as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Fraction of (time, source view, target view) triples in which decoding
/// `[h_source, v_target]` lands closer to the target view's frame than to
/// the source view's frame.
pub fn vswap_fraction(model: &DualAe, trajs: &[&Trajectory]) -> Result<(usize, usize)> {
    let mut closer = 0;
    let mut total = 0;
    for t in trajs {
        for step in 0..t.len() {
            let frames: Vec<&Frame> = t.tpv.iter().map(|s| &s[step]).collect();
            let codes = model.encode_frames(&frames, Branch::Tpv)?;
            let mut zs = Vec::new();
            let mut pairs = Vec::new();
            for a in 0..frames.len() {
                let b = (a + 1) % frames.len();
                if a == b {
                    continue;
                }
                let mut z = codes[a].h.clone();
                z.extend_from_slice(&codes[b].v);
                zs.push(z);
                pairs.push((a, b));
            }
            if zs.is_empty() {
                continue;
            }
            for (out, (a, b)) in model.decode(&zs, Branch::Tpv)?.iter().zip(pairs) {
                total += 1;
                if pixel_mse(out, frames[b]) < pixel_mse(out, frames[a]) {
                    closer += 1;
                }
            }
        }
    }
    Ok((closer, total))
}

/// Write originals and identity, h-swapped and v-swapped reconstructions at
/// timestep `t` of a trajectory as PPM files. Returns the written paths.
///
/// * `fpv.ppm`, `tpv{k}.ppm`: originals.
/// * `tpv{k}_recon.ppm`: identity reconstruction of view `k`.
/// * `tpv{k}_hswap.ppm`: view `k` decoded with `h` replaced by the FPV `h`.
/// * `tpv{k}_vswap.ppm`: view `k`'s `h` decoded with the next view's `v`.
/// * `view0_t{s}_vswap.ppm`: view 0 at time `s` decoded with the `v` of
///   view 0 at time `t`.
pub fn dump_permutation_recon(
    model: &DualAe,
    traj: &Trajectory,
    t: usize,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if t >= traj.len() {
        return Err(EvalError::Invalid(format!(
            "timestep {t} of {}",
            traj.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, f: &Frame| -> Result<()> {
        let p = dir.join(name);
        write_ppm(f, &p)?;
        written.push(p);
        Ok(())
    };
    let hf = model.encode(&traj.fpv[t], Branch::Fpv)?;
    put("fpv.ppm".into(), &traj.fpv[t])?;
    let views: Vec<&Frame> = traj.tpv.iter().map(|s| &s[t]).collect();
    let codes = model.encode_frames(&views, Branch::Tpv)?;
    let n = views.len();
    let mut zs = Vec::new();
    for (k, c) in codes.iter().enumerate() {
        zs.push(c.z());
        let mut h_swap = hf.h.clone();
        h_swap.extend_from_slice(&c.v);
        zs.push(h_swap);
        let mut v_swap = c.h.clone();
        v_swap.extend_from_slice(&codes[(k + 1) % n].v);
        zs.push(v_swap);
    }
    let outs = model.decode(&zs, Branch::Tpv)?;
    for k in 0..n {
        put(format!("tpv{k}.ppm"), views[k])?;
        put(format!("tpv{k}_recon.ppm"), &outs[3 * k])?;
        put(format!("tpv{k}_hswap.ppm"), &outs[3 * k + 1])?;
        put(format!("tpv{k}_vswap.ppm"), &outs[3 * k + 2])?;
    }
    let stream: Vec<&Frame> = traj.tpv[0].iter().collect();
    let times = model.encode_frames(&stream, Branch::Tpv)?;
    let zs: Vec<Vec<f64>> = times
        .iter()
        .map(|c| {
            let mut z = c.h.clone();
            z.extend_from_slice(&times[t].v);
            z
        })
        .collect();
    for (s, f) in model.decode(&zs, Branch::Tpv)?.iter().enumerate() {
        put(format!("view0_t{s}_vswap.ppm"), f)?;
    }
    Ok(written)
}

/// Two-component PCA of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Up to two unit components, sign-fixed so their largest-magnitude
    /// entry is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above the numerical tolerance.
    pub rank: usize,
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n < 3 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(EvalError::Invalid(format!(
                "PCA needs ≥ 3 equal-length rows, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = 1e-10 * top.max(1e-300) * d as f64;
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
        let mut components = Vec::new();
        let mut eigenvalues = Vec::new();
        for &i in order.iter().take(2.min(rank)) {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = c
                .iter()
                .copied()
                .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            eigenvalues.push(eig.eigenvalues[i]);
        }
        Ok(Pca {
            mean,
            components,
            eigenvalues,
            rank,
        })
    }

    /// `(pc1, pc2)`; components beyond the rank project to 0.
    pub fn project(&self, row: &[f64]) -> (f64, f64) {
        let p = |k: usize| {
            self.components.get(k).map_or(0.0, |c| {
                c.iter()
                    .zip(row)
                    .zip(&self.mean)
                    .map(|((c, x), m)| c * (x - m))
                    .sum()
            })
        };
        (p(0), p(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaRow {
    pub trajectory: usize,
    /// `fpv` or `tpv{k}`.
    pub stream: String,
    pub timestep: usize,
    pub pc1: f64,
    pub pc2: f64,
}

pub const PCA_CSV_HEADER: &str = "trajectory,stream,timestep,pc1,pc2";

/// Project the `h` codes of every frame of a split onto their top two
/// principal components.
pub fn pca_projection(model: &DualAe, data: &Dataset, split: Split) -> Result<(Pca, Vec<PcaRow>)> {
    let trajs = data.split(split);
    if trajs.is_empty() {
        return Err(EvalError::EmptySplit(split_name(split)));
    }
    let mut meta = Vec::new();
    let mut codes = Vec::new();
    for (id, t) in &trajs {
        for (ts, h) in h_codes(model, &t.fpv, Branch::Fpv)?.into_iter().enumerate() {
            meta.push((*id, "fpv".to_string(), ts));
            codes.push(h);
        }
        for (k, s) in t.tpv.iter().enumerate() {
            for (ts, h) in h_codes(model, s, Branch::Tpv)?.into_iter().enumerate() {
                meta.push((*id, format!("tpv{k}"), ts));
                codes.push(h);
            }
        }
    }
    let pca = Pca::fit(&codes)?;
    let rows = meta
        .into_iter()
        .zip(&codes)
        .map(|((trajectory, stream, timestep), h)| {
            let (pc1, pc2) = pca.project(h);
            PcaRow {
                trajectory,
                stream,
                timestep,
                pc1,
                pc2,
            }
        })
        .collect();
    Ok((pca, rows))
}

pub fn pca_csv(rows: &[PcaRow]) -> String {
    let mut s = format!("{PCA_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.trajectory, r.stream, r.timestep, r.pc1, r.pc2
        );
    }
    s
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

//! Batch construction and the representation training loop.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{eval_alignment, EvalError};
use crate::model::{
    derangement, ArchConfig, BatchForward, Branch, DualAe, LossBatch, LossBreakdown, LossConfig,
    ModelError, StreamRef, TcItem,
};
use crate::sim::{Dataset, Frame, Split, Trajectory};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no training trajectory is longer than {0} frames")]
    NoLongTrajectory(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("permutation batches need {0}")]
    Permute(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How anchors find positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Positives come from the other view at the same time.
    MultiView,
    /// FPV frames only; the positive is the FPV frame one step away.
    FpvOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub anchors: usize,
    /// Frames per permutation group (same view, and same time).
    pub permute_group: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            anchors: 8,
            permute_group: 4,
            steps: 20_000,
            lr: 1e-3,
            seed: 0,
            eval_every: 500,
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            mode: TrainMode::MultiView,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 || self.steps == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "anchors, steps and eval_every must be positive".into(),
            ));
        }
        if self.permute_group < 2 {
            return Err(TrainError::Config(
                "permute_group must be at least 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        self.loss.validate()?;
        self.arch.validate()?;
        Ok(())
    }
}

/// A frame address: trajectory id, stream (`None` = FPV), timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameKey {
    pub traj: usize,
    pub stream: Option<usize>,
    pub t: usize,
}

impl FrameKey {
    pub fn branch(&self) -> Branch {
        if self.stream.is_some() {
            Branch::Tpv
        } else {
            Branch::Fpv
        }
    }
}

/// Training-split trajectories available for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndex {
    /// (trajectory id, length) of every loaded training trajectory.
    pub trajectories: Vec<(usize, usize)>,
    pub n_views: usize,
}

impl SampleIndex {
    pub fn new(data: &Dataset) -> Self {
        SampleIndex {
            trajectories: data
                .split(Split::Train)
                .into_iter()
                .map(|(id, t)| (id, t.len()))
                .collect(),
            n_views: data.manifest.n_views,
        }
    }

    /// Every (trajectory, stream, timestep) triple of the index.
    pub fn triples(&self) -> impl Iterator<Item = FrameKey> + '_ {
        self.trajectories.iter().flat_map(move |&(traj, len)| {
            std::iter::once(None)
                .chain((0..self.n_views).map(Some))
                .flat_map(move |stream| (0..len).map(move |t| FrameKey { traj, stream, t }))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcTriad {
    pub anchor: FrameKey,
    pub positive: FrameKey,
    pub negatives: Vec<FrameKey>,
}

fn pick_negative_time<R: Rng>(len: usize, a: usize, margin: usize, rng: &mut R) -> usize {
    let eligible: Vec<usize> = (0..len).filter(|t| t.abs_diff(a) >= margin).collect();
    eligible[rng.gen_range(0..eligible.len())]
}

/// Anchors with their positive and negatives. Negatives are drawn with
/// replacement from times at least `neg_margin` away, all from one stream
/// per anchor.
pub fn sample_tc_batch<R: Rng>(
    index: &SampleIndex,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TcTriad>> {
    let margin = cfg.loss.neg_margin;
    let long: Vec<(usize, usize)> = index
        .trajectories
        .iter()
        .copied()
        .filter(|&(_, len)| len > 2 * margin)
        .collect();
    if long.is_empty() {
        return Err(TrainError::NoLongTrajectory(2 * margin));
    }
    if cfg.mode == TrainMode::MultiView && index.n_views == 0 {
        return Err(TrainError::Config(
            "multi-view training needs TPV streams".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.anchors);
    for _ in 0..cfg.anchors {
        let (traj, len) = long[rng.gen_range(0..long.len())];
        let a = rng.gen_range(0..len);
        let key = |stream, t| FrameKey { traj, stream, t };
        let (anchor, positive, neg_stream) = match cfg.mode {
            TrainMode::MultiView => {
                let view = Some(rng.gen_range(0..index.n_views));
                if rng.gen_bool(0.5) {
                    (key(None, a), key(view, a), view)
                } else {
                    (key(view, a), key(None, a), None)
                }
            }
            TrainMode::FpvOnly => {
                let p = if a == 0 || (a + 1 < len && rng.gen_bool(0.5)) {
                    a + 1
                } else {
                    a - 1
                };
                (key(None, a), key(None, p), None)
            }
        };
        let negatives = (0..cfg.loss.n_negatives)
            .map(|_| key(neg_stream, pick_negative_time(len, a, margin, rng)))
            .collect();
        out.push(TcTriad {
            anchor,
            positive,
            negatives,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermuteBatch {
    /// One (trajectory, view) at distinct times.
    pub same_view: Vec<FrameKey>,
    /// One (trajectory, time) at distinct views.
    pub same_time: Vec<FrameKey>,
}

pub fn sample_permute_batch<R: Rng>(
    index: &SampleIndex,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PermuteBatch> {
    if index.n_views < 2 {
        return Err(TrainError::Permute("at least 2 views"));
    }
    let usable: Vec<(usize, usize)> = index
        .trajectories
        .iter()
        .copied()
        .filter(|&(_, l)| l >= 2)
        .collect();
    if usable.is_empty() {
        return Err(TrainError::Permute(
            "a trajectory with at least 2 timesteps",
        ));
    }
    let (traj, len) = usable[rng.gen_range(0..usable.len())];
    let view = rng.gen_range(0..index.n_views);
    let k = cfg.permute_group.min(len);
    let mut times = sample(rng, len, k).into_vec();
    times.sort_unstable();
    let same_view = times
        .into_iter()
        .map(|t| FrameKey {
            traj,
            stream: Some(view),
            t,
        })
        .collect();

    let (traj, len) = usable[rng.gen_range(0..usable.len())];
    let t = rng.gen_range(0..len);
    let k = cfg.permute_group.min(index.n_views);
    let mut views = sample(rng, index.n_views, k).into_vec();
    views.sort_unstable();
    let same_time = views
        .into_iter()
        .map(|v| FrameKey {
            traj,
            stream: Some(v),
            t,
        })
        .collect();
    Ok(PermuteBatch {
        same_view,
        same_time,
    })
}

/// Deduplicated per-branch frame rows.
#[derive(Default)]
struct Rows {
    fpv: Vec<FrameKey>,
    tpv: Vec<FrameKey>,
    map: HashMap<FrameKey, usize>,
}

impl Rows {
    fn add(&mut self, k: FrameKey) -> usize {
        if let Some(&i) = self.map.get(&k) {
            return i;
        }
        let list = match k.branch() {
            Branch::Fpv => &mut self.fpv,
            Branch::Tpv => &mut self.tpv,
        };
        list.push(k);
        let i = list.len() - 1;
        self.map.insert(k, i);
        i
    }
}

fn stack(data: &Dataset, keys: &[FrameKey]) -> Option<Tensor> {
    if keys.is_empty() {
        return None;
    }
    let first = frame_of(data, keys[0]);
    let (h, w) = (first.height, first.width);
    let mut v = Vec::with_capacity(keys.len() * 3 * h * w);
    for k in keys {
        v.extend(frame_of(data, *k).to_chw());
    }
    Some(Tensor::new(vec![keys.len(), Frame::CHANNELS, h, w], v).expect("sized by frames"))
}

fn frame_of(data: &Dataset, k: FrameKey) -> &Frame {
    let t: &Trajectory = data.get(k.traj).expect("index covers loaded trajectories");
    t.frame(k.stream, k.t)
}

/// Turn sampled frame addresses into a loss batch with one row per
/// distinct frame.
pub fn assemble_batch<R: Rng>(
    data: &Dataset,
    triads: &[TcTriad],
    permute: Option<&PermuteBatch>,
    rng: &mut R,
) -> Result<(LossBatch, Vec<FrameKey>)> {
    let mut rows = Rows::default();
    let mut tc = Vec::with_capacity(triads.len());
    for tr in triads {
        let anchor = StreamRef {
            branch: tr.anchor.branch(),
            idx: rows.add(tr.anchor),
        };
        let positive = StreamRef {
            branch: tr.positive.branch(),
            idx: rows.add(tr.positive),
        };
        let negatives = tr.negatives.iter().map(|k| rows.add(*k)).collect();
        tc.push(TcItem {
            anchor,
            positive,
            negatives,
        });
    }
    let mut batch = LossBatch {
        tc,
        ..LossBatch::default()
    };
    if let Some(p) = permute {
        batch.same_view = p.same_view.iter().map(|k| rows.add(*k)).collect();
        batch.same_time = p.same_time.iter().map(|k| rows.add(*k)).collect();
        batch.derange_v = derangement(batch.same_view.len(), rng)?;
        batch.derange_h = derangement(batch.same_time.len(), rng)?;
    }
    batch.fpv = stack(data, &rows.fpv);
    batch.tpv = stack(data, &rows.tpv);
    let mut touched = rows.fpv;
    touched.extend(rows.tpv);
    Ok((batch, touched))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    /// (step, held-out alignment error) at each evaluation.
    pub evals: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
    pub best_error: Option<f64>,
    pub last: LossBreakdown,
}

/// Run `cfg.steps` Adam updates on fresh batches from the training split
/// of `train_data`. When `eval_data` is given, the held-out alignment
/// error is measured every `eval_every` steps and at the end, and the
/// model is left at the best-scoring parameters. `log` receives one CSV
/// row per step.
pub fn train(
    model: &mut DualAe,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut audit: Option<&mut Vec<FrameKey>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.arch != cfg.arch {
        return Err(TrainError::Config(
            "model architecture differs from the config".into(),
        ));
    }
    let index = SampleIndex::new(train_data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.params.tensors());
    let use_view_loss = model.arch.dim_v > 0 && cfg.mode == TrainMode::MultiView;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
    }
    let mut report = TrainReport {
        steps: cfg.steps,
        evals: Vec::new(),
        best_step: None,
        best_error: None,
        last: LossBreakdown::default(),
    };
    let mut best = None;
    for step in 1..=cfg.steps {
        let triads = sample_tc_batch(&index, cfg, &mut rng)?;
        let permute = if use_view_loss {
            Some(sample_permute_batch(&index, cfg, &mut rng)?)
        } else {
            None
        };
        let (batch, touched) = assemble_batch(train_data, &triads, permute.as_ref(), &mut rng)?;
        if let Some(a) = audit.as_deref_mut() {
            a.extend(touched);
        }
        let tape = Tape::new();
        let vars = model.params.attach(&tape);
        let bd = {
            let fw = BatchForward::new(&tape, model, &vars, &batch)?;
            let (loss, bd) = fw.total(&batch, &cfg.loss)?;
            tape.backward(loss).map_err(ModelError::from)?;
            bd
        };
        let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
        adam.step(model.params.tensors_mut(), &grads)
            .map_err(ModelError::from)?;
        report.last = bd;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", bd.csv_row(step))?;
        }
        if let Some(test) = eval_data {
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let err = eval_alignment(model, test, Split::Test, "train")?.mean;
                report.evals.push((step, err));
                if report.best_error.is_none_or(|b| err < b) {
                    report.best_error = Some(err);
                    report.best_step = Some(step);
                    best = Some(model.params.clone());
                }
            }
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(report)
}

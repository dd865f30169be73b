use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Branch, DualAe, ModelError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which loss disentangles `v` from `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLoss {
    Permute,
    /// Cosine similarity/dissimilarity on `v` (ablation).
    Vmatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Minimum temporal distance of negatives, in frames.
    pub neg_margin: usize,
    pub n_negatives: usize,
    pub view_loss: ViewLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            tau: 5.0,
            neg_margin: 3,
            n_negatives: 16,
            view_loss: ViewLoss::Permute,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Arch(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.neg_margin < 2 {
            return bad("neg_margin must be at least 2");
        }
        if self.n_negatives == 0 {
            return bad("n_negatives must be positive");
        }
        Ok(())
    }
}

/// A frame in the batch: row `idx` of the branch's frame tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamRef {
    pub branch: Branch,
    pub idx: usize,
}

/// One anchor with its positive and negatives. Negatives live in the
/// positive's branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TcItem {
    pub anchor: StreamRef,
    pub positive: StreamRef,
    pub negatives: Vec<usize>,
}

/// Frames of one training step plus the structure the losses need.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    /// `[N_f, C, H, W]`, FPV branch inputs.
    pub fpv: Option<Tensor>,
    /// `[N_t, C, H, W]`, TPV branch inputs.
    pub tpv: Option<Tensor>,
    pub tc: Vec<TcItem>,
    /// TPV rows from one view at distinct times.
    pub same_view: Vec<usize>,
    /// TPV rows from one time at distinct views.
    pub same_time: Vec<usize>,
    /// Partner position within `same_view` for each entry.
    pub derange_v: Vec<usize>,
    /// Partner position within `same_time` for each entry.
    pub derange_h: Vec<usize>,
}

/// Per-term loss values. In the vmatch ablation `l_v` and `l_h` carry the
/// similarity and dissimilarity terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tc_f: f64,
    pub l_tc_t: f64,
    pub l_match: f64,
    pub l_v: f64,
    pub l_h: f64,
    pub l_recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_tc_f,l_tc_t,l_match,l_v,l_h,l_recon,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_tc_f, self.l_tc_t, self.l_match, self.l_v, self.l_h, self.l_recon, self.total
        )
    }
}

/// `exp(cos(h1, h2) · tau)`.
pub fn critic_d(h1: &[f64], h2: &[f64], tau: f64) -> Result<f64> {
    Ok((crate::tensor::cosine(h1, h2)? * tau).exp())
}

/// `−log(d(a, p) / (d(a, p) + Σ d(a, nᵢ)))` on plain vectors.
pub fn infonce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let cos = |b: &[f64]| crate::tensor::cosine(anchor, b);
    let lp = cos(positive)? * tau;
    let mut sum = lp.exp();
    for n in negatives {
        sum += (cos(n)? * tau).exp();
    }
    Ok(sum.ln() - lp)
}

/// Uniform random derangement of `0..n` (no fixed points), `n ≥ 2`.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(ModelError::Batch(format!("derangement of {n} elements")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &k)| i != k) {
            return Ok(p);
        }
    }
}

/// Encoded and reconstructed batch on one tape.
pub struct BatchForward<'a> {
    pub tape: &'a Tape,
    pub model: &'a DualAe,
    pub vars: &'a [Var],
    x_f: Option<Var>,
    x_t: Option<Var>,
    z_f: Option<Var>,
    z_t: Option<Var>,
    /// Values read at stop-gradient sites, when they come from a reference
    /// model instead of this pass.
    sg_f: Option<Var>,
    sg_t: Option<Var>,
}

impl<'a> BatchForward<'a> {
    pub fn new(
        tape: &'a Tape,
        model: &'a DualAe,
        vars: &'a [Var],
        batch: &LossBatch,
    ) -> Result<Self> {
        let mut fw = BatchForward {
            tape,
            model,
            vars,
            x_f: None,
            x_t: None,
            z_f: None,
            z_t: None,
            sg_f: None,
            sg_t: None,
        };
        if let Some(x) = &batch.fpv {
            let xv = tape.constant(x.clone());
            fw.z_f = Some(model.encode_var(tape, vars, xv, Branch::Fpv)?);
            fw.x_f = Some(xv);
        }
        if let Some(x) = &batch.tpv {
            let xv = tape.constant(x.clone());
            fw.z_t = Some(model.encode_var(tape, vars, xv, Branch::Tpv)?);
            fw.x_t = Some(xv);
        }
        Ok(fw)
    }

    /// Like [`BatchForward::new`], but every stop-gradient site reads the
    /// encodings of `reference` instead. With `reference` equal to `model`
    /// the values are identical; perturbing only `model` then yields finite
    /// differences of the gradient the stop-gradients define.
    pub fn with_reference(
        tape: &'a Tape,
        model: &'a DualAe,
        vars: &'a [Var],
        batch: &LossBatch,
        reference: &DualAe,
    ) -> Result<Self> {
        let mut fw = Self::new(tape, model, vars, batch)?;
        let rvars = reference.params.attach_frozen(tape);
        if let Some(x) = fw.x_f {
            fw.sg_f = Some(reference.encode_var(tape, &rvars, x, Branch::Fpv)?);
        }
        if let Some(x) = fw.x_t {
            fw.sg_t = Some(reference.encode_var(tape, &rvars, x, Branch::Tpv)?);
        }
        Ok(fw)
    }

    /// `h` as seen through a stop-gradient.
    fn h_sg(&self, branch: Branch) -> Result<Var> {
        let reference = match branch {
            Branch::Fpv => self.sg_f,
            Branch::Tpv => self.sg_t,
        };
        match reference {
            Some(z) => Ok(self.tape.slice(z, 1, 0, self.model.arch.dim_h)?),
            None => Ok(self.tape.stop_grad(self.h(branch)?)),
        }
    }

    fn z(&self, branch: Branch) -> Result<Var> {
        match branch {
            Branch::Fpv => self.z_f,
            Branch::Tpv => self.z_t,
        }
        .ok_or_else(|| ModelError::Batch(format!("batch has no {branch:?} frames")))
    }

    fn x(&self, branch: Branch) -> Result<Var> {
        match branch {
            Branch::Fpv => self.x_f,
            Branch::Tpv => self.x_t,
        }
        .ok_or_else(|| ModelError::Batch(format!("batch has no {branch:?} frames")))
    }

    fn h(&self, branch: Branch) -> Result<Var> {
        Ok(self
            .tape
            .slice(self.z(branch)?, 1, 0, self.model.arch.dim_h)?)
    }

    fn v(&self, branch: Branch) -> Result<Var> {
        let a = &self.model.arch;
        Ok(self.tape.slice(self.z(branch)?, 1, a.dim_h, a.dim_z())?)
    }

    /// InfoNCE averaged over the items anchored in `branch`; `None` when no
    /// item is.
    pub fn infonce(&self, batch: &LossBatch, branch: Branch, tau: f64) -> Result<Option<Var>> {
        let items: Vec<&TcItem> = batch
            .tc
            .iter()
            .filter(|it| it.anchor.branch == branch)
            .collect();
        let Some(first) = items.first() else {
            return Ok(None);
        };
        let n_neg = first.negatives.len();
        let pos_branch = first.positive.branch;
        if n_neg == 0
            || items
                .iter()
                .any(|it| it.negatives.len() != n_neg || it.positive.branch != pos_branch)
        {
            return Err(ModelError::Batch(
                "anchors of one branch need equal, nonzero negative counts and one positive branch"
                    .into(),
            ));
        }
        let t = self.tape;
        let h_a = self.h(branch)?;
        let h_p = self.h_sg(pos_branch)?;
        let anchors: Vec<usize> = items.iter().map(|it| it.anchor.idx).collect();
        let positives: Vec<usize> = items.iter().map(|it| it.positive.idx).collect();
        let a = t.gather_rows(h_a, &anchors)?;
        let p = t.gather_rows(h_p, &positives)?;
        let cos_p = t.cosine_similarity(a, p)?;

        let rep: Vec<usize> = anchors
            .iter()
            .flat_map(|&i| std::iter::repeat_n(i, n_neg))
            .collect();
        let negs: Vec<usize> = items
            .iter()
            .flat_map(|it| it.negatives.iter().copied())
            .collect();
        let a_rep = t.gather_rows(h_a, &rep)?;
        let n = t.gather_rows(h_p, &negs)?;
        let cos_n = t.reshape(t.cosine_similarity(a_rep, n)?, &[items.len(), n_neg])?;

        let logit_p = t.scale(cos_p, tau)?;
        let d_p = t.exp(logit_p)?;
        let d_n = t.sum_last(t.exp(t.scale(cos_n, tau)?)?)?;
        // −log(d_p / (d_p + Σ d_n)) = log(d_p + Σ d_n) − τ·cos_p
        let term = t.sub(t.log(t.add(d_p, d_n)?)?, logit_p)?;
        Ok(Some(t.mean(term)?))
    }

    /// Mean `‖h^T − sg(h^F)‖₂` over cross-branch anchor/positive pairs.
    pub fn match_loss(&self, batch: &LossBatch) -> Result<Option<Var>> {
        let mut tpv = Vec::new();
        let mut fpv = Vec::new();
        for it in &batch.tc {
            match (it.anchor.branch, it.positive.branch) {
                (Branch::Tpv, Branch::Fpv) => {
                    tpv.push(it.anchor.idx);
                    fpv.push(it.positive.idx);
                }
                (Branch::Fpv, Branch::Tpv) => {
                    fpv.push(it.anchor.idx);
                    tpv.push(it.positive.idx);
                }
                _ => {}
            }
        }
        if tpv.is_empty() {
            return Ok(None);
        }
        let t = self.tape;
        let ht = t.gather_rows(self.h(Branch::Tpv)?, &tpv)?;
        let hf = t.gather_rows(self.h_sg(Branch::Fpv)?, &fpv)?;
        Ok(Some(t.mean(t.l2_norm(t.sub(ht, hf)?)?)?))
    }

    fn check_group(group: &[usize], perm: &[usize], what: &str) -> Result<()> {
        if group.len() < 2 || perm.len() != group.len() || perm.iter().any(|&k| k >= group.len()) {
            return Err(ModelError::Batch(format!(
                "{what} group needs at least 2 frames and a matching permutation"
            )));
        }
        Ok(())
    }

    /// Mean L2 reconstruction error of TPV rows `targets` decoded from
    /// `[h of h_rows, v of v_rows]`.
    fn swapped_recon(&self, targets: &[usize], h_rows: &[usize], v_rows: &[usize]) -> Result<Var> {
        let t = self.tape;
        let h = t.gather_rows(self.h(Branch::Tpv)?, h_rows)?;
        let v = t.gather_rows(self.v(Branch::Tpv)?, v_rows)?;
        let z = t.concat(&[h, v], 1)?;
        let out = self.model.decode_var(t, self.vars, z, Branch::Tpv)?;
        let x = t.gather_rows(self.x(Branch::Tpv)?, targets)?;
        let n = targets.len();
        let diff = t.reshape(t.sub(out, x)?, &[n, t.shape(out)[1..].iter().product()])?;
        Ok(t.mean(t.l2_norm(diff)?)?)
    }

    /// `(L_v, L_h)`, TPV branch only.
    pub fn permute_terms(&self, batch: &LossBatch) -> Result<(Var, Var)> {
        Self::check_group(&batch.same_view, &batch.derange_v, "same-view")?;
        Self::check_group(&batch.same_time, &batch.derange_h, "same-time")?;
        let g = &batch.same_view;
        let v_rows: Vec<usize> = batch.derange_v.iter().map(|&k| g[k]).collect();
        let l_v = self.swapped_recon(g, g, &v_rows)?;
        let g = &batch.same_time;
        let h_rows: Vec<usize> = batch.derange_h.iter().map(|&k| g[k]).collect();
        let l_h = self.swapped_recon(g, &h_rows, g)?;
        Ok((l_v, l_h))
    }

    /// `(L_vsim, L_vdissim)`: mean cosine over same-view pairs and mean
    /// `max(cos, 0)` over cross-view pairs.
    pub fn vmatch_terms(&self, batch: &LossBatch) -> Result<(Var, Var)> {
        let t = self.tape;
        let v = self.v(Branch::Tpv)?;
        let pair_cos = |group: &[usize]| -> Result<Var> {
            if group.len() < 2 {
                return Err(ModelError::Batch(
                    "vmatch groups need at least 2 frames".into(),
                ));
            }
            let mut a = Vec::new();
            let mut b = Vec::new();
            for i in 0..group.len() {
                for j in i + 1..group.len() {
                    a.push(group[i]);
                    b.push(group[j]);
                }
            }
            Ok(t.cosine_similarity(t.gather_rows(v, &a)?, t.gather_rows(v, &b)?)?)
        };
        let sim = t.mean(pair_cos(&batch.same_view)?)?;
        let dissim = t.mean(t.relu(pair_cos(&batch.same_time)?)?)?;
        Ok((sim, dissim))
    }

    /// Batch mean of per-frame summed squared reconstruction error over
    /// every frame of both branches.
    pub fn recon(&self) -> Result<Var> {
        let t = self.tape;
        let mut per_frame = Vec::new();
        for branch in [Branch::Fpv, Branch::Tpv] {
            let Ok(z) = self.z(branch) else { continue };
            let out = self.model.decode_var(t, self.vars, z, branch)?;
            let x = self.x(branch)?;
            let shape = t.shape(out);
            let sq = t.square(t.sub(out, x)?)?;
            let flat = t.reshape(sq, &[shape[0], shape[1..].iter().product()])?;
            per_frame.push(t.sum_last(flat)?);
        }
        if per_frame.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        Ok(t.mean(t.concat(&per_frame, 0)?)?)
    }

    /// `α·L_tc + β·L_view + L_recon` with its breakdown. The view term is
    /// skipped when `dim_v = 0`.
    pub fn total(&self, batch: &LossBatch, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
        let t = self.tape;
        let zero = t.constant(Tensor::scalar(0.0));
        let val = |v: Option<Var>| v.map_or(0.0, |v| t.item(v));
        let tc_f = self.infonce(batch, Branch::Fpv, cfg.tau)?;
        let tc_t = self.infonce(batch, Branch::Tpv, cfg.tau)?;
        let m = self.match_loss(batch)?;
        let mut bd = LossBreakdown {
            l_tc_f: val(tc_f),
            l_tc_t: val(tc_t),
            l_match: val(m),
            ..LossBreakdown::default()
        };
        let mut tc = zero;
        for term in [tc_f, tc_t, m].into_iter().flatten() {
            tc = t.add(tc, term)?;
        }
        let recon = self.recon()?;
        bd.l_recon = t.item(recon);
        let mut total = t.add(t.scale(tc, cfg.alpha)?, recon)?;
        // batches without permutation groups (FPV-only training) skip the view term
        let has_groups = !(batch.same_view.is_empty() && batch.same_time.is_empty());
        if self.model.arch.dim_v > 0 && has_groups {
            let (a, b) = match cfg.view_loss {
                ViewLoss::Permute => self.permute_terms(batch)?,
                ViewLoss::Vmatch => self.vmatch_terms(batch)?,
            };
            bd.l_v = t.item(a);
            bd.l_h = t.item(b);
            total = t.add(total, t.scale(t.add(a, b)?, cfg.beta)?)?;
        }
        bd.total = t.item(total);
        Ok((total, bd))
    }
}

fn eval_scalar(
    model: &DualAe,
    batch: &LossBatch,
    f: impl FnOnce(&BatchForward) -> Result<Var>,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, model, &vars, batch)?;
    let v = f(&fw)?;
    Ok(tape.item(v))
}

/// `L_tc = L_tc^F + L_tc^T + L_match`.
pub fn loss_tc(model: &DualAe, batch: &LossBatch, cfg: &LossConfig) -> Result<f64> {
    if batch.tc.is_empty() {
        return Err(ModelError::Batch("no anchors".into()));
    }
    eval_scalar(model, batch, |fw| {
        let mut acc = fw.tape.constant(Tensor::scalar(0.0));
        for term in [
            fw.infonce(batch, Branch::Fpv, cfg.tau)?,
            fw.infonce(batch, Branch::Tpv, cfg.tau)?,
            fw.match_loss(batch)?,
        ]
        .into_iter()
        .flatten()
        {
            acc = fw.tape.add(acc, term)?;
        }
        Ok(acc)
    })
}

/// `L_v + L_h`.
pub fn loss_permute(model: &DualAe, batch: &LossBatch) -> Result<f64> {
    eval_scalar(model, batch, |fw| {
        let (a, b) = fw.permute_terms(batch)?;
        Ok(fw.tape.add(a, b)?)
    })
}

pub fn loss_recon(model: &DualAe, batch: &LossBatch) -> Result<f64> {
    eval_scalar(model, batch, |fw| fw.recon())
}

/// `L_vsim + L_vdissim` (ablation).
pub fn loss_vmatch(model: &DualAe, batch: &LossBatch) -> Result<f64> {
    eval_scalar(model, batch, |fw| {
        let (a, b) = fw.vmatch_terms(batch)?;
        Ok(fw.tape.add(a, b)?)
    })
}

pub fn total_loss(model: &DualAe, batch: &LossBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let vars = model.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, model, &vars, batch)?;
    Ok(fw.total(batch, cfg)?.1)
}

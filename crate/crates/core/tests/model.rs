use egotpil::model::{
    critic_d, derangement, infonce, loss_permute, loss_recon, loss_tc, loss_vmatch, total_loss,
    ArchConfig, BatchForward, Branch, DualAe, LossBatch, LossConfig, StreamRef, TcItem, ViewLoss,
};
use egotpil::sim::{render_tpv, viewpoints, with_target, EnvConfig, Frame};
use egotpil::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frames(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * 3 * size * size).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(vec![n, 3, size, size], data).unwrap()
}

fn fref(branch: Branch, idx: usize) -> StreamRef {
    StreamRef { branch, idx }
}

/// Four FPV and four TPV frames with one anchor in each direction and both
/// permutation groups over the TPV rows.
fn tiny_batch(seed: u64) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LossBatch {
        fpv: Some(random_frames(4, 8, &mut rng)),
        tpv: Some(random_frames(4, 8, &mut rng)),
        tc: vec![
            TcItem {
                anchor: fref(Branch::Fpv, 0),
                positive: fref(Branch::Tpv, 0),
                negatives: vec![1, 2, 3],
            },
            TcItem {
                anchor: fref(Branch::Tpv, 1),
                positive: fref(Branch::Fpv, 1),
                negatives: vec![0, 2, 3],
            },
        ],
        same_view: vec![0, 1, 2],
        same_time: vec![1, 2, 3],
        derange_v: vec![1, 2, 0],
        derange_h: vec![2, 0, 1],
    }
}

/// Tiny model with random nonzero biases so no ReLU layer is dead.
fn tiny_model(seed: u64) -> DualAe {
    tiny_model_with(ArchConfig::tiny(), seed)
}

fn tiny_model_with(arch: ArchConfig, seed: u64) -> DualAe {
    let mut m = DualAe::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let names: Vec<String> = m.params.names().to_vec();
    for (i, n) in names.iter().enumerate() {
        if n.ends_with(".b") {
            for v in m.params.tensors_mut()[i].data_mut() {
                *v = rng.gen_range(0.05..0.3);
            }
        }
    }
    m
}

fn set_param(model: &mut DualAe, name: &str, f: impl Fn(usize) -> f64) {
    let i = model
        .params
        .index_of(name)
        .unwrap_or_else(|| panic!("no {name}"));
    for (k, v) in model.params.tensors_mut()[i]
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        *v = f(k);
    }
}

/// Encoder output independent of the input: `z = bias`.
fn constant_encoder(model: &mut DualAe, z: &[f64]) {
    for b in ["fpv", "tpv"] {
        set_param(model, &format!("{b}.enc.fc.w"), |_| 0.0);
        set_param(model, &format!("{b}.enc.fc.b"), |k| z[k]);
    }
}

/// Scalar of `f` on a fresh tape with gradient-tracking parameters.
fn with_grads(
    model: &DualAe,
    batch: &LossBatch,
    f: impl Fn(&BatchForward) -> Var,
) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let vars = model.params.attach(&tape);
    let fw = BatchForward::new(&tape, model, &vars, batch).unwrap();
    let loss = f(&fw);
    tape.backward(loss).unwrap();
    (
        tape.item(loss),
        vars.iter().map(|v| tape.grad_or_zeros(*v)).collect(),
    )
}

fn value_of(model: &DualAe, batch: &LossBatch, f: &impl Fn(&BatchForward) -> Var) -> f64 {
    let tape = Tape::new();
    let vars = model.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, model, &vars, batch).unwrap();
    tape.item(f(&fw))
}

/// Value with every stop-gradient site frozen at `reference`'s encodings.
fn value_frozen(
    model: &DualAe,
    reference: &DualAe,
    batch: &LossBatch,
    f: &impl Fn(&BatchForward) -> Var,
) -> f64 {
    let tape = Tape::new();
    let vars = model.params.attach_frozen(&tape);
    let fw = BatchForward::with_reference(&tape, model, &vars, batch, reference).unwrap();
    tape.item(f(&fw))
}

/// Central finite differences on `samples` random parameter entries, with
/// stop-gradient sites held at the unperturbed model.
fn gradient_check(
    model: &DualAe,
    batch: &LossBatch,
    samples: usize,
    seed: u64,
    f: impl Fn(&BatchForward) -> Var,
) {
    let (_, grads) = with_grads(model, batch, &f);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < samples {
        attempts += 1;
        assert!(attempts < 50 * samples, "too few differentiable samples");
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let mut plus = model.clone();
        plus.params.tensors_mut()[p].data_mut()[flat] += h;
        let mut minus = model.clone();
        minus.params.tensors_mut()[p].data_mut()[flat] -= h;
        let numeric = (value_frozen(&plus, model, batch, &f)
            - value_frozen(&minus, model, batch, &f))
            / (2.0 * h);
        let analytic = grads[p].data()[flat];
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            // Both vanish: a dead unit, nothing to compare.
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel < 1e-4,
            "{}[{flat}]: analytic {analytic} numeric {numeric} rel {rel}",
            model.params.names()[p]
        );
        checked += 1;
    }
}

#[test]
fn critic_values() {
    let h = [0.3, -1.2, 2.0];
    assert!((critic_d(&h, &h, 1.0).unwrap() - std::f64::consts::E).abs() < 1e-12);
    assert!((critic_d(&[1.0, 0.0], &[0.0, 2.0], 7.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(critic_d(&[0.0, 0.0], &[1.0, 0.0], 1.0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = critic_d(&a, &b, 5.0).unwrap();
        assert!(d >= (-5.0f64).exp() - 1e-12 && d <= 5.0f64.exp() + 1e-9);
    }
}

#[test]
fn uniform_critic_gives_log_of_candidate_count() {
    let mut m = tiny_model(1);
    constant_encoder(&mut m, &[0.5, -1.0, 2.0, 0.25, 1.0, 1.0]);
    let b = tiny_batch(2);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let vars = m.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, &m, &vars, &b).unwrap();
    let f = tape.item(fw.infonce(&b, Branch::Fpv, cfg.tau).unwrap().unwrap());
    let t = tape.item(fw.infonce(&b, Branch::Tpv, cfg.tau).unwrap().unwrap());
    let mm = tape.item(fw.match_loss(&b).unwrap().unwrap());
    assert!((f - 4f64.ln()).abs() < 1e-9, "{f}");
    assert!((t - 4f64.ln()).abs() < 1e-9, "{t}");
    assert_eq!(mm, 0.0);
    assert!((loss_tc(&m, &b, &cfg).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-9);
}

#[test]
fn separated_infonce_closed_form() {
    let a = [1.0, 0.0];
    let n = vec![vec![-1.0, 0.0]; 3];
    let v = infonce(&a, &a, &n, 5.0).unwrap();
    let expect = -(5f64.exp() / (5f64.exp() + 3.0 * (-5f64).exp())).ln();
    assert!((v - expect).abs() < 1e-15);
    assert!((v - 1.36e-4).abs() < 1e-6);
}

#[test]
fn tape_infonce_matches_plain_formula() {
    let m = tiny_model(3);
    let b = tiny_batch(4);
    let rows = |x: &Tensor, branch| {
        let n = x.shape()[0];
        let s = x.shape()[2];
        let frames: Vec<Frame> = (0..n)
            .map(|i| {
                let mut f = Frame::blank(s, s, egotpil::sim::FrameKind::Fpv);
                let plane = s * s;
                for p in 0..plane {
                    for c in 0..3 {
                        f.data[p * 3 + c] = x.row(i)[c * plane + p] as f32;
                    }
                }
                f
            })
            .collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        m.encode_frames(&refs, branch).unwrap()
    };
    // Frames go through f32, so compare against the tape on the same values.
    let to_f32 = |t: &Tensor| {
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap()
    };
    let b = LossBatch {
        fpv: b.fpv.as_ref().map(to_f32),
        tpv: b.tpv.as_ref().map(to_f32),
        ..b
    };
    let hf = rows(b.fpv.as_ref().unwrap(), Branch::Fpv);
    let ht = rows(b.tpv.as_ref().unwrap(), Branch::Tpv);
    let negs: Vec<Vec<f64>> = [1, 2, 3].iter().map(|&i| ht[i].h.clone()).collect();
    let plain = infonce(&hf[0].h, &ht[0].h, &negs, 5.0).unwrap();
    let tape = Tape::new();
    let vars = m.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, &m, &vars, &b).unwrap();
    let v = tape.item(fw.infonce(&b, Branch::Fpv, 5.0).unwrap().unwrap());
    assert!((v - plain).abs() < 1e-9, "{v} vs {plain}");
}

fn branch_grad_norm(m: &DualAe, grads: &[Tensor], branch: Branch) -> f64 {
    m.branch_param_indices(branch)
        .iter()
        .flat_map(|&i| grads[i].data().iter())
        .map(|g| g.abs())
        .sum()
}

#[test]
fn stop_gradient_sites_block_exactly() {
    let m = tiny_model(5);
    let b = tiny_batch(6);
    let (_, g) = with_grads(&m, &b, |fw| {
        fw.infonce(&b, Branch::Fpv, 5.0).unwrap().unwrap()
    });
    assert_eq!(branch_grad_norm(&m, &g, Branch::Tpv), 0.0);
    assert!(branch_grad_norm(&m, &g, Branch::Fpv) > 0.0);
    let (_, g) = with_grads(&m, &b, |fw| {
        fw.infonce(&b, Branch::Tpv, 5.0).unwrap().unwrap()
    });
    assert_eq!(branch_grad_norm(&m, &g, Branch::Fpv), 0.0);
    assert!(branch_grad_norm(&m, &g, Branch::Tpv) > 0.0);
    let (_, g) = with_grads(&m, &b, |fw| fw.match_loss(&b).unwrap().unwrap());
    assert_eq!(branch_grad_norm(&m, &g, Branch::Fpv), 0.0);
    assert!(branch_grad_norm(&m, &g, Branch::Tpv) > 0.0);
}

#[test]
fn permutation_terms_never_touch_the_fpv_branch() {
    let m = tiny_model(7);
    let b = tiny_batch(8);
    let (_, g) = with_grads(&m, &b, |fw| {
        let (v, h) = fw.permute_terms(&b).unwrap();
        fw.tape.add(v, h).unwrap()
    });
    assert_eq!(branch_grad_norm(&m, &g, Branch::Fpv), 0.0);
}

#[test]
fn gradient_checks_on_tiny_config() {
    let m = tiny_model(9);
    let b = tiny_batch(10);
    let cfg = LossConfig::default();
    gradient_check(&m, &b, 20, 11, |fw| fw.total(&b, &cfg).unwrap().0);
    gradient_check(&m, &b, 10, 12, |fw| {
        let mut acc = fw.infonce(&b, Branch::Fpv, cfg.tau).unwrap().unwrap();
        acc = fw
            .tape
            .add(acc, fw.infonce(&b, Branch::Tpv, cfg.tau).unwrap().unwrap())
            .unwrap();
        fw.tape
            .add(acc, fw.match_loss(&b).unwrap().unwrap())
            .unwrap()
    });
    gradient_check(&m, &b, 10, 13, |fw| {
        let (v, h) = fw.permute_terms(&b).unwrap();
        fw.tape.add(v, h).unwrap()
    });
    gradient_check(&m, &b, 10, 14, |fw| fw.recon().unwrap());
    let vm = LossConfig {
        view_loss: ViewLoss::Vmatch,
        ..cfg
    };
    gradient_check(&m, &b, 10, 15, |fw| fw.total(&b, &vm).unwrap().0);
}

/// Mean `‖G(F(x)) − x‖₂` of the given TPV rows through the public API.
fn plain_recon_norm(m: &DualAe, b: &LossBatch, rows: &[usize]) -> f64 {
    let x = b.tpv.as_ref().unwrap();
    let tape = Tape::new();
    let vars = m.params.attach_frozen(&tape);
    let xv = tape.constant(x.clone());
    let z = m.encode_var(&tape, &vars, xv, Branch::Tpv).unwrap();
    let out = m.decode_var(&tape, &vars, z, Branch::Tpv).unwrap();
    let out = tape.value(out);
    let width = x.len() / x.shape()[0];
    rows.iter()
        .map(|&r| {
            (0..width)
                .map(|k| (out.row(r)[k] - x.row(r)[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / rows.len() as f64
}

fn l_v(m: &DualAe, b: &LossBatch) -> f64 {
    value_of(m, b, &|fw: &BatchForward| fw.permute_terms(b).unwrap().0)
}

#[test]
fn stopped_branches_have_zero_finite_difference() {
    // Perturbing only the TPV encoder leaves the FPV-anchored term fixed
    // once its stopped inputs are frozen.
    let m = tiny_model(40);
    let b = tiny_batch(41);
    let f = |fw: &BatchForward| fw.infonce(&b, Branch::Fpv, 5.0).unwrap().unwrap();
    for &i in &m.encoder_param_indices(Branch::Tpv) {
        let mut p = m.clone();
        p.params.tensors_mut()[i].data_mut()[0] += 1e-5;
        assert_eq!(value_frozen(&p, &m, &b, &f), value_frozen(&m, &m, &b, &f));
    }
}

#[test]
fn identity_permutation_is_plain_reconstruction() {
    let m = tiny_model(16);
    let mut b = tiny_batch(17);
    b.derange_v = vec![0, 1, 2];
    let expect = plain_recon_norm(&m, &b, &b.same_view);
    assert!((l_v(&m, &b) - expect).abs() < 1e-9);
}

#[test]
fn decoder_that_ignores_v_makes_l_v_permutation_invariant() {
    let mut m = tiny_model(18);
    let a = m.arch.clone();
    let flat = m.params.get(m.decoder_input_weight(Branch::Tpv)).shape()[1];
    set_param(&mut m, "tpv.dec.fc.w", |k| {
        if k / flat >= a.dim_h {
            0.0
        } else {
            ((k % 7) as f64 - 3.0) * 0.1
        }
    });
    let mut b = tiny_batch(19);
    let deranged = l_v(&m, &b);
    b.derange_v = vec![0, 1, 2];
    assert!((deranged - l_v(&m, &b)).abs() < 1e-12);
    assert!((deranged - plain_recon_norm(&m, &b, &b.same_view)).abs() < 1e-9);
}

#[test]
fn permute_loss_positive_and_requires_groups() {
    let m = tiny_model(20);
    let b = tiny_batch(21);
    let v = loss_permute(&m, &b).unwrap();
    assert!(v.is_finite() && v > 0.0);
    let short = LossBatch {
        same_view: vec![0],
        derange_v: vec![0],
        ..b
    };
    assert!(loss_permute(&m, &short).is_err());
}

#[test]
fn recon_of_gray_image_is_pixel_arithmetic() {
    let mut m = DualAe::new(ArchConfig::default(), 22).unwrap();
    // A zero final layer outputs sigmoid(0) = 0.5 everywhere.
    for name in ["fpv.dec.deconv0.w", "fpv.dec.deconv0.b"] {
        set_param(&mut m, name, |_| 0.0);
    }
    let b = LossBatch {
        fpv: Some(Tensor::full(&[2, 3, 32, 32], 0.6)),
        ..LossBatch::default()
    };
    assert!((loss_recon(&m, &b).unwrap() - 30.72).abs() < 1e-9);
}

#[test]
fn total_loss_weighting() {
    let m = tiny_model(23);
    let b = tiny_batch(24);
    let zero = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        ..LossConfig::default()
    };
    let bd = total_loss(&m, &b, &zero).unwrap();
    assert!((bd.total - loss_recon(&m, &b).unwrap()).abs() < 1e-9);
    let one = total_loss(&m, &b, &LossConfig::default()).unwrap();
    let parts = one.l_tc_f + one.l_tc_t + one.l_match + one.l_v + one.l_h + one.l_recon;
    assert!((one.total - parts).abs() < 1e-9);
    let five = LossConfig {
        alpha: 5.0,
        ..LossConfig::default()
    };
    let bd5 = total_loss(&m, &b, &five).unwrap();
    let expect = 5.0 * (one.l_tc_f + one.l_tc_t + one.l_match) + one.l_v + one.l_h + one.l_recon;
    assert!((bd5.total - expect).abs() < 1e-9);
    for v in [
        one.l_tc_f,
        one.l_tc_t,
        one.l_match,
        one.l_v,
        one.l_h,
        one.l_recon,
    ] {
        assert!(v >= 0.0);
    }
}

#[test]
fn zero_dim_v_skips_the_view_loss() {
    let arch = ArchConfig {
        dim_v: 0,
        ..ArchConfig::tiny()
    };
    let m = tiny_model_with(arch, 25);
    let mut b = tiny_batch(26);
    b.same_view.clear();
    b.same_time.clear();
    let bd = total_loss(&m, &b, &LossConfig::default()).unwrap();
    assert_eq!((bd.l_v, bd.l_h), (0.0, 0.0));
}

#[test]
fn vmatch_trivial_values() {
    let mut m = tiny_model(27);
    // Identical v everywhere: same-view cos = 1, cross-view max(cos, 0) = 1.
    constant_encoder(&mut m, &[1.0, 0.0, 0.0, 0.0, 0.3, 0.4]);
    let b = tiny_batch(28);
    assert!((loss_vmatch(&m, &b).unwrap() - 2.0).abs() < 1e-12);
    let tape = Tape::new();
    let vars = m.params.attach_frozen(&tape);
    let fw = BatchForward::new(&tape, &m, &vars, &b).unwrap();
    let (sim, dissim) = fw.vmatch_terms(&b).unwrap();
    assert!((tape.item(sim) - 1.0).abs() < 1e-12);
    assert!((tape.item(dissim) - 1.0).abs() < 1e-12);
}

#[test]
fn vmatch_orthogonal_cross_view_pair_is_zero() {
    // relu(cos) of orthogonal codes, via the same tape ops the loss uses.
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap());
    let c = tape.relu(tape.cosine_similarity(a, b).unwrap()).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0]);
}

#[test]
fn derangements_have_no_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for n in 2..8 {
        for _ in 0..200 {
            let p = derangement(n, &mut rng).unwrap();
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &k)| i != k));
        }
    }
    assert!(derangement(1, &mut rng).is_err());
}

fn overfit(frames: &[Frame], steps: usize, lr: f64) -> (f64, f64) {
    let mut m = DualAe::new(ArchConfig::default(), 30).unwrap();
    let refs: Vec<&Frame> = frames.iter().collect();
    let b = LossBatch {
        tpv: Some(m.frames_tensor(&refs).unwrap()),
        ..LossBatch::default()
    };
    let mut adam = Adam::new(AdamConfig::with_lr(lr), m.params.tensors());
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..steps {
        let (loss, grads) = with_grads(&m, &b, |fw| fw.recon().unwrap());
        first.get_or_insert(loss);
        last = loss;
        adam.step(m.params.tensors_mut(), &grads).unwrap();
    }
    let after = loss_recon(&m, &b).unwrap();
    let _ = last;
    (first.unwrap(), after)
}

fn tpv_frames(n: usize) -> Vec<Frame> {
    let env = EnvConfig::default();
    let views = viewpoints(4, false);
    (0..n)
        .map(|i| render_tpv(&with_target(&env, (i as i32 + 1, 2)), &views[i % 4], 32))
        .collect()
}

#[test]
fn decoder_can_overfit_one_image() {
    let frames = tpv_frames(1);
    let (_, after) = overfit(&frames, 2000, 1e-3);
    let mse = after / (32.0 * 32.0 * 3.0);
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn recon_drops_on_a_small_batch() {
    let frames = tpv_frames(4);
    let (first, after) = overfit(&frames, 500, 1e-3);
    assert!(after < 0.1 * first, "{first} → {after}");
}

#[test]
fn batch_errors_are_reported() {
    let m = tiny_model(31);
    let mut b = tiny_batch(32);
    b.tc[1].negatives.pop();
    b.tc[0].negatives.pop();
    assert!(loss_tc(&m, &b, &LossConfig::default()).is_ok());
    b.tc.push(TcItem {
        anchor: fref(Branch::Fpv, 2),
        positive: fref(Branch::Tpv, 2),
        negatives: vec![0],
    });
    assert!(loss_tc(&m, &b, &LossConfig::default()).is_err());
    let empty = LossBatch::default();
    assert!(loss_recon(&m, &empty).is_err());
}

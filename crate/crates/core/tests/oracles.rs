mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use srn_gradreg::bptt::{backward, run_batch};
use srn_gradreg::linalg::{dot, norm2, Vector};
use srn_gradreg::model::{forward, loss_from_output_pre, OutputActivation, Target};
use srn_gradreg::regularizer::{compute_g_dg, gate, q_factor, report_from_pass, Decision, GateRule, RegConfig};
use srn_gradreg::tasks::{generate, TaskKind, TaskSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn bptt_matches_finite_differences(seed in any::<u64>(), softmax in any::<bool>()) {
        let mut r = rng(seed);
        let (n_in, n_hid, n_out, t) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(2..=3), r.random_range(1..=8));
        let act = if softmax { OutputActivation::Softmax } else { OutputActivation::Linear };
        let p = random_net(&mut r, n_in, n_hid, n_out, act, 0.6);
        let seq = random_seq(&mut r, t, n_in);
        let target = if softmax {
            Target::Class(r.random_range(0..n_out))
        } else {
            Target::Regression((0..n_out).map(|_| r.random_range(-1.0..1.0)).collect())
        };
        let trace = forward(&p, &seq, None).unwrap();
        let lr = loss_from_output_pre(act, &trace.output_pre, &target, act.loss_kind(), 0.04).unwrap();
        prop_assert!((lr.loss - naive_loss(&p, &seq, &target)).abs() < 1e-12 * lr.loss.abs().max(1.0));
        let g = backward(&p, &trace, &lr.output_delta, t).unwrap().grads;
        let fd = fd_grads(&p, &seq, &target, 1e-6);
        prop_assert!(max_rel_err(&flatten(&g), &flatten(&fd), 1e-3) < 1e-6);
    }

    #[test]
    fn dg_equals_sum_over_substituted_factors(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n_hid = r.random_range(1..=6);
        let t = r.random_range(1..=12);
        let h = r.random_range(1..=t);
        let p = random_net(&mut r, 2, n_hid, 1, OutputActivation::Linear, 0.8);
        let trace = forward(&p, &random_seq(&mut r, t, 2), None).unwrap();
        let top: Vector = (0..n_hid).map(|_| r.random_range(-1.0..1.0)).collect();
        let dw = random_mat(&mut r, n_hid, n_hid, 1.0);
        let (g, dg) = compute_g_dg(&p, &trace, &top, &dw, h).unwrap();
        let g_ref = frozen_deep_delta(&p.w_rec, &trace, &top, h);
        let dg_ref = naive_dg(&p.w_rec, &dw, &trace, &top, h);
        let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        prop_assert!(max_rel_err(g.as_slice(), &g_ref, 1e-12 * scale(&g_ref)) < 1e-10);
        prop_assert!(max_rel_err(dg.as_slice(), &dg_ref, 1e-12 * scale(&dg_ref)) < 1e-10);
    }

    #[test]
    fn ds_is_the_frozen_trace_derivative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n_hid = r.random_range(2..=5);
        let t = r.random_range(2..=8);
        let h = r.random_range(1..=t);
        let p = random_net(&mut r, 2, n_hid, 1, OutputActivation::Linear, 0.7);
        let trace = forward(&p, &random_seq(&mut r, t, 2), None).unwrap();
        let top: Vector = (0..n_hid).map(|_| r.random_range(-1.0..1.0)).collect();
        let dw = random_mat(&mut r, n_hid, n_hid, 1.0);
        let (g, dg) = compute_g_dg(&p, &trace, &top, &dw, h).unwrap();
        let ds = dot(&g, &dg);
        let eps = 1e-6;
        let fd = (frozen_s(&p.w_rec.add(&dw.scale(eps)), &trace, &top, h)
            - frozen_s(&p.w_rec.sub(&dw.scale(eps)), &trace, &top, h))
            / (2.0 * eps);
        prop_assert!((ds - fd).abs() <= 1e-4 * ds.abs().max(fd.abs()).max(1e-12));
    }

    #[test]
    fn ds_is_odd_in_the_correction(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut r = rng(seed);
        let spec = TaskSpec::new(TaskKind::Adding, 10).unwrap();
        let p = random_net(&mut r, 2, 4, 1, OutputActivation::Linear, 0.5);
        let batch = generate(&spec, 4, r.random()).unwrap();
        let pass = run_batch(&p, &spec, &batch.samples, 10).unwrap();
        let dw = random_mat(&mut r, 4, 4, 1.0);
        let cfg = RegConfig::default();
        let base = report_from_pass(&p, &pass, &cfg, &dw).unwrap();
        let scaled = report_from_pass(&p, &pass, &cfg, &dw.scale(c)).unwrap();
        prop_assert!((scaled.ds - c * base.ds).abs() <= 1e-12 * (c * base.ds).abs().max(1e-300));
        prop_assert_eq!(scaled.s, base.s);
        prop_assert_eq!(scaled.q, base.q);
    }

    #[test]
    fn q_is_antisymmetric_and_never_nan(a in 0.0f64..1e3, b in 0.0f64..1e3) {
        let q = q_factor(a, b);
        prop_assert!(!q.is_nan());
        if a > 0.0 && b > 0.0 {
            prop_assert!((q + q_factor(b, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_rules_agree_inside_and_differ_only_in_direction(ds in -2.0f64..2.0, q in -4.0f64..4.0) {
        let lit = gate(ds, q, -1.0, 1.0, 1.0, GateRule::Literal);
        let res = gate(ds, q, -1.0, 1.0, 1.0, GateRule::Restoring);
        if ds.abs() > 1.0 {
            prop_assert_eq!(lit, Decision::RejectLargeDs);
            prop_assert_eq!(res, Decision::RejectLargeDs);
        } else if (-1.0..=1.0).contains(&q) {
            prop_assert_eq!(lit, Decision::Accept);
            prop_assert_eq!(res, Decision::Accept);
        } else if ds != 0.0 {
            prop_assert_ne!(lit, res);
        }
    }
}

#[test]
fn batch_report_uses_batch_means() {
    let mut r = rng(5);
    let spec = TaskSpec::new(TaskKind::TemporalOrder, 20).unwrap();
    let p = random_net(&mut r, 6, 5, 4, OutputActivation::Softmax, 0.6);
    let batch = generate(&spec, 6, 3).unwrap();
    let pass = run_batch(&p, &spec, &batch.samples, 7).unwrap();
    let dw = random_mat(&mut r, 5, 5, 0.1);
    let rep = report_from_pass(&p, &pass, &RegConfig::default(), &dw).unwrap();
    let mut g = vec![0.0; 5];
    let mut top = vec![0.0; 5];
    for sp in &pass.passes {
        for i in 0..5 {
            g[i] += sp.bptt.deepest()[i] / 6.0;
            top[i] += sp.bptt.top()[i] / 6.0;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(max_rel_err(rep.g.as_slice(), &g, 1e-15) < 1e-12);
    assert!((rep.deep_norm - norm(&g)).abs() < 1e-12 * norm(&g));
    assert!((rep.q - (norm(&top) / norm(&g)).log10()).abs() < 1e-12);
    assert!((rep.s - 0.5 * norm2(&rep.g).powi(2)).abs() < 1e-12 * rep.s);
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check, grad_check_many};

fn cloud(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

fn sinkhorn_cost(a: &Tensor, b: &Tensor, eps: f64, iters: usize) -> f64 {
    sinkhorn_plan(a, b, eps, iters).unwrap().cost
}

#[test]
fn single_points_cost_their_distance() {
    let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
    let p = sinkhorn_plan(&a, &b, 0.05, 10).unwrap();
    assert!((p.plan.data()[0] - 1.0).abs() < 1e-12);
    assert!((p.cost - 5.0).abs() < 1e-12);
}

#[test]
fn self_transport_is_cheap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = cloud(5, 3, &mut rng);
    for eps in [0.1, 0.05, 0.01] {
        let c = sinkhorn_cost(&a, &a, eps, 200);
        assert!(c < eps * 5f64.ln() + 1e-6, "eps {eps}: {c}");
    }
}

#[test]
fn small_epsilon_matches_exact_on_three_points() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let (a, b) = (cloud(3, 4, &mut rng), cloud(3, 4, &mut rng));
        let exact = exact_ot_oracle(&a, &b).unwrap().cost;
        let approx = sinkhorn_cost(&a, &b, 1e-3, 500);
        assert!((approx - exact).abs() <= 0.02 * exact, "{approx} vs {exact}");
    }
}

#[test]
fn marginals_converge() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let (a, b) = (cloud(5, 3, &mut rng), cloud(5, 3, &mut rng));
        for (eps, iters) in [(1e-2, 20000), (5e-2, 20000), (1e-1, 20000)] {
            let p = sinkhorn_plan(&a, &b, eps, iters).unwrap();
            assert!(p.marginal_violation() < 1e-6, "eps {eps}: {}", p.marginal_violation());
            let direct: f64 = p.plan.data().iter().zip(0..).map(|(g, k)| {
                let (i, j) = (k / 5, k % 5);
                let d: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                g * d.sqrt()
            }).sum();
            assert!((direct - p.cost).abs() < 1e-12);
        }
    }
}

#[test]
fn sinkhorn_never_beats_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..30 {
        let n = rng.gen_range(1..=6);
        let (a, b) = (cloud(n, 3, &mut rng), cloud(n, 3, &mut rng));
        let exact = exact_ot_oracle(&a, &b).unwrap().cost;
        for eps in [1e-3, 0.05] {
            assert!(sinkhorn_cost(&a, &b, eps, 500) >= exact - 1e-9);
        }
    }
}

#[test]
fn wasserstein_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..10 {
        let (a, b) = (cloud(4, 5, &mut rng), cloud(4, 5, &mut rng));
        let ab = sinkhorn_cost(&a, &b, 0.05, 20000);
        let ba = sinkhorn_cost(&b, &a, 0.05, 20000);
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }
}

#[test]
fn bad_epsilon_is_config_error() {
    let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    assert!(matches!(sinkhorn_plan(&a, &a, 0.0, 10), Err(Error::Config(_))));
    assert!(matches!(sinkhorn_plan(&a, &a, -1.0, 10), Err(Error::Config(_))));
}

#[test]
fn exact_oracle_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let a = cloud(5, 2, &mut rng);
    let same = exact_ot_oracle(&a, &a).unwrap();
    assert_eq!(same.cost, 0.0);
    for i in 0..5 {
        assert_eq!(same.plan.at(i, i), 0.2);
    }

    // source (0,0),(10,0); target (10,1),(0,1): crossing pairing costs 1+1
    let s = Tensor::matrix(2, 2, vec![0.0, 0.0, 10.0, 0.0]).unwrap();
    let t = Tensor::matrix(2, 2, vec![10.0, 1.0, 0.0, 1.0]).unwrap();
    let p = exact_ot_oracle(&s, &t).unwrap();
    assert_eq!(p.plan.data(), &[0.0, 0.5, 0.5, 0.0]);
    assert!((p.cost - 1.0).abs() < 1e-15);

    let b = cloud(4, 2, &mut rng);
    assert!(matches!(exact_ot_oracle(&a, &b), Err(Error::Scope(_))));
    let big = cloud(9, 2, &mut rng);
    assert!(matches!(exact_ot_oracle(&big, &big), Err(Error::Scope(_))));
}

#[test]
fn exact_cost_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let (a, b) = (cloud(6, 2, &mut rng), cloud(6, 2, &mut rng));
    let th: f64 = 0.7;
    let rot = |m: &Tensor| {
        let data = (0..m.rows())
            .flat_map(|i| {
                let (x, y) = (m.at(i, 0), m.at(i, 1));
                [th.cos() * x - th.sin() * y, th.sin() * x + th.cos() * y]
            })
            .collect();
        Tensor::matrix(m.rows(), 2, data).unwrap()
    };
    let c0 = exact_ot_oracle(&a, &b).unwrap().cost;
    let c1 = exact_ot_oracle(&rot(&a), &rot(&b)).unwrap().cost;
    assert!((c0 - c1).abs() < 1e-12);
}

fn compat(dp: &[f64], dn: &[f64]) -> Result<f64> {
    let t = Tape::new();
    let v = compatibility_loss(&t, t.constant(&vector(dp)), t.constant(&vector(dn)))?;
    Ok(t.item(v))
}

#[test]
fn compatibility_examples() {
    assert_eq!(compat(&[0.3, 7.0], &[0.3, 7.0]).unwrap(), 0.5);
    assert!((compat(&[0.0], &[3f64.ln()]).unwrap() - 0.25).abs() < 1e-15);
    let v = compat(&[50.0], &[0.0]).unwrap();
    assert!(v.is_finite() && (v - (1.0 - (-50f64).exp())).abs() < 1e-15);
    assert!(matches!(compat(&[1.0, 2.0], &[1.0]), Err(Error::Contract(_))));
}

#[test]
fn compatibility_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..100 {
        let (dp, dn) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let t = Tape::new();
        let (p, n) = (t.param(&vector(&[dp])), t.param(&vector(&[dn])));
        let l = compatibility_loss(&t, p, n).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(p).unwrap().data()[0] > 0.0);
        assert!(t.grad(n).unwrap().data()[0] < 0.0);
    }
}

proptest! {
    #[test]
    fn compatibility_terms_in_open_unit_interval(dp in 0.0f64..30.0, dn in 0.0f64..30.0) {
        let v = compat(&[dp], &[dn]).unwrap();
        prop_assert!(v > 0.0 && v < 1.0);
    }
}

#[test]
fn batch_all_variant_reduces_to_pairwise_with_two_photos() {
    let t = Tape::new();
    let d = t.constant(&Tensor::matrix(2, 2, vec![0.5, 2.0, 1.5, 0.25]).unwrap());
    let all = t.item(compatibility_loss_batch_all(&t, d, &[0, 1]).unwrap());
    let pair = compat(&[0.5, 0.25], &[2.0, 1.5]).unwrap();
    assert!((all - pair).abs() < 1e-15);
}

fn dom(s: &[f64], p: &[f64], t: f64) -> Result<f64> {
    let tape = Tape::new();
    let v = domain_loss(&tape, tape.constant(&vector(s)), tape.constant(&vector(p)), t)?;
    Ok(tape.item(v))
}

#[test]
fn domain_loss_examples() {
    let t: f64 = 0.8;
    let logit = |y: f64| (y / (1.0 - y)).ln();
    let entropy = -t * t.ln() - (1.0 - t) * (1.0 - t).ln();
    let v = dom(&[logit(1.0 - t)], &[logit(t), logit(t)], t).unwrap();
    assert!((v - entropy).abs() < 1e-12);

    assert!((dom(&[0.0], &[0.0, 0.0], 0.8).unwrap() - 2f64.ln()).abs() < 1e-15);

    let a = dom(&[0.3, -1.0], &[2.0, 0.1, -0.4, 1.1], 0.5).unwrap();
    let b = dom(&[2.0, 0.1], &[0.3, -1.0, -0.4, 1.1], 0.5).unwrap();
    assert!((a - b).abs() < 1e-15);

    for bad in [0.0, 1.0, -0.2, 1.5] {
        assert!(matches!(dom(&[0.0], &[0.0], bad), Err(Error::Config(_))));
    }
}

fn cls(logits: Tensor, labels: &[usize]) -> Result<f64> {
    let t = Tape::new();
    let v = classification_loss(&t, &[(t.constant(&logits), labels)])?;
    Ok(t.item(v))
}

#[test]
fn classification_examples() {
    let uniform = Tensor::zeros(&[3, 4]);
    assert!((cls(uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    let confident = Tensor::matrix(1, 3, vec![0.0, 1e3, 0.0]).unwrap();
    assert!(cls(confident, &[1]).unwrap() < 1e-12);
    let two = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((cls(two.clone(), &[0]).unwrap() - want).abs() < 1e-15);
    assert!((want - 0.3133).abs() < 1e-4);
    assert!(matches!(cls(two, &[2]), Err(Error::Contract(_))));
}

fn sem(decoded: Vec<f64>, target: Vec<f64>) -> Result<f64> {
    let d = target.len();
    let t = Tape::new();
    let v = semantic_loss(
        &t,
        t.constant(&Tensor::matrix(1, d, decoded).unwrap()),
        t.constant(&Tensor::matrix(1, d, target).unwrap()),
    )?;
    Ok(t.item(v))
}

#[test]
fn semantic_examples() {
    let z = vec![0.3, -1.2, 2.0];
    assert!(sem(z.clone(), z.clone()).unwrap().abs() < 1e-15);
    assert!((sem(vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = z.iter().map(|x| -x).collect();
    assert!((sem(neg, z.clone()).unwrap() - 2.0).abs() < 1e-15);
    assert!(matches!(sem(z, vec![0.0; 3]), Err(Error::Data(_))));
}

#[test]
fn zero_decoded_vector_is_guarded() {
    let t = Tape::new();
    let dec = t.param(&Tensor::zeros(&[1, 3]));
    let v = semantic_loss(&t, dec, t.constant(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap())).unwrap();
    assert_eq!(t.item(v), 1.0);
    t.backward(v).unwrap();
    assert!(t.grad(dec).unwrap().data().iter().all(|&g| g == 0.0));
}

/// Five scalar leaves standing in for the component losses.
fn fixed_terms(t: &Tape, vals: [f64; 5]) -> LossTerms {
    let c = |x: f64| Some(t.constant(&Tensor::scalar(x)));
    LossTerms {
        wasserstein: c(vals[0]),
        compatibility: c(vals[1]),
        domain: c(vals[2]),
        classification: c(vals[3]),
        semantic: c(vals[4]),
    }
}

#[test]
fn total_loss_weighting() {
    let vals = [1.5, 0.4, 0.7, 1.1, 0.3];
    let t = Tape::new();
    let terms = fixed_terms(&t, vals);
    let zero = LossWeights {
        compatibility: 0.0,
        domain: 0.0,
        classification: 0.0,
        semantic: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(total_loss(&t, &terms, &zero).unwrap().1.total, 1.5);

    let (_, r) = total_loss(&t, &terms, &LossWeights::default()).unwrap();
    assert!((r.total - (1.5 + 0.25 * (0.4 + 0.7 + 1.1 + 0.3))).abs() < 1e-12);

    let w = LossWeights {
        compatibility: 0.3,
        domain: 0.1,
        classification: 0.7,
        semantic: 0.05,
        ..LossWeights::default()
    };
    let doubled = LossWeights {
        compatibility: 0.6,
        domain: 0.2,
        classification: 1.4,
        semantic: 0.1,
        ..w
    };
    let a = total_loss(&t, &terms, &w).unwrap().1.total - 1.5;
    let b = total_loss(&t, &terms, &doubled).unwrap().1.total - 1.5;
    assert!((b - 2.0 * a).abs() < 1e-12);
}

#[test]
fn disabled_terms_report_zero() {
    let t = Tape::new();
    let mut terms = fixed_terms(&t, [1.0, 2.0, 3.0, 4.0, 5.0]);
    terms.domain = None;
    terms.semantic = None;
    let (_, r) = total_loss(&t, &terms, &LossWeights::default()).unwrap();
    assert_eq!(r.domain, 0.0);
    assert_eq!(r.semantic, 0.0);
    assert!((r.total - (1.0 + 0.25 * (2.0 + 4.0))).abs() < 1e-12);

    let none = LossTerms::default();
    assert_eq!(total_loss(&t, &none, &LossWeights::default()).unwrap().1.total, 0.0);
}

#[test]
fn negative_weight_is_config_error() {
    let t = Tape::new();
    let terms = fixed_terms(&t, [1.0; 5]);
    let w = LossWeights {
        domain: -0.1,
        ..LossWeights::default()
    };
    assert!(matches!(total_loss(&t, &terms, &w), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn report_decomposition_holds(
        vals in proptest::array::uniform5(0.0f64..10.0),
        lam in proptest::array::uniform4(0.0f64..2.0),
    ) {
        let t = Tape::new();
        let w = LossWeights {
            compatibility: lam[0],
            domain: lam[1],
            classification: lam[2],
            semantic: lam[3],
            ..LossWeights::default()
        };
        let (_, r) = total_loss(&t, &fixed_terms(&t, vals), &w).unwrap();
        let want = r.wasserstein + lam[0] * r.compatibility + lam[1] * r.domain
            + lam[2] * r.classification + lam[3] * r.semantic;
        prop_assert!((r.total - want).abs() < 1e-9);
    }
}

#[test]
fn losses_pass_gradient_checks() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let (a, b) = (cloud(4, 3, &mut rng), cloud(4, 3, &mut rng));
        let w = grad_check_many(|t, v| wasserstein_sinkhorn(t, v[0], v[1], 0.05, 50), &[a, b]).unwrap();
        assert!(w < 1e-3, "sinkhorn seed {seed}: {w}");

        let dp = Tensor::vector((0..4).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let dn = Tensor::vector((0..4).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let c = grad_check_many(|t, v| compatibility_loss(t, v[0], v[1]), &[dp, dn]).unwrap();
        assert!(c < 1e-4, "compat seed {seed}: {c}");

        let ds = cloud(3, 4, &mut rng);
        let ba = grad_check(|t, v| compatibility_loss_batch_all(t, v, &[0, 2, 3]), &ds).unwrap();
        assert!(ba < 1e-4, "batch-all seed {seed}: {ba}");

        let zs = Tensor::vector((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let zp = Tensor::vector((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let d = grad_check_many(|t, v| domain_loss(t, v[0], v[1], 0.8), &[zs, zp]).unwrap();
        assert!(d < 1e-4, "domain seed {seed}: {d}");

        let l1 = cloud(3, 5, &mut rng);
        let l2 = cloud(3, 5, &mut rng);
        let k = grad_check_many(
            |t, v| classification_loss(t, &[(v[0], &[0, 4, 2][..]), (v[1], &[1, 1, 3][..])]),
            &[l1, l2],
        )
        .unwrap();
        assert!(k < 1e-4, "cls seed {seed}: {k}");

        let dec = cloud(3, 6, &mut rng);
        let tgt = cloud(3, 6, &mut rng);
        let s = grad_check(|t, v| semantic_loss(t, v, t.constant(&tgt)), &dec).unwrap();
        assert!(s < 1e-4, "sem seed {seed}: {s}");
    }
}

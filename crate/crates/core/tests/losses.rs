use octdistill_autodiff::{Element, Graph, Result as AdResult, Tensor, Var};
use octdistill_core::losses::{cross_entropy, focal_loss, kd_combined_loss, Alpha, DistillParams, FocalParams};
use octdistill_testkit::gradcheck::{self, Probe, Tolerance};
use octdistill_testkit::oracles;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(g: &mut Graph, rows: usize, data: Vec<f32>) -> Var {
    let k = data.len() / rows;
    g.leaf(Tensor::new(vec![rows, k], data).unwrap().with_requires_grad(true))
}

fn uniform(gamma: f64) -> FocalParams {
    FocalParams {
        alpha: Alpha::Uniform,
        gamma,
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let confident = logits(&mut g, 1, vec![100.0, 0.0, 0.0]);
    let l = cross_entropy(&mut g, confident, &[0]).unwrap();
    assert!(g.loss_value_f64(l).unwrap() < 1e-6);

    let flat = logits(&mut g, 1, vec![0.0; 3]);
    let l = cross_entropy(&mut g, flat, &[2]).unwrap();
    assert!((g.loss_value_f64(l).unwrap() - 3f64.ln()).abs() < 1e-12);

    assert!(cross_entropy(&mut g, flat, &[3]).is_err());
}

#[test]
fn focal_examples() {
    let mut g = Graph::new();
    let confident = logits(&mut g, 1, vec![100.0, 0.0, 0.0]);
    let l = focal_loss(&mut g, confident, &[0], &uniform(2.0)).unwrap();
    assert!(g.loss_value_f64(l).unwrap() < 1e-12);

    let even = logits(&mut g, 1, vec![0.0, 0.0]);
    let l = focal_loss(&mut g, even, &[1], &uniform(2.0)).unwrap();
    let expected = 0.25 * 2f64.ln();
    assert!((g.loss_value_f64(l).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.17329).abs() < 1e-5);

    assert!(focal_loss(&mut g, even, &[0], &uniform(-0.5)).is_err());
    assert!(focal_loss(&mut g, even, &[2], &uniform(2.0)).is_err());
}

#[test]
fn focal_with_gamma_zero_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let data: Vec<f32> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let mut g = Graph::new();
        let z = logits(&mut g, 4, data);
        let ce = cross_entropy(&mut g, z, &labels).unwrap();
        let fl = focal_loss(&mut g, z, &labels, &uniform(0.0)).unwrap();
        let (a, b) = (g.loss_value_f64(ce).unwrap(), g.loss_value_f64(fl).unwrap());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn focal_is_monotone_in_true_class_probability() {
    let mut previous = f64::INFINITY;
    for i in 0..200 {
        // two classes: p_t = sigmoid(z)
        let z = -10.0 + 0.1 * i as f32;
        let mut g = Graph::new();
        let v = logits(&mut g, 1, vec![z, 0.0]);
        let l = focal_loss(&mut g, v, &[0], &uniform(2.0)).unwrap();
        let value = g.loss_value_f64(l).unwrap();
        assert!(value <= previous, "z={z}: {value} > {previous}");
        previous = value;
    }
}

#[test]
fn kd_identities() {
    let params = DistillParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels = [0, 2, 1];

    let mut g = Graph::new();
    let s = logits(&mut g, 3, data.clone());
    let t = g.constant(Tensor::new(vec![3, 3], data.clone()).unwrap());
    let kd = kd_combined_loss(&mut g, s, t, &labels, &params).unwrap();
    assert_eq!(kd.breakdown.kl, 0.0);
    assert_eq!(kd.breakdown.total, 0.3 * kd.breakdown.ce);

    let hard_only = DistillParams {
        alpha_soft: 0.0,
        beta_hard: 1.0,
        ..params
    };
    let other: Vec<f32> = data.iter().map(|v| -v).collect();
    let t2 = g.constant(Tensor::new(vec![3, 3], other).unwrap());
    let kd = kd_combined_loss(&mut g, s, t2, &labels, &hard_only).unwrap();
    let ce = cross_entropy(&mut g, s, &labels).unwrap();
    assert!((kd.breakdown.total - g.loss_value_f64(ce).unwrap()).abs() < 1e-9);
    assert!((g.value(kd.loss).data()[0] as f64 - kd.breakdown.total).abs() < 1e-6);
}

#[test]
fn kd_two_class_matches_direct_evaluation() {
    let params = DistillParams::default();
    let mut g = Graph::new();
    let s = logits(&mut g, 1, vec![0.0, 0.0]);
    let t = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
    let kd = kd_combined_loss(&mut g, s, t, &[0], &params).unwrap();
    let kl = oracles::softened_kl(&[0.0, 0.0], &[2.0, 0.0], 4.0);
    let expected = 0.3 * 2f64.ln() + 0.7 * 16.0 * kl;
    assert!((kd.breakdown.total - expected).abs() < 1e-8);
    assert!((kd.breakdown.kl - kl).abs() < 1e-12);
}

#[test]
fn teacher_logits_receive_no_gradient() {
    let mut g = Graph::new();
    let s = logits(&mut g, 2, vec![0.3, -0.2, 1.0, 0.5, 0.1, -1.0]);
    let t = logits(&mut g, 2, vec![1.0, 0.0, -1.0, 0.2, 0.2, 0.9]);
    let kd = kd_combined_loss(&mut g, s, t, &[0, 1], &DistillParams::default()).unwrap();
    let grads = g.backward(kd.loss).unwrap();
    assert!(grads.get(s).is_some());
    assert!(grads.wrt(t, 6).iter().all(|v| *v == 0.0));
}

#[test]
fn kd_errors() {
    let mut g = Graph::new();
    let s = logits(&mut g, 1, vec![0.0, 0.0]);
    let t = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    assert!(kd_combined_loss(&mut g, s, t, &[0], &DistillParams::default()).is_err());
    let t = g.constant(Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap());
    let cold = DistillParams {
        temperature: 0.0,
        ..DistillParams::default()
    };
    assert!(kd_combined_loss(&mut g, s, t, &[0], &cold).is_err());
}

struct KdProbe {
    student: Tensor<f64>,
    teacher: Tensor<f64>,
    labels: Vec<usize>,
}

impl Probe for KdProbe {
    fn name(&self) -> String {
        format!("kd combined {:?}", self.student.shape())
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.student.clone(), self.teacher.clone()]
    }

    fn checked(&self) -> Vec<usize> {
        vec![0]
    }

    fn eval<F: Element>(&self, g: &mut Graph<F>, v: &[Var]) -> AdResult<Var> {
        Ok(kd_combined_loss(g, v[0], v[1], &self.labels, &DistillParams::default())
            .expect("kd loss")
            .loss)
    }
}

struct FocalProbe {
    logits: Tensor<f64>,
    labels: Vec<usize>,
    params: FocalParams,
}

impl Probe for FocalProbe {
    fn name(&self) -> String {
        format!("focal {:?} gamma {}", self.logits.shape(), self.params.gamma)
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }

    fn eval<F: Element>(&self, g: &mut Graph<F>, v: &[Var]) -> AdResult<Var> {
        Ok(focal_loss(g, v[0], &self.labels, &self.params).expect("focal loss"))
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tol = Tolerance::default();
    for (n, k) in [(1, 2), (2, 3), (4, 3), (3, 5), (6, 4)] {
        let mut t = |_| Tensor::from_fn(vec![n, k], |_| rng.gen_range(-2.0..2.0)).unwrap();
        let (student, teacher) = (t(0), t(1));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % k).collect();
        let report = gradcheck::check(
            &KdProbe {
                student: student.clone(),
                teacher,
                labels: labels.clone(),
            },
            &tol,
        );
        assert!(report.passed(&tol), "{report:?}");
        let alpha: Vec<f64> = (0..k).map(|c| 0.5 + c as f64 * 0.25).collect();
        for gamma in [0.0, 0.5, 2.0] {
            let report = gradcheck::check(
                &FocalProbe {
                    logits: student.clone(),
                    labels: labels.clone(),
                    params: FocalParams {
                        alpha: Alpha::PerClass(alpha.clone()),
                        gamma,
                    },
                },
                &tol,
            );
            assert!(report.passed(&tol), "{report:?}");
        }
    }
}

proptest! {
    #[test]
    fn losses_are_nonnegative(
        s in prop::collection::vec(-20.0f32..20.0, 6),
        t in prop::collection::vec(-20.0f32..20.0, 6),
        gamma in 0.0f64..4.0,
        label in 0usize..3,
    ) {
        let mut g = Graph::new();
        let sv = logits(&mut g, 2, s);
        let tv = g.constant(Tensor::new(vec![2, 3], t).unwrap());
        let labels = [label, (label + 1) % 3];
        let ce = cross_entropy(&mut g, sv, &labels).unwrap();
        let fl = focal_loss(&mut g, sv, &labels, &uniform(gamma)).unwrap();
        let kd = kd_combined_loss(&mut g, sv, tv, &labels, &DistillParams::default()).unwrap();
        prop_assert!(g.loss_value_f64(ce).unwrap() >= 0.0);
        prop_assert!(g.loss_value_f64(fl).unwrap() >= 0.0);
        prop_assert!(kd.breakdown.kl >= 0.0 && kd.breakdown.total >= 0.0);
    }

    #[test]
    fn kl_vanishes_exactly_when_softened_distributions_coincide(
        s in prop::collection::vec(-5.0f32..5.0, 4),
        shift in -3.0f32..3.0,
        bump in 0.5f32..3.0,
        which in 0usize..4,
    ) {
        let mut g = Graph::new();
        let sv = logits(&mut g, 1, s.clone());
        // a constant shift leaves softmax unchanged
        let shifted: Vec<f32> = s.iter().map(|v| v + shift).collect();
        let same = g.constant(Tensor::new(vec![1, 4], shifted).unwrap());
        let kd = kd_combined_loss(&mut g, sv, same, &[0], &DistillParams::default()).unwrap();
        prop_assert!(kd.breakdown.kl < 1e-9);
        let mut moved = s.clone();
        moved[which] += bump;
        let diff = g.constant(Tensor::new(vec![1, 4], moved).unwrap());
        let kd = kd_combined_loss(&mut g, sv, diff, &[0], &DistillParams::default()).unwrap();
        prop_assert!(kd.breakdown.kl > 1e-9);
    }
}

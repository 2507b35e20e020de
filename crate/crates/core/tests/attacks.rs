//! Attack reductions, budgets and closed forms.

use proptest::prelude::*;
use resonance::attacks::{
    attack_classifier, fgsm, make_adaptive, pgd, run_attack, AttackKind, ClassifierLoss, Objective,
};
use resonance::model::ModelSpec;
use resonance::{AttackConfig, Defense, DefenseConfig, Graph, Model, Tensor};

fn cnn(seed: u64) -> Model {
    Model::new(ModelSpec::small_cnn([1, 8, 8], 3), seed).unwrap()
}

fn image(seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(vec![1, 1, 8, 8], lo, hi, &mut resonance::seed::rng(seed))
}

#[test]
fn fgsm_on_linear_model_follows_weight_difference() {
    let m = Model::new(ModelSpec::logistic([1, 2, 2], 2), 3).unwrap();
    let w = &m.params()[0].1;
    let d = Defense::new(&m, DefenseConfig::none()).unwrap();
    let x = image(1, 0.3, 0.7).reshape(vec![1, 1, 8, 8]).unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], x.data()[..4].to_vec()).unwrap();
    let eps = 0.1;
    for y in 0..2 {
        let obj = ClassifierLoss::cross_entropy(&d, vec![y]);
        let adv = fgsm(&obj, &x, &AttackConfig::fgsm(eps)).unwrap();
        for k in 0..4 {
            // d CE / d x_k = (1 - p_y) (w_other,k - w_y,k).
            let diff = w.data()[(1 - y) * 4 + k] - w.data()[y * 4 + k];
            let want = x.data()[k] + eps * diff.signum();
            assert!((adv.x_adv.data()[k] - want).abs() < 1e-15);
        }
        assert!((adv.achieved_linf - eps).abs() < 1e-15);
    }
}

#[test]
fn one_step_pgd_is_fgsm() {
    let m = cnn(1);
    let d = Defense::new(&m, DefenseConfig::none()).unwrap();
    for seed in 0..5 {
        let x = image(seed, 0.0, 1.0);
        let obj = ClassifierLoss::cross_entropy(&d, vec![seed as usize % 3]);
        let a = fgsm(&obj, &x, &AttackConfig::fgsm(0.05)).unwrap();
        let cfg = AttackConfig {
            alpha: Some(0.05),
            ..AttackConfig::pgd(0.05, 1)
        };
        let b = pgd(&obj, &x, &cfg).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }
}

#[test]
fn zero_budget_returns_the_input() {
    let m = cnn(2);
    let d = Defense::new(&m, DefenseConfig::sr(1, "block1")).unwrap();
    let x = image(3, 0.0, 1.0);
    for cfg in [
        AttackConfig::fgsm(0.0),
        AttackConfig::pgd(0.0, 5),
        AttackConfig {
            random_start: true,
            ..AttackConfig::pgd(0.0, 5)
        },
        AttackConfig::new(AttackKind::CwMargin, 0.0, 5),
    ] {
        let obj = ClassifierLoss::for_attack(&d, vec![1], &cfg);
        let adv = run_attack(&obj, std::slice::from_ref(&x), &cfg).unwrap();
        assert_eq!(adv[0].x_adv, x, "{}", cfg.label());
    }
}

#[test]
fn margin_attack_on_misclassified_input_starts_nonpositive() {
    let m = cnn(5);
    let d = Defense::new(&m, DefenseConfig::none()).unwrap();
    let x = image(6, 0.0, 1.0);
    let pred = m.predict(&x).unwrap()[0];
    let wrong = (pred + 1) % 3;
    let cfg = AttackConfig::new(AttackKind::CwMargin, 0.03, 5);
    let obj = ClassifierLoss::for_attack(&d, vec![wrong], &cfg);
    let adv = pgd(&obj, &x, &cfg).unwrap();
    // The ascended objective is the negated margin, so a misclassified
    // input has margin <= 0 and objective >= 0.
    assert!(-adv.loss_trace[0] <= 0.0);
    assert!(adv.achieved_linf <= 0.03 + 1e-12);
}

#[test]
fn larger_budgets_reach_higher_loss() {
    let m = Model::new(ModelSpec::logistic([1, 8, 8], 3), 6).unwrap();
    let d = Defense::new(&m, DefenseConfig::none()).unwrap();
    let x = image(7, 0.2, 0.8);
    let obj = ClassifierLoss::cross_entropy(&d, vec![0]);
    let loss_at = |eps: f64| {
        let adv = fgsm(&obj, &x, &AttackConfig::fgsm(eps)).unwrap().x_adv;
        let mut g = Graph::new();
        let v = g.constant(adv);
        let l = obj.loss(&mut g, &[v]).unwrap();
        g.value(l).item().unwrap()
    };
    let ls: Vec<f64> = [0.0, 0.02, 0.05, 0.1].iter().map(|&e| loss_at(e)).collect();
    assert!(ls.windows(2).all(|w| w[1] > w[0]), "{ls:?}");
}

#[test]
fn adaptive_loss_with_singleton_defense_equals_plain_loss() {
    let m = cnn(8);
    let plain = Defense::new(&m, DefenseConfig::none()).unwrap();
    let single = Defense::new(&m, DefenseConfig::sr(0, "block1")).unwrap();
    let x = image(9, 0.0, 1.0);
    let eval = |obj: &dyn Objective| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let l = obj.loss(&mut g, &[v]).unwrap();
        (g.value(l).item().unwrap(), g.backward(l).unwrap().wrt(v).unwrap().clone())
    };
    let a = eval(&ClassifierLoss::cross_entropy(&plain, vec![2]));
    let b = eval(&make_adaptive(ClassifierLoss::cross_entropy(&plain, vec![2]), &single));
    assert_eq!(a, b);
}

#[test]
fn batch_attack_is_independent_of_batch_composition() {
    let m = cnn(10);
    let d = Defense::new(&m, DefenseConfig::none()).unwrap();
    let x = Tensor::cat_batch(&[image(1, 0.0, 1.0), image(2, 0.0, 1.0), image(3, 0.0, 1.0)]).unwrap();
    let cfg = AttackConfig {
        random_start: true,
        seed: 4,
        ..AttackConfig::pgd(0.03, 3)
    };
    let all = attack_classifier(&d, &x, &[0, 1, 2], &cfg).unwrap();
    let first = attack_classifier(&d, &x.narrow_batch(0, 2).unwrap(), &[0, 1], &cfg).unwrap();
    assert_eq!(all.narrow_batch(0, 2).unwrap(), first);
}

fn attack_config() -> impl Strategy<Value = AttackConfig> {
    (0usize..3, 0.0f64..0.3, 1usize..4, proptest::option::of(0.0f64..0.2), any::<bool>(), any::<u64>(), 0.0f64..2.0)
        .prop_map(|(k, eps, steps, alpha, random_start, seed, kappa)| {
            let kind = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::CwMargin][k];
            AttackConfig {
                alpha,
                random_start,
                seed,
                kappa,
                ..AttackConfig::new(kind, eps, if kind == AttackKind::Fgsm { 1 } else { steps })
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adversarial_examples_respect_budget_and_range(cfg in attack_config(), seed in 0u64..100) {
        let m = cnn(11);
        let d = Defense::new(&m, DefenseConfig::none()).unwrap();
        let x = image(seed, 0.0, 1.0);
        let obj = ClassifierLoss::for_attack(&d, vec![seed as usize % 3], &cfg);
        let adv = run_attack(&obj, std::slice::from_ref(&x), &cfg).unwrap();
        let a = &adv[0];
        prop_assert!(a.x_adv.linf_distance(&x).unwrap() <= cfg.epsilon + 1e-12);
        prop_assert!(a.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.achieved_linf, a.x_adv.linf_distance(&x).unwrap());
    }
}

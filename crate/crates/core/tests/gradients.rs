use ndarray::{arr2, Array2};
use subkg_core::gradcheck::{self, format_reports, grad_check, quadratic_case, run_suite, Corrupted, DEFAULT_EPS, DEFAULT_TOL};
use subkg_core::nn::{embed_lookup, embed_lookup_backward, Linear, Parameter};

#[test]
fn suite_passes_more_seeds() {
    for seed in [2, 3] {
        let reports = run_suite(seed, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert_eq!(reports.len(), 14);
        assert!(reports.iter().all(|r| r.passed()), "seed {seed}\n{}", format_reports(&reports));
        for r in &reports {
            for p in &r.params {
                assert!(p.checked > 0, "{} {}", r.case, p.name);
            }
        }
    }
}

#[test]
fn checker_catches_a_wrong_gradient() {
    let cases = gradcheck::suite(4).unwrap();
    let (name, case) = cases.into_iter().find(|(n, _)| n == "composite_l1").unwrap();
    let mut bad = Corrupted { inner: case, param: "relations".into() };
    let r = grad_check(&name, &mut bad, DEFAULT_EPS, DEFAULT_TOL).unwrap();
    assert_eq!(r.failures(), ["relations"]);
}

#[test]
fn quadratic_gradient() {
    let mut q = quadratic_case(&[1.0, 2.0]);
    let r = grad_check("quadratic", &mut q, DEFAULT_EPS, 1e-6).unwrap();
    assert!(r.passed());
    assert!(r.max_rel_err() < 1e-6);
}

#[test]
fn linear_backward_closed_form() {
    let w = Parameter::new("w", arr2(&[[1.0, -1.0], [0.5, 2.0], [0.0, 3.0]]));
    let b = Parameter::new("b", arr2(&[[0.1, -0.2]]));
    let mut layer = Linear::from_parts(w, b).unwrap();
    let x = arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]);
    let y = layer.forward(x.view()).unwrap();
    assert_eq!(y, arr2(&[[2.1, 11.8], [-0.9, 3.8]]));
    let dy = arr2(&[[1.0, 0.0], [2.0, -1.0]]);
    let dx = layer.backward(x.view(), dy.view());
    assert_eq!(layer.weight.grad, x.t().dot(&dy));
    assert_eq!(layer.bias.grad, arr2(&[[3.0, -1.0]]));
    assert_eq!(dx, dy.dot(&layer.weight.value.t()));
}

#[test]
fn duplicate_ids_accumulate() {
    let mut table = Parameter::new("t", Array2::<f64>::zeros((3, 2)));
    let ids = [0, 0];
    let y = embed_lookup(&table, &ids, &[true, true]).unwrap();
    embed_lookup_backward(&mut table, &ids, &[true, true], Array2::ones(y.raw_dim()).view());
    assert_eq!(table.grad, arr2(&[[2.0, 2.0], [0.0, 0.0], [0.0, 0.0]]));
}

use medas_core::hpo::{Dimension, HpValue, SearchSpace, Strategy, Study, StudySettings};

fn float(v: &HpValue) -> f64 {
    match v {
        HpValue::Float(x) => *x,
        _ => unreachable!(),
    }
}

fn best_after(space: &SearchSpace, strategy: Strategy, seed: u64, n: usize, f: &dyn Fn(&[f64]) -> f64) -> (f64, Vec<f64>) {
    let mut s = Study::new(
        space.clone(),
        StudySettings {
            strategy,
            seed,
            ..Default::default()
        },
    );
    for _ in 0..n {
        let t = s.suggest().unwrap().clone();
        let x: Vec<f64> = t.x.iter().map(float).collect();
        s.tell(t.trial_id, f(&x)).unwrap();
    }
    let b = s.best().unwrap();
    (b.y.unwrap(), b.x.iter().map(float).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

#[test]
fn one_dimensional_quadratic() {
    let space = SearchSpace::new(vec![Dimension::continuous("x", 0.0, 1.0)]).unwrap();
    let f = |x: &[f64]| -(x[0] - 0.3).powi(2);
    let t = std::time::Instant::now();
    let hits = (0..20)
        .filter(|&seed| (best_after(&space, Strategy::Bayesian, seed, 30, &f).1[0] - 0.3).abs() <= 0.05)
        .count();
    eprintln!("1d hits {hits}/20 in {:?}", t.elapsed());
    assert!(hits >= 18);
}

#[test]
fn two_dimensional_quadratic_beats_random() {
    let space = SearchSpace::new(vec![Dimension::continuous("x", 0.0, 1.0), Dimension::continuous("y", 0.0, 1.0)])
        .unwrap();
    let f = |x: &[f64]| -((x[0] - 0.25).powi(2) + (x[1] - 0.75).powi(2));
    let t = std::time::Instant::now();
    let bayes: Vec<(f64, Vec<f64>)> = (0..20).map(|s| best_after(&space, Strategy::Bayesian, s, 40, &f)).collect();
    let random: Vec<f64> = (0..20).map(|s| best_after(&space, Strategy::Random, s, 40, &f).0).collect();
    let linf = median(bayes.iter().map(|(_, x)| (x[0] - 0.25).abs().max((x[1] - 0.75).abs())).collect());
    let mb = median(bayes.iter().map(|b| b.0).collect());
    let mr = median(random);
    eprintln!("2d linf {linf} bayes {mb} random {mr} in {:?}", t.elapsed());
    assert!(linf <= 0.1);
    assert!(mb > mr);
}

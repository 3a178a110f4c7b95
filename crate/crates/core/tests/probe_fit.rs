use memprobe::eval::auc;
use memprobe::lm::ActivationVector;
use memprobe::probe::{score, train_probe};
use memprobe::{Label, ProbeHyper};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blobs(per_class: usize, seed: u64) -> Vec<(ActivationVector, Label)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut out = Vec::new();
    for (centre, label) in [((2.0, 2.0), Label::Member), ((-2.0, -2.0), Label::NonMember)] {
        for i in 0..per_class {
            let values = vec![centre.0 + noise.sample(&mut r), centre.1 + noise.sample(&mut r)];
            out.push((ActivationVector { values, layer: 1, source_sample_id: format!("{label:?}{i}") }, label));
        }
    }
    out
}

fn separable(data: &[(ActivationVector, Label)]) -> bool {
    data.iter().all(|(x, l)| (x.values[0] + x.values[1] > 0.0) == l.is_member())
}

#[test]
fn separable_blobs_are_fit_perfectly() {
    let data = blobs(100, 1);
    assert!(separable(&data));
    let p = train_probe(&data, &ProbeHyper::default()).unwrap();
    let scores: Vec<f64> = data.iter().map(|(x, _)| score(&p, x).unwrap()).collect();
    let correct = data.iter().zip(&scores).filter(|((_, l), s)| (**s >= 0.5) == l.is_member()).count();
    assert_eq!(correct, data.len());
    let (m, n): (Vec<_>, Vec<_>) = data.iter().zip(&scores).partition(|((_, l), _)| l.is_member());
    let m: Vec<f64> = m.into_iter().map(|(_, s)| *s).collect();
    let n: Vec<f64> = n.into_iter().map(|(_, s)| *s).collect();
    assert_eq!(auc(&m, &n).unwrap(), 1.0);
}

#[test]
fn strictly_convex_objective_has_unique_minimiser() {
    let data = blobs(100, 2);
    let base = ProbeHyper { lambda: 0.05, tol: 1e-7, ..Default::default() };
    let a = train_probe(&data, &ProbeHyper { init_seed: None, ..base.clone() }).unwrap();
    let b = train_probe(&data, &ProbeHyper { init_seed: Some(99), init_scale: 3.0, ..base }).unwrap();
    assert!(a.converged && b.converged);
    let mut wa = a.w.clone();
    wa.push(a.bias);
    let mut wb = b.w.clone();
    wb.push(b.bias);
    let diff: f64 = wa.iter().zip(&wb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = wa.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-3, "relative distance {}", diff / norm);
}

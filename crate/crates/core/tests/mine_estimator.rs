use micfer::mine::{
    dv_objective, estimate_mi_batch, estimate_mi_converged, gaussian_mi, gaussian_pairs,
    marginal_pairing, MineConfig, StatisticsNet,
};
use micfer::tensor::{finite_diff_check, Binding, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn constant_net(c: f64, d_e: usize, d_i: usize) -> StatisticsNet {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = StatisticsNet::new(&mut rng, d_e, d_i, 16);
    let w = net.params.find("stat.fc3.w").unwrap();
    let b = net.params.find("stat.fc3.b").unwrap();
    net.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    net.params.get_mut(b).data_mut()[0] = c;
    net
}

#[test]
fn closed_form_gaussian_oracle_agrees_with_histogram_plug_in() {
    // Independent check of -½ln(1-ρ²) via a 2-d histogram plug-in on
    // a large sample; binning bias keeps it within a few hundredths.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (rho, want) in [(0.5, 0.143841), (0.9, 0.830366)] {
        assert!((gaussian_mi(rho, 1) - want).abs() < 1e-5);
        let (x, y) = gaussian_pairs(&mut rng, 400_000, 1, rho);
        let bins = 40usize;
        let edge = |v: f64| (((v + 4.0) / 8.0 * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        let mut joint = vec![0.0; bins * bins];
        let (mut px, mut py) = (vec![0.0; bins], vec![0.0; bins]);
        let n = x.len() as f64;
        for (a, b) in x.data().iter().zip(y.data()) {
            let (i, j) = (edge(*a), edge(*b));
            joint[i * bins + j] += 1.0 / n;
            px[i] += 1.0 / n;
            py[j] += 1.0 / n;
        }
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let p = joint[i * bins + j];
                if p > 0.0 {
                    mi += p * (p / (px[i] * py[j])).ln();
                }
            }
        }
        assert!((mi - want).abs() < 0.03, "rho {rho}: histogram {mi} vs {want}");
    }
}

#[test]
fn constant_statistics_are_zero_for_any_batch_and_pairing() {
    let net = constant_net(1.75, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (x, _) = gaussian_pairs(&mut rng, 12, 3, 0.0);
        let (y, _) = gaussian_pairs(&mut rng, 12, 2, 0.0);
        let pi = marginal_pairing(12, &mut rng).unwrap();
        assert_eq!(estimate_mi_batch(&x, &y, &pi, &net).unwrap().value, 0.0);
    }
}

#[test]
fn estimate_decomposes_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = StatisticsNet::new(&mut rng, 2, 2, 32);
    let (x, y) = gaussian_pairs(&mut rng, 64, 2, 0.7);
    let pi = marginal_pairing(64, &mut rng).unwrap();
    let e = estimate_mi_batch(&x, &y, &pi, &net).unwrap();
    assert!((e.value - (e.joint_term - e.marginal_log_term)).abs() <= 1e-12);
    assert_eq!(e.n, 64);
}

#[test]
fn fixed_point_fraction_matches_uniform_permutations() {
    // Expected fixed points of a uniform permutation is exactly 1.
    let n = 1024;
    let seeds = 10_000;
    let mut total = 0usize;
    for seed in 0..seeds {
        let pi = marginal_pairing(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        total += pi.iter().enumerate().filter(|(i, p)| i == *p).count();
    }
    let mean = total as f64 / seeds as f64;
    // Poisson(1) standard error over 10^4 draws is 0.01.
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn dv_gradient_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = StatisticsNet::new(&mut rng, 2, 3, 6);
    let (x, _) = gaussian_pairs(&mut rng, 5, 2, 0.0);
    let (y, _) = gaussian_pairs(&mut rng, 5, 3, 0.0);
    let pi = marginal_pairing(5, &mut rng).unwrap();
    let params: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    let err = finite_diff_check(
        |g: &mut Graph, vars: &[Var]| {
            let bound = Binding::from_vars(vars.to_vec());
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            Ok(dv_objective(g, &net, &bound, xv, yv, &pi, None)?.objective)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn reordering_rows_and_conjugating_pairing_is_invariant(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = StatisticsNet::new(&mut rng, 2, 2, 16);
        let (x, y) = gaussian_pairs(&mut rng, n, 2, 0.6);
        let pi = marginal_pairing(n, &mut rng).unwrap();
        let sigma = marginal_pairing(n, &mut rng).unwrap();
        // Row i of the reordered batch is row sigma[i] of the original.
        let take = |t: &Tensor| {
            let w = t.shape()[1];
            let data: Vec<f64> = sigma.iter().flat_map(|&s| t.row(s).to_vec()).collect();
            Tensor::from_vec(vec![n, w], data).unwrap()
        };
        let mut inv = vec![0; n];
        for (i, &s) in sigma.iter().enumerate() {
            inv[s] = i;
        }
        let pi2: Vec<usize> = (0..n).map(|i| inv[pi[sigma[i]]]).collect();
        let a = estimate_mi_batch(&x, &y, &pi, &net).unwrap();
        let b = estimate_mi_batch(&take(&x), &take(&y), &pi2, &net).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-9);
    }
}

fn bench(rho: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MineConfig::default();
    estimate_mi_converged(|r| gaussian_pairs(r, 512, 1, rho), 1, 1, &cfg, &mut rng)
        .unwrap()
        .raw
}

#[test]
fn independent_gaussians_converge_to_zero() {
    let v = bench(0.0, 1);
    assert!(v.abs() <= 0.05, "{v}");
}

#[test]
fn correlated_gaussians_converge_near_truth() {
    let v = bench(0.9, 1);
    assert!((0.70..=0.93).contains(&v), "{v}");
}

#[test]
fn copied_embeddings_saturate_at_log_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MineConfig {
        steps: 400,
        ..MineConfig::default()
    };
    let n = 64;
    let res = estimate_mi_converged(
        |r| {
            let (x, _) = gaussian_pairs(r, n, 2, 0.0);
            (x.clone(), x)
        },
        2,
        2,
        &cfg,
        &mut rng,
    )
    .unwrap();
    let ceiling = (n as f64).ln();
    assert!(res.reported <= ceiling);
    assert!(res.raw > 2.0, "{}", res.raw);
    let first = res.trace[..40].iter().map(|e| e.value).sum::<f64>() / 40.0;
    assert!(res.raw > first);
}

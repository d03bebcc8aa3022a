use she_core::noise::{sample_noise, NoiseGrid, RngSeed};
use she_core::stats::{correlation, ks_one_sample, mean, sample_variance, standard_normal_cdf};

// 1e5 increments at dt = dx = 0.01
fn big_grid(master: u64) -> NoiseGrid {
    sample_noise(RngSeed::new(master, 0), 0.01, 500, 200).unwrap()
}

#[test]
fn same_seed_is_bit_identical() {
    let a = sample_noise(RngSeed::new(42, 7), 1e-3, 50, 64).unwrap();
    let b = sample_noise(RngSeed::new(42, 7), 1e-3, 50, 64).unwrap();
    assert_eq!(a.increments(), b.increments());
    let c = sample_noise(RngSeed::new(42, 8), 1e-3, 50, 64).unwrap();
    assert_ne!(a.increments(), c.increments());
}

#[test]
fn entry_variance_is_dt_dx() {
    let g = big_grid(1);
    assert_eq!(g.increments().len(), 100_000);
    assert_eq!(g.dx(), 0.01);
    let x = g.increments();
    let var = sample_variance(x).unwrap();
    // var of a sample variance of Gaussians is 2 sigma^4 / (n - 1)
    let se = 1e-4 * (2.0 / (x.len() as f64 - 1.0)).sqrt();
    assert!((var - 1e-4).abs() < 3.0 * se, "{var} vs 1e-4 (se {se})");
    let m = mean(x);
    assert!(m.abs() < 3.0 * (1e-4 / x.len() as f64).sqrt(), "{m}");
}

#[test]
fn neighbouring_cells_are_uncorrelated() {
    let g = big_grid(2);
    let x = g.increments();
    let n = x.len() - 1;
    let r = correlation(&x[..n], &x[1..]).unwrap();
    assert!(r.abs() < 3.0 / (n as f64).sqrt(), "space neighbours: {r}");
    let row = g.n_space();
    let m = x.len() - row;
    let r = correlation(&x[..m], &x[row..]).unwrap();
    assert!(r.abs() < 3.0 / (m as f64).sqrt(), "time neighbours: {r}");
    let a = sample_noise(RngSeed::new(2, 1), 0.01, 500, 200).unwrap();
    let r = correlation(x, a.increments()).unwrap();
    assert!(r.abs() < 3.0 / (x.len() as f64).sqrt(), "streams: {r}");
}

#[test]
fn standardized_entries_pass_ks() {
    let g = big_grid(3);
    let scale = (g.dt() * g.dx()).sqrt();
    let z: Vec<f64> = g.increments().iter().map(|v| v / scale).collect();
    let ks = ks_one_sample(&z, standard_normal_cdf).unwrap();
    assert!(ks.passes(1e-3), "p = {}", ks.p_value);
}

#[test]
fn total_increment_has_variance_two_t() {
    // W([0, T] x torus) ~ N(0, 2T); T = 0.5 here
    let sums: Vec<f64> = (0..4000)
        .map(|i| {
            let g = sample_noise(RngSeed::new(4, i), 0.01, 50, 16).unwrap();
            g.increments().iter().sum()
        })
        .collect();
    let var = sample_variance(&sums).unwrap();
    let se = 1.0 * (2.0 / (sums.len() as f64 - 1.0)).sqrt();
    assert!((var - 1.0).abs() < 3.0 * se, "{var}");
}

#[test]
fn aggregation_preserves_the_sheet_measure() {
    let g = sample_noise(RngSeed::new(5, 0), 1e-3, 40, 32).unwrap();
    let coarse = g.aggregate(2, 4).unwrap();
    assert_eq!((coarse.n_time(), coarse.n_space()), (20, 8));
    assert!((coarse.dt() - 2e-3).abs() < 1e-15);
    let a: f64 = g.increments().iter().sum();
    let b: f64 = coarse.increments().iter().sum();
    assert!((a - b).abs() < 1e-12);
    let parent = coarse.row(3)[5];
    let children: f64 = (6..8).flat_map(|l| g.row(l)[20..24].to_vec()).sum();
    assert!((parent - children).abs() < 1e-14);
}

#[test]
fn binary_dump_round_trips() {
    let g = sample_noise(RngSeed::new(6, 2), 5e-4, 7, 16).unwrap();
    let mut buf = Vec::new();
    g.write_binary(&mut buf).unwrap();
    assert_eq!(NoiseGrid::read_binary(buf.as_slice()).unwrap(), g);
    assert!(NoiseGrid::read_binary(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn shape_errors() {
    assert!(sample_noise(RngSeed::new(0, 0), 0.0, 5, 8).is_err());
    assert!(NoiseGrid::from_increments(0.1, 2, 3, vec![0.0; 5]).is_err());
    assert!(NoiseGrid::zeros(0.1, 2, 0).is_err());
}

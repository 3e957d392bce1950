use aaams::baselines::{run_standard_ms, run_variable_ms, StandardMsConfig, VariableMsConfig};
use aaams::imaging::{image_to_features, load_rgb};
use aaams::dataset::{build_index, compute_density};
use aaams::postprocess::{postprocess, postprocess_labels, PostprocessConfig};
use aaams::synth::{random_mixture, sample, Component, Mixture, RandomMixture};
use aaams::{metrics, run, KernelProfile, PointStore, RunConfig};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

fn blobs(seed: u64) -> PointStore {
    let centers = [[0.0, 0.0], [10.0, 10.0]];
    let comp = |c: [f64; 2]| Component { mean: c.to_vec(), covariance: vec![0.01, 0.0, 0.0, 0.01], weight: 1.0 };
    let mix = Mixture { components: centers.iter().map(|&c| comp(c)).collect() };
    let (data, _) = sample(&mix, 40, seed).unwrap();
    PointStore::new(data, 2).unwrap()
}

fn sample_mean(store: &PointStore, members: &[usize]) -> [f64; 2] {
    let mut m = [0.0; 2];
    for &i in members {
        m[0] += store.point(i)[0] / members.len() as f64;
        m[1] += store.point(i)[1] / members.len() as f64;
    }
    m
}

// Fragments that reach the mode with a near-zero shift cannot pass the bearing
// test any more, so a blob may end up as several clusters sharing one mode.
#[test]
fn tight_blobs_converge_to_their_means() {
    let sigma = 1.0;
    let mut exact = 0;
    for seed in 0..20 {
        let store = blobs(seed);
        let cfg = RunConfig::single(sigma, sigma);
        let res = run(&store, &cfg).unwrap();
        assert!(!res.max_iterations_reached);
        let blob_of = |i: usize| usize::from(store.point(i)[0] > 5.0);
        let members: Vec<Vec<usize>> = (0..2).map(|b| (0..40).filter(|&i| blob_of(i) == b).collect()).collect();
        for c in &res.clusters {
            let b = blob_of(c.members[0]);
            assert!(c.members.iter().all(|&i| blob_of(i) == b), "cluster spans both blobs");
            let mean = sample_mean(&store, &members[b]);
            let err = ((c.mode[0] - mean[0]).powi(2) + (c.mode[1] - mean[1]).powi(2)).sqrt();
            assert!(err < 0.1 * sigma, "seed {seed}: mode {:?} off by {err}", c.mode);
        }
        exact += (res.clusters.len() == 2) as usize;
        let p = postprocess(&store, &res, &PostprocessConfig::new(cfg.xi_values())).unwrap();
        assert_eq!(p.len(), 2, "seed {seed}");
    }
    assert!(exact >= 1);
}

#[test]
fn singleton_input() {
    let store = PointStore::new(vec![1.0, 2.0], 2).unwrap();
    let res = run(&store, &RunConfig::single(1.0, 1.0)).unwrap();
    assert_eq!(res.labels, vec![0]);
    assert_eq!(res.clusters[0].mode, vec![1.0, 2.0]);
}

#[test]
fn baselines_find_the_blobs() {
    let store = blobs(7);
    let ms = run_standard_ms(&store, &StandardMsConfig::new(vec![1.0])).unwrap();
    assert_eq!(ms.len(), 2);
    let vms = run_variable_ms(&store, &VariableMsConfig::default()).unwrap();
    assert_eq!(vms.len(), 2);
    assert_eq!(metrics::ari(&ms.labels, &vms.labels).unwrap(), 1.0);
}

#[test]
fn mixture_with_default_neighbors() {
    let m = random_mixture(&RandomMixture::default(), 3).unwrap();
    let (data, truth) = sample(&m, 600, 4).unwrap();
    let store = PointStore::new(data, 2).unwrap();
    let cfg = RunConfig::single(0.3, 0.3);
    let res = run(&store, &cfg).unwrap();
    let p = postprocess(&store, &res, &PostprocessConfig::new(cfg.xi_values())).unwrap();
    assert!(metrics::ari(&p.labels, &truth).unwrap() > 0.8);
}

#[test]
fn image_run_postprocesses_to_few_segments() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/scene2.ppm");
    let store = image_to_features(&load_rgb(&path).unwrap()).unwrap();
    let cfg = RunConfig::joint_squared(15.0, 16.0, 1.0, 81.0);
    let res = run(&store, &cfg).unwrap();
    assert!(res.alive_at(12) * 10 < store.len());
    let p = postprocess(&store, &res, &PostprocessConfig::for_image(cfg.xi_values())).unwrap();
    assert!(p.len() <= 10, "{} segments", p.len());
    assert!(p.sizes.iter().all(|&s| s >= 10));
}

fn kde_ascent(start: &[f64], data: &[f64], sigma: f64) -> [f64; 2] {
    let mut x = [start[0], start[1]];
    for _ in 0..100_000 {
        let (mut nx, mut ny, mut w) = (0.0, 0.0, 0.0);
        for p in data.chunks(2) {
            let k = (-((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)) / (2.0 * sigma * sigma)).exp();
            nx += k * p[0];
            ny += k * p[1];
            w += k;
        }
        let step = ((nx / w - x[0]).powi(2) + (ny / w - x[1]).powi(2)).sqrt();
        x = [nx / w, ny / w];
        if step < 1e-12 {
            break;
        }
    }
    x
}

#[test]
fn standard_ms_modes_match_kde_ascent() {
    let store = blobs(11);
    let mut cfg = StandardMsConfig::new(vec![1.0]);
    cfg.delta = 1e-6;
    let p = run_standard_ms(&store, &cfg).unwrap();
    assert_eq!(p.len(), 2);
    for m in &p.modes {
        let want = kde_ascent(m, store.data(), 1.0);
        assert!((m[0] - want[0]).abs() < 1e-3 && (m[1] - want[1]).abs() < 1e-3, "{m:?} vs {want:?}");
    }
}

fn weighted_cov(store: &PointStore, members: &[usize], rho: &[f64], xi: f64) -> DMatrix<f64> {
    let w: f64 = members.iter().map(|&i| rho[i]).sum();
    let mut eta = DVector::zeros(2);
    for &i in members {
        eta += DVector::from_column_slice(store.point(i)) * (rho[i] / w);
    }
    let mut c = DMatrix::identity(2, 2) * xi;
    for &i in members {
        let d = DVector::from_column_slice(store.point(i)) - &eta;
        c += &d * d.transpose() * (rho[i] / w);
    }
    c
}

fn divergence(mu_a: &[f64], a: &DMatrix<f64>, mu_b: &[f64], b: &DMatrix<f64>) -> f64 {
    let s = (a + b) * 0.5;
    let d = DVector::from_column_slice(mu_a) - DVector::from_column_slice(mu_b);
    let maha = (d.transpose() * s.clone().try_inverse().unwrap() * &d)[(0, 0)];
    maha / 8.0 + 0.5 * (s.determinant() / (a.determinant() * b.determinant()).sqrt()).ln()
}

#[test]
fn overlapping_blobs_merge_and_far_blob_stays() {
    let comp = |x: f64, sd: f64| Component { mean: vec![x, 0.0], covariance: vec![sd * sd, 0.0, 0.0, sd * sd], weight: 1.0 };
    let mix = Mixture { components: vec![comp(0.0, 0.5), comp(0.6, 0.5), comp(20.0, 0.5)] };
    let (data, truth) = sample(&mix, 90, 5).unwrap();
    let store = PointStore::new(data, 2).unwrap();
    let sigma = [0.5];
    let density = compute_density(&store, &sigma, &build_index(&store), &KernelProfile::gaussian()).unwrap();
    let rho = density.values();
    let xi = 1e-4 * 0.25;
    let groups: Vec<Vec<usize>> = (0..3).map(|k| (0..90).filter(|&i| truth[i] == k).collect()).collect();
    // each group's mode is its densest member
    let modes: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let best = *g.iter().max_by(|&&a, &&b| rho[a].total_cmp(&rho[b]).then(b.cmp(&a))).unwrap();
            store.point(best).to_vec()
        })
        .collect();
    let covs: Vec<DMatrix<f64>> = groups.iter().map(|g| weighted_cov(&store, g, rho, xi)).collect();
    let d = |a: usize, b: usize| divergence(&modes[a], &covs[a], &modes[b], &covs[b]);
    assert!(d(0, 1) < 1.0, "{}", d(0, 1));
    assert!(d(0, 2) > 1.0 && d(1, 2) > 1.0);

    let cfg = PostprocessConfig::new(vec![xi]);
    let p = postprocess_labels(&store, &truth, |k| modes[k].clone(), &density, &cfg).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p.labels[groups[0][0]], p.labels[groups[1][0]]);
    assert_ne!(p.labels[groups[0][0]], p.labels[groups[2][0]]);
    assert_eq!(p.sizes.iter().copied().max(), Some(60));
}

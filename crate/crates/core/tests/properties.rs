use nalgebra::Matrix3;
use pare_core::extremes::{fit_gpd, gpd_loglik, return_level, FitOptions, Gpd, GpdParams, DAYS_PER_YEAR};
use pare_core::geometry::{
    block_distance_matrix, extended_hausdorff, inverse_distance_weights, jitter_symmetrize,
    region_distance_matrix, Point, Polygon, Region, RegionSet,
};
use pare_core::simulation::{make_grid, SYNTHETIC_REGIONS_GEOJSON};
use proptest::prelude::*;
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rect(id: &str, x: f64, y: f64, w: f64, h: f64) -> Region {
    Region::new(id, vec![Polygon::rectangle(Point::new(x, y), Point::new(x + w, y + h))])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hausdorff_is_symmetric_and_grows_with_fraction(
        (x, y, w, h) in (-20.0..20.0f64, -20.0..20.0f64, 0.5..6.0f64, 0.5..6.0f64),
        (w2, h2) in (0.5..6.0f64, 0.5..6.0f64),
    ) {
        let a = rect("a", 0.0, 0.0, w2, h2);
        let b = rect("b", x, y, w, h);
        let pitch = 0.5;
        let mut prev = 0.0;
        for f in [0.1, 0.5, 0.9, 1.0] {
            let ab = extended_hausdorff(&a, &b, f, pitch).unwrap();
            let ba = extended_hausdorff(&b, &a, f, pitch).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= prev);
            prev = ab;
        }
    }

    #[test]
    fn return_level_grows_with_period(
        scale in 50.0..500.0f64,
        shape in 0.0..0.8f64,
        rate in 0.01..0.2f64,
    ) {
        let p = GpdParams { threshold: 254.0, scale, shape, rate };
        let cov = Matrix3::zeros();
        let mut prev = f64::NEG_INFINITY;
        for n in 2..=500 {
            let l = return_level(&p, &cov, n as f64, DAYS_PER_YEAR).unwrap().level;
            prop_assert!(l > prev);
            prev = l;
        }
    }
}

#[test]
fn weights_from_synthetic_regions_are_well_formed() {
    let regions = RegionSet::from_planar_geojson(SYNTHETIC_REGIONS_GEOJSON).unwrap();
    let d = region_distance_matrix(&regions, 0.5, 0.5).unwrap();
    assert!(d.is_symmetric());
    assert!(d.min_off_diagonal().unwrap() > 1.0);

    let stations = make_grid(&regions, 6.0).unwrap();
    let block = block_distance_matrix(&d, &stations, 1.0).unwrap();
    let a = stations.assignment();
    for i in 0..stations.len() {
        for j in 0..stations.len() {
            let want = if a[i] == a[j] { 1.0 } else { d.entries[(a[i], a[j])] };
            assert_eq!(block.entries[(i, j)], want);
        }
    }

    let jittered = jitter_symmetrize(&block, 0.1, 7).unwrap();
    assert!(jittered.is_symmetric());
    let w = inverse_distance_weights(&jittered).unwrap();
    // jittered within-region distances stay well above half a mile
    assert!(w.entries.iter().all(|&v| v > 0.0 && v < 2.0));
    for i in 0..stations.len() {
        let same = (0..stations.len()).filter(|&j| a[j] == a[i]).map(|j| w.entries[(i, j)]);
        let other = (0..stations.len()).filter(|&j| a[j] != a[i]).map(|j| w.entries[(i, j)]);
        let min_same = same.fold(f64::INFINITY, f64::min);
        let max_other = other.fold(0.0, f64::max);
        assert!(min_same > max_other);
    }
}

#[test]
fn gpd_fit_beats_random_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = Gpd::new(233.64, 0.2044);
    let values: Vec<f64> = (0..795).map(|_| 254.0 + truth.sample(&mut rng)).collect();
    let fit = fit_gpd(&values, 254.0, 14_610, &FitOptions::default()).unwrap();
    let excesses: Vec<f64> = values.iter().map(|v| v - 254.0).collect();
    let best = gpd_loglik(&excesses, fit.scale, fit.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        use rand::Rng;
        let s = rng.gen_range(100.0..400.0);
        let x = rng.gen_range(-0.4..0.9);
        assert!(gpd_loglik(&excesses, s, x) <= best + 1e-9);
    }
}

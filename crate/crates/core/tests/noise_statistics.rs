use fsaf_core::affordance_net::{forward_noise, NoiseSchedule};
use fsaf_core::tensorkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn forward_noise_has_the_scheduled_moments() {
    let schedule = NoiseSchedule::default();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = Tensor::<f64>::filled(&[n], 0.7).unwrap();
    for t in [1, 250, 999] {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::new(vec![n], eps).unwrap();
        let zt = forward_noise(&z0, t, &eps, &schedule).unwrap();
        let ab = schedule.alpha_bar(t).unwrap();
        let mean = zt.sum() / n as f64;
        let var = zt.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // five standard errors
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 5.0 * se_mean + 1e-12, "t={t}");
        let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - (1.0 - ab)).abs() < 5.0 * se_var, "t={t}: {var} vs {}", 1.0 - ab);
    }
}

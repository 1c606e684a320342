//! Small end-to-end run of the public API: simulate a pair of flows, check
//! the stability bound, and relate the rescaled and plain costs.

use fpklab::analysis::{
    mismatch_integral, rescale_flow, verify_bound_paired, RescaleMap, VerifyOptions,
};
use fpklab::cost::CostFunction;
use fpklab::dynamics::{check_dissipativity, DiffusionSpec, DissipativityCheck, DriftSpec};
use fpklab::fpk::{solve_linear_paired, Scheme, SdeConfig};
use fpklab::measures::ParticleCloud;
use fpklab::rng::{domain, stream_id, NormalStream};
use fpklab::transport::kantorovich;

fn gaussian_cloud(n: usize, mean: f64, seed: u64) -> ParticleCloud {
    let mut rng = NormalStream::new(seed, stream_id(domain::INIT, 0));
    let pts: Vec<f64> = (0..n).map(|_| mean + rng.next()).collect();
    ParticleCloud::uniform(1, pts).unwrap()
}

#[test]
fn paired_run_bound_and_rescaling_agree() {
    let q = DiffusionSpec::isotropic(1, 1.0).unwrap();
    // drift dissipative at lambda = -0.5 (and anything above)
    let b_mu = DriftSpec::linear(vec![-1.0], vec![0.0], -0.5).unwrap();
    let b_sigma = DriftSpec::linear(vec![-1.0], vec![0.15], -0.5).unwrap();
    let lambda = b_mu.lambda();

    let certificate = check_dissipativity(&b_mu, None, lambda, &DissipativityCheck::default())
        .unwrap();
    assert!(certificate.passes());

    let init = gaussian_cloud(400, 0.0, 99);
    let cfg = SdeConfig::new(100, Scheme::ExplicitEm, 400, 7)
        .unwrap()
        .with_store_stride(20)
        .unwrap();
    let flows = solve_linear_paired(&q, &b_mu, &b_sigma, &init, &init, 1.0, &cfg).unwrap();

    let h = CostFunction::capped_power(2.0).unwrap();
    let report = verify_bound_paired(
        &h,
        &flows,
        &b_mu,
        &b_sigma,
        &q,
        lambda,
        &VerifyOptions::default(),
    )
    .unwrap();
    assert!(report.passes(), "min margin {}", report.min_margin());

    // the mismatch integral for a constant drift gap is exactly |c|^2 t / nu
    let mismatch = mismatch_integral(&flows.sigma, &b_mu, &b_sigma, q.ellipticity()).unwrap();
    for (t, i) in flows.sigma.times().iter().zip(&mismatch) {
        assert!((i - 0.0225 * t).abs() < 1e-12);
    }

    // rescaling the flows reproduces the rescaled-cost values measured on
    // the original slices
    let map = RescaleMap::new(lambda).unwrap();
    let rmu = rescale_flow(&map, &flows.mu).unwrap();
    let rsigma = rescale_flow(&map, &flows.sigma).unwrap();
    let k = flows.mu.len() - 1;
    let t = flows.mu.times()[k];
    let (plain, _, _) = kantorovich(
        &h.rescaled(lambda * t).unwrap(),
        flows.mu.slice(k),
        flows.sigma.slice(k),
    )
    .unwrap();
    let (scaled, _, _) = kantorovich(&h, rmu.slice(k), rsigma.slice(k)).unwrap();
    assert!((plain - scaled).abs() < 1e-9, "{plain} vs {scaled}");
}

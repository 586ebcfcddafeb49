use hnpe::flows::flow::{ConditionalFlow, FlowConfig};
use hnpe::seeded_rng;
use proptest::prelude::*;
use rand::Rng as _;

fn configs() -> [FlowConfig; 2] {
    let small = |mut c: FlowConfig| {
        c.n_layers = 3;
        c.hidden_units = 16;
        c
    };
    [small(FlowConfig::maf()), small(FlowConfig::linear_spline())]
}

fn perturbed(cfg: FlowConfig, dim: usize, context_dim: usize, scale: f64, seed: u64) -> ConditionalFlow {
    let mut rng = seeded_rng(seed);
    let mut flow = ConditionalFlow::new(dim, context_dim, cfg, &mut rng).unwrap();
    for p in &mut flow.params {
        *p += scale * (rng.random::<f64>() - 0.5);
    }
    flow
}

#[test]
fn identity_flow_density_at_origin() {
    for cfg in configs() {
        let flow = ConditionalFlow::identity(2, 3, cfg, &mut seeded_rng(1)).unwrap();
        let lp = flow.log_prob(&[0.0, 0.0], &[0.2, -1.0, 4.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12, "{lp}");
    }
}

#[test]
fn perturbed_two_dimensional_flows_are_normalized() {
    let (lo, hi, n) = (-9.0, 9.0, 1200);
    let h = (hi - lo) / n as f64;
    for cfg in configs() {
        let flow = perturbed(cfg.clone(), 2, 1, 0.6, 11);
        for ctx in [[-1.0], [0.7]] {
            let mut mass = 0.0;
            for i in 0..=n {
                for j in 0..=n {
                    let x = [lo + i as f64 * h, lo + j as f64 * h];
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 } * if j == 0 || j == n { 0.5 } else { 1.0 };
                    mass += w * flow.log_prob(&x, &ctx).unwrap().exp();
                }
            }
            mass *= h * h;
            assert!(
                (mass - 1.0).abs() < 5e-3,
                "{:?} context {ctx:?}: mass {mass}",
                cfg.transform
            );
        }
    }
}

#[test]
fn samples_match_density_moments() {
    for cfg in configs() {
        let flow = perturbed(cfg, 1, 1, 0.6, 5);
        let ctx = [0.3];
        let draws = flow.sample(20_000, &ctx, &mut seeded_rng(9)).unwrap();
        let mean_mc = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
        let (lo, hi, n) = (-12.0, 12.0, 24_000);
        let h = (hi - lo) / n as f64;
        let mean_q: f64 = (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                x * flow.log_prob(&[x], &ctx).unwrap().exp() * h
            })
            .sum();
        assert!((mean_mc - mean_q).abs() < 0.03, "{mean_mc} vs {mean_q}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_recovers_target(
        seed in 0u64..1000,
        x in prop::collection::vec(-4.0f64..4.0, 3),
        ctx in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        for cfg in configs() {
            let flow = perturbed(cfg, 3, 2, 0.6, seed);
            let (z, ld) = flow.forward(&x, &ctx).unwrap();
            let (back, ild) = flow.inverse(&z, &ctx).unwrap();
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            prop_assert!((ld + ild).abs() < 1e-8);
        }
    }

    #[test]
    fn log_prob_is_base_density_plus_log_det(
        seed in 0u64..1000,
        x in prop::collection::vec(-4.0f64..4.0, 2),
    ) {
        for cfg in configs() {
            let flow = perturbed(cfg, 2, 1, 0.6, seed);
            let (z, ld) = flow.forward(&x, &[0.5]).unwrap();
            let base = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - (2.0 * std::f64::consts::PI).ln();
            prop_assert!((flow.log_prob(&x, &[0.5]).unwrap() - (base + ld)).abs() < 1e-10);
        }
    }
}

mod common;

use common::random_scenario;
use diffnet::engine::simulate;
use diffnet::node::inm_fixed;
use diffnet::{Scenario, Tape, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn turning_rows(ni: usize, nj: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01..1.0f64, nj), ni).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let t: f64 = r.iter().sum();
                r.into_iter().map(|x| x / t).collect()
            })
            .collect()
    })
}

fn node_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..4, 1usize..4).prop_flat_map(|(ni, nj)| {
        (
            prop::collection::vec(0.0..2.0f64, ni),
            prop::collection::vec(0.0..2.0f64, nj),
            turning_rows(ni, nj),
            prop::collection::vec(0.1..5.0f64, ni),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn node_flows_respect_bounds((d, s, b, a) in node_case()) {
        let c = |v: &[f64]| -> Vec<Var> { v.iter().map(|&x| Var::constant(x)).collect() };
        let bv: Vec<Vec<Var>> = b.iter().map(|r| c(r)).collect();
        let mut tape = Tape::new();
        let got = inm_fixed(&mut tape, &c(&d), &c(&s), &bv, &c(&a));
        let qi: Vec<f64> = got.inflow.iter().map(Var::value).collect();
        let qo: Vec<f64> = got.outflow.iter().map(Var::value).collect();
        for l in 0..d.len() {
            prop_assert!(qi[l] >= -1e-12 && qi[l] <= d[l] + 1e-9);
        }
        for o in 0..s.len() {
            prop_assert!(qo[o] >= -1e-12 && qo[o] <= s[o] + 1e-9);
            let routed: f64 = (0..d.len()).map(|l| qi[l] * b[l][o]).sum();
            prop_assert!((routed - qo[o]).abs() < 1e-9);
        }
        // Invariance: every inlink is either served in full or blocked by a
        // full outlink it uses.
        for l in 0..d.len() {
            let blocked = (0..s.len()).any(|o| (qo[o] - s[o]).abs() < 1e-9);
            prop_assert!((qi[l] - d[l]).abs() < 1e-9 || blocked);
        }
    }

    #[test]
    fn random_networks_conserve_and_stay_ordered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = Scenario::from_toml_str(&random_scenario(&mut rng)).unwrap();
        let res = simulate(&sc).unwrap();
        prop_assert!(res.conservation_error <= 1e-6);
        prop_assert!(res.destination_error <= 1e-6);
        for l in 0..sc.links.len() {
            let up = &res.up[l].values;
            let down = &res.down[l].values;
            for t in 1..up.len() {
                prop_assert!(up[t].value() >= up[t - 1].value() - 1e-12);
                prop_assert!(down[t].value() >= down[t - 1].value() - 1e-12);
                prop_assert!(down[t].value() <= up[t].value() + 1e-9);
            }
        }
    }
}

mod common;

use common::{arb_events, arb_params, arb_state, close, OracleNeuron};
use corticarc_core::model::{advance_to, decay_state, integrate_input_queue, NeuronState};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn closed_form_matches_numerical_integration(
        (p, s, events) in arb_params().prop_flat_map(|p| (Just(p), arb_state(p), arb_events()))
    ) {
        let mut spikes = Vec::new();
        let got = integrate_input_queue(&s, &p, &events, &mut spikes);
        let mut oracle = OracleNeuron::from_state(&s);
        let want_spikes = oracle.run(&p, &events);
        prop_assert_eq!(&spikes, &want_spikes);
        prop_assert!(close(got.v, oracle.v, 1e-8), "v {} vs {}", got.v, oracle.v);
        prop_assert!(close(got.c, oracle.c, 1e-8), "c {} vs {}", got.c, oracle.c);
        prop_assert_eq!(got.refractory_until, oracle.refractory_until);
        prop_assert!(got.c >= 0.0);
    }

    #[test]
    fn free_decay_over_five_ms_matches_oracle(
        (p, s) in arb_params().prop_flat_map(|p| (Just(p), arb_state(p)))
    ) {
        let s = NeuronState { refractory_until: 0.0, ..s };
        let got = decay_state(&s, &p, 5.0);
        let mut oracle = OracleNeuron::from_state(&s);
        oracle.advance(&p, 5.0);
        prop_assert!(close(got.v, oracle.v, 1e-8), "v {} vs {}", got.v, oracle.v);
        prop_assert!(close(got.c, oracle.c, 1e-8));
    }

    #[test]
    fn splitting_an_interval_does_not_change_the_result(
        (p, s) in arb_params().prop_flat_map(|p| (Just(p), arb_state(p))),
        a in 0.0f64..20.0,
        b in 0.0f64..20.0,
    ) {
        let whole = advance_to(&s, &p, a + b);
        let split = advance_to(&advance_to(&s, &p, a), &p, a + b);
        prop_assert!(close(whole.v, split.v, 1e-10));
        prop_assert!(close(whole.c, split.c, 1e-10));
    }
}

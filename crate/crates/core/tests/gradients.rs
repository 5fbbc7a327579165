use cdg_core::net::InitScheme;
use cdg_core::{Activation, HeadKind, NetSpec, Params};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `sum(out * up)`, whose gradient is `backward(up)`.
fn probe(spec: &NetSpec, p: &Params, x: &Array2<f64>, up: &Array2<f64>) -> f64 {
    let out = spec.forward(p, x.view()).unwrap().output;
    (&out * up).sum()
}

fn spec_strategy() -> impl Strategy<Value = NetSpec> {
    (
        1usize..5,
        prop::collection::vec(1usize..7, 0..3),
        prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)],
        1usize..4,
        prop_oneof![Just(HeadKind::Scalar), (2usize..8).prop_map(|n_atoms| HeadKind::Categorical { n_atoms })],
    )
        .prop_map(|(input_dim, hidden, activation, heads, head_kind)| NetSpec {
            input_dim,
            hidden,
            activation,
            heads,
            head_kind,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(spec in spec_strategy(), seed in any::<u64>(), batch in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.init(InitScheme::FanIn, &mut rng);
        // nonzero biases so relu kinks are not hit at exactly zero
        let mut params = Params(params.0.iter().map(|w| w + rng.random_range(-0.1..0.1)).collect());
        let x = Array2::from_shape_fn((batch, spec.input_dim), |_| rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((batch, spec.output_dim()), |_| rng.random_range(-1.0..1.0));
        let g = spec.gradient(&params, x.view(), up.view()).unwrap();
        prop_assert_eq!(g.len(), params.len());

        let h = 1e-6;
        let mut bad = 0;
        for i in 0..params.len() {
            let w = params.0[i];
            params.0[i] = w + h;
            let fp = probe(&spec, &params, &x, &up);
            params.0[i] = w - h;
            let fm = probe(&spec, &params, &x, &up);
            params.0[i] = w;
            let fd = (fp - fm) / (2.0 * h);
            if (fd - g[i]).abs() > 1e-5 * (1.0 + fd.abs().max(g[i].abs())) {
                bad += 1;
            }
        }
        // a relu kink can sit inside the difference interval
        prop_assert!(bad * 100 <= params.len(), "{bad} of {} coordinates disagree", params.len());
    }
}

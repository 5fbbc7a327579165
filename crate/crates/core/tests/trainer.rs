use cdg_core::data::State;
use cdg_core::env::nstep_aggregate;
use cdg_core::replay::AnnealSchedule;
use cdg_core::trainer::{cdg_sample_loss, cg_sample_loss, HeadAggregation, LossSpec, ModelKind};
use cdg_core::{RewardKind, SupportGrid, TrainConfig, Trainer, Transition};
use ndarray::Array2;

const P: [[f64; 2]; 2] = [[0.7, 0.3], [0.4, 0.6]];
const R: [f64; 2] = [1.0, -0.5];

fn one_hot(s: usize) -> Vec<f64> {
    let mut f = vec![0.0; 2];
    f[s] = 1.0;
    f
}

fn state(t: usize, s: usize, worths: Vec<f64>) -> State {
    State {
        t,
        features: one_hot(s),
        worth_snapshot: worths,
    }
}

fn transition(s: usize, s_next: usize, rewards: Vec<f64>, n_gammas: usize, n: usize) -> Transition {
    let n_tasks = rewards.len() / n_gammas;
    Transition {
        s: state(0, s, vec![1.0; n_tasks]),
        rewards,
        n_gammas,
        s_next: state(n, s_next, vec![1.0; n_tasks]),
        n,
        terminal: false,
    }
}

/// Every one-step transition of the two-state chain, scaled to small rewards.
fn chain_transitions(gammas: &[f64]) -> Vec<Transition> {
    let mut out = Vec::new();
    for s in 0..2 {
        for s2 in 0..2 {
            out.push(transition(s, s2, vec![0.01 * R[s]; gammas.len()], gammas.len(), 1));
        }
    }
    out
}

fn config(model: ModelKind, lr: f64) -> TrainConfig {
    let gammas = vec![0.5, 0.9];
    TrainConfig {
        model,
        grids: vec![SupportGrid::new(-0.2, 0.2, 21).unwrap(); 2],
        n_atoms: 21,
        gammas,
        batch_size: 256,
        buffer_capacity: 256,
        lr,
        lr_end: lr,
        tau: 0.5,
        hidden: vec![8],
        anneal: AnnealSchedule::constant(0.0, 1.0),
        min_buffer_fill: 0,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn trainer_with_chain(cfg: TrainConfig) -> (Trainer, Vec<Transition>) {
    let unique = chain_transitions(&cfg.gammas);
    let mut t = Trainer::new(cfg, 2, 1).unwrap();
    for k in 0..t.cfg.buffer_capacity {
        t.push(unique[k % unique.len()].clone()).unwrap();
    }
    (t, unique)
}

/// Mean loss over `items` for the online parameters against a fixed target.
fn dataset_loss(t: &Trainer, target: &cdg_core::Params, items: &[Transition]) -> f64 {
    let spec = LossSpec {
        gammas: &t.cfg.gammas,
        grids: &t.cfg.grids,
        reward_kind: t.cfg.reward_kind,
        n_steps: t.cfg.n_steps,
        aggregation: t.cfg.head_aggregation,
    };
    let stack = |f: &dyn Fn(&Transition) -> Vec<f64>| {
        Array2::from_shape_vec((items.len(), 2), items.iter().flat_map(f).collect()).unwrap()
    };
    let x = stack(&|tr| tr.s.features.clone());
    let xn = stack(&|tr| tr.s_next.features.clone());
    let online = t.spec.forward(&t.params, x.view()).unwrap();
    let next = t.spec.forward(target, xn.view()).unwrap();
    let mut total = 0.0;
    for (b, tr) in items.iter().enumerate() {
        let (o, n) = (online.output.row(b).to_vec(), next.output.row(b).to_vec());
        total += match t.cfg.model {
            ModelKind::Cdg => cdg_sample_loss(&o, &n, tr, &spec),
            ModelKind::Cg => cg_sample_loss(&o, &n, tr, &spec),
        }
        .unwrap()
        .total;
    }
    total / items.len() as f64
}

#[test]
fn one_step_lowers_the_loss() {
    for model in [ModelKind::Cg, ModelKind::Cdg] {
        let (mut t, unique) = trainer_with_chain(config(model, 1e-4));
        let target = t.target.params.clone();
        let before = dataset_loss(&t, &target, &unique);
        t.learn_step().unwrap();
        let after = dataset_loss(&t, &target, &unique);
        assert!(after < before, "{model:?}: {before} -> {after}");
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    for model in [ModelKind::Cg, ModelKind::Cdg] {
        let (mut t, _) = trainer_with_chain(config(model, 0.0));
        let (p0, q0) = (t.params.clone(), t.target.params.clone());
        for _ in 0..5 {
            let r = t.learn_step().unwrap();
            assert!(r.grad_norm > 0.0);
        }
        assert_eq!(t.params, p0);
        assert_eq!(t.target.params, q0);
        assert_eq!(t.step, 5);
    }
}

#[test]
fn head_order_does_not_change_the_loss() {
    // two tasks, two discounts; swapping the tasks permutes heads
    let gammas = [0.5, 0.9];
    let grids = vec![SupportGrid::new(-1.0, 1.0, 11).unwrap(); 2];
    let spec = LossSpec {
        gammas: &gammas,
        grids: &grids,
        reward_kind: RewardKind::LogReturn,
        n_steps: 1,
        aggregation: HeadAggregation::Mean,
    };
    let rewards = vec![0.1, 0.2, -0.3, 0.05];
    let tr = transition(0, 1, rewards.clone(), 2, 1);
    let swapped = transition(0, 1, [&rewards[2..], &rewards[..2]].concat(), 2, 1);
    let swap = |v: &[f64], w: usize| [&v[2 * w..], &v[..2 * w]].concat();

    let online = [0.3, -0.1, 0.7, 0.2];
    let next = [0.1, 0.4, -0.2, 0.0];
    let a = cg_sample_loss(&online, &next, &tr, &spec).unwrap();
    let b = cg_sample_loss(&swap(&online, 1), &swap(&next, 1), &swapped, &spec).unwrap();
    assert_eq!(a.total, b.total);
    assert_eq!(swap(&a.per_head, 1), b.per_head);
    assert_eq!(swap(&a.upstream, 1), b.upstream);

    let dist = |k: usize| {
        let mut p: Vec<f64> = (0..11).map(|i| 1.0 + ((i * 7 + k * 3) % 5) as f64).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    };
    let online: Vec<f64> = (0..4).flat_map(dist).collect();
    let next: Vec<f64> = (4..8).flat_map(dist).collect();
    let a = cdg_sample_loss(&online, &next, &tr, &spec).unwrap();
    let b = cdg_sample_loss(&swap(&online, 11), &swap(&next, 11), &swapped, &spec).unwrap();
    assert!((a.total - b.total).abs() < 1e-15);
    assert_eq!(swap(&a.per_head, 1), b.per_head);
}

/// Exact values of the chain: `(I - gamma P) V = R`.
fn chain_values(g: f64) -> [f64; 2] {
    let (a, b, c, d) = (1.0 - g * P[0][0], -g * P[0][1], -g * P[1][0], 1.0 - g * P[1][1]);
    let det = a * d - b * c;
    [(d * R[0] - b * R[1]) / det, (a * R[1] - c * R[0]) / det]
}

/// Probability-weighted TD error at the true values over every n-step path from `s0`.
fn expected_td(g: f64, n: usize, s0: usize, loss_steps: usize) -> f64 {
    let v = chain_values(g);
    let gammas = [g];
    let spec = LossSpec {
        gammas: &gammas,
        grids: &[],
        reward_kind: RewardKind::LogReturn,
        n_steps: loss_steps,
        aggregation: HeadAggregation::Mean,
    };
    let mut acc = 0.0;
    for path in 0..1usize << n {
        let mut states = vec![s0];
        let mut prob = 1.0;
        for k in 0..n {
            let next = (path >> k) & 1;
            prob *= P[*states.last().unwrap()][next];
            states.push(next);
        }
        let rewards: Vec<f64> = states[..n].iter().map(|&s| R[s]).collect();
        let tr = transition(s0, states[n], vec![nstep_aggregate(&rewards, g)], 1, n);
        let out = cg_sample_loss(&[v[s0]], &[v[states[n]]], &tr, &spec).unwrap();
        // one head, so upstream = 2 * td_error
        acc += prob * out.upstream[0] / 2.0;
    }
    acc
}

#[test]
fn n_step_targets_share_the_fixed_point() {
    for g in [0.5, 0.9] {
        for n in 1..=4 {
            for s0 in 0..2 {
                let e = expected_td(g, n, s0, n);
                assert!(e.abs() < 1e-12, "gamma {g}, n {n}, s {s0}: {e}");
            }
        }
        // a one-step bootstrap on two-step rewards is biased
        assert!(expected_td(g, 2, 0, 1).abs() > 1e-3);
    }
}

#[test]
fn head_count_mismatch_is_rejected() {
    let mut t = Trainer::new(config(ModelKind::Cg, 1e-3), 2, 1).unwrap();
    let bad = transition(0, 1, vec![0.0; 4], 2, 1);
    assert!(matches!(
        t.push(bad),
        Err(cdg_core::trainer::TrainError::HeadCountMismatch { expected: 2, got: 4 })
    ));
}

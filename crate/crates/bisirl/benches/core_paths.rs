use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bisirl::envs::{benchmark_game, random_game};
use bisirl::game::{sample_trajectory, JointPolicy};
use bisirl::hypergrad::{
    analytical_hypergradient, estimate_hypergradient, SpsaConfig, UpperObjective, UpperProblem,
};
use bisirl::mc;
use bisirl::reward::{Reward, RewardModel};

/// Batched rollouts through the library path (rayon pool when the
/// `parallel` feature is on) against an explicit sequential loop over the
/// single-trajectory sampler.
fn bench_rollout_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let game = random_game(8, 2, 2, 10, 0.95, &mut rng);
    let policy = JointPolicy::uniform(&game);
    let n = 20_000;

    let mut group = c.benchmark_group("rollout_batch");
    group.bench_function("batched", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            mc::rollout_batch(&game, &policy, n, &mut rng)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..n)
                .map(|_| sample_trajectory(&game, &policy, &mut rng))
                .collect::<Vec<_>>()
        })
    });
    group.finish();
}

/// SPSA draw averaging inside one hypergradient estimate; the draws fan out
/// over the pool when `parallel` is enabled.
fn bench_hypergradient(c: &mut Criterion) {
    let built = benchmark_game();
    let theta_l = built.true_theta_l.theta().clone();
    let theta_e = built.true_theta_e.theta().clone();
    let problem = UpperProblem {
        game: &built.game,
        model_l: &built.model_l,
        model_e: &built.model_e,
        lambda: 0.5,
        objective: UpperObjective::EstimatedReward,
    };
    let learner = built
        .game
        .initial_dist
        .len(); // silence unused warnings on tiny games
    let _ = learner;
    let policy = JointPolicy::uniform(&built.game);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let demos = bisirl::game::sample_interaction(
        &built.game,
        &policy.learner_marginal(),
        &policy.expert_marginal(),
        16,
        &mut rng,
    )
    .unwrap();

    let mut group = c.benchmark_group("hypergradient");
    for n_avg in [16usize, 64] {
        let config = SpsaConfig {
            p: 1e-3,
            n_avg,
            ..SpsaConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("spsa", n_avg), &config, |b, config| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                estimate_hypergradient(&problem, &theta_l, &theta_e, &demos, config, &mut rng)
                    .unwrap()
            })
        });
    }
    group.bench_function("analytical", |b| {
        b.iter(|| analytical_hypergradient(&problem, &theta_l, &theta_e, &demos).unwrap())
    });
    group.finish();
}

/// Horizon scaling of the two hypergradient paths on a 6-state game: the
/// analytical path grows quadratically, the SPSA path linearly.
fn bench_horizon_scaling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = random_game(6, 3, 3, 4, 0.95, &mut rng);
    let model = RewardModel::tabular_for(&base);
    let theta = bisirl::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();

    let mut group = c.benchmark_group("horizon_scaling");
    for h in [4usize, 16] {
        let game = bisirl::game::MarkovGame::new(
            base.transition.clone(),
            h,
            base.discount,
            base.initial_dist.clone(),
        )
        .unwrap();
        let policy = JointPolicy::uniform(&game);
        let mut demo_rng = ChaCha8Rng::seed_from_u64(5);
        let demos = bisirl::game::sample_interaction(
            &game,
            &policy.learner_marginal(),
            &policy.expert_marginal(),
            8,
            &mut demo_rng,
        )
        .unwrap();
        let problem = UpperProblem {
            game: &game,
            model_l: &model,
            model_e: &model,
            lambda: 0.5,
            objective: UpperObjective::EstimatedReward,
        };
        group.bench_with_input(BenchmarkId::new("analytical", h), &h, |b, _| {
            b.iter(|| analytical_hypergradient(&problem, &theta, &theta, &demos).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("spsa", h), &h, |b, _| {
            let config = SpsaConfig {
                p: 1e-3,
                n_avg: 8,
                ..SpsaConfig::default()
            };
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                estimate_hypergradient(&problem, &theta, &theta, &demos, &config, &mut rng)
                    .unwrap()
            })
        });
        let r = Reward::new(&model, &theta);
        let _ = r.value(0, 0, 0);
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_rollout_batch,
    bench_hypergradient,
    bench_horizon_scaling
);
criterion_main!(benches);

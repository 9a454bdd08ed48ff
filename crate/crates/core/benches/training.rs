use criterion::{criterion_group, criterion_main, Criterion};
use metactl::ddpg::AgentConfig;
use metactl::env::{make_task_set, train_tasks, Experiment, StateVariant};
use metactl::meta::{meta_train, EmbeddingMode, EncoderConfig, EnvConfig, MetaController, MetaHyperparams};
use metactl::{exec, rng};

fn meta_training(c: &mut Criterion) {
    let tasks = train_tasks(&make_task_set(Experiment::FirstOrderDynamics));
    let hp = MetaHyperparams {
        train_episodes: 1,
        train_steps_per_episode: 20,
        batch_size: 64,
        ..MetaHyperparams::default()
    };
    let env = EnvConfig::default();
    let mode = if exec::is_parallel() { "parallel" } else { "sequential" };
    let mut group = c.benchmark_group("meta_train");
    group.sample_size(10);
    group.bench_function(format!("{mode}/{}-tasks", tasks.len()), |b| {
        b.iter(|| {
            let mut ctrl = MetaController::new(
                StateVariant::MetaBase,
                AgentConfig::new(6, 3),
                Some(EncoderConfig::new(EmbeddingMode::Deterministic)),
                &mut rng::stream(0, &[rng::tag::INIT]),
            )
            .unwrap();
            meta_train(&mut ctrl, &tasks, &hp, &env, 0).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, meta_training);
criterion_main!(benches);

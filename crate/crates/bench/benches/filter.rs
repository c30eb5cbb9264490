use criterion::{black_box, criterion_group, criterion_main, Criterion};

use pushid::active::{info_gain, sample_affordances};
use pushid::dualfilter::{initial_belief, step, Observation};
use pushid::geometry::rectangle;
use pushid::nets::Models;
use pushid::pushsim::{ObjectSpec, ParameterRanges, PushSim};
use pushid::training::{collect_push, prior_block, window_init, window_loss, PushProtocol, TrainConfig};
use pushid::{ObjectParams, Pose2D};

fn setup() -> (ObjectSpec, TrainConfig, Models) {
    let shape = rectangle("box", 0.1, 0.06);
    let spec = ObjectSpec { shape, params: ObjectParams { m: 0.9, mu: 0.4, com_x: 0.005, com_y: -0.01, i_z: 1.2e-3 } };
    let cfg = TrainConfig { c: 24, protocol: PushProtocol { t_h: 3.0, ..Default::default() }, ..Default::default() };
    (spec, cfg, Models::new(0))
}

fn benches(c: &mut Criterion) {
    let (spec, cfg, models) = setup();
    let fcfg = cfg.filter_config(&spec.shape);
    let prior = prior_block(&ParameterRanges::table_one());
    let push = collect_push(&spec, &models, &fcfg, &cfg.strategy_config(0), &cfg.protocol, &prior, 1, 0).unwrap();
    let traj = push.trajectory;
    let belief = window_init(&traj, 0, &cfg.protocol, &prior);

    c.bench_function("filter_step_c24", |b| {
        let obs = Observation::new(traj.steps[1].z_v, &traj.steps[0].tactile);
        b.iter(|| step(&models, &fcfg, black_box(&belief), &traj.steps[0].action, &obs, &spec.shape, 3, 1).unwrap())
    });

    c.bench_function("window_loss_grad_len8", |b| {
        b.iter(|| window_loss(&models, &traj, &spec.shape, 0, 8, black_box(&belief), &cfg, 3, true).unwrap())
    });

    let pose = Pose2D::new(0.0, 0.0, 0.0);
    let set = sample_affordances(&spec.shape, &pose, 4, cfg.protocol.v, 2).unwrap();
    let b0 = initial_belief(&[0.0; 3], &cfg.protocol.vision_var(), &prior.0, &prior.1);
    let n = cfg.strategy_config(0).n;
    c.bench_function("info_gain_one_candidate", |b| {
        b.iter(|| info_gain(black_box(&b0), &set.candidates[0], &spec.shape, &models, &fcfg, n, 5, false).unwrap())
    });

    let sim = PushSim::new(cfg.protocol.sim);
    c.bench_function("rollout_15s", |b| {
        b.iter(|| sim.rollout(&spec.shape, &spec.params, &pose, &set.candidates[0], 15.0, 0.1, &cfg.protocol.noise, 9).unwrap())
    });
}

criterion_group! {
    name = filter;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(filter);

//! Shared fixtures for the benchmarks.

use modalcompose::envs::{TAC, VIS};
use modalcompose::rng::seeded;
use modalcompose::{
    generate_dataset, make_schedule, train_expert, Dataset, EnvSpec, ExpertConfig, ModalityExpert,
    NoiseSchedule, TrainConfig,
};

/// Dataset, default-sized expert config and the default schedule.
pub fn fixture() -> (Dataset, ExpertConfig, NoiseSchedule) {
    let ds =
        generate_dataset(&EnvSpec::occluded_reach(), 10, 1, 0).expect("scripted demonstrations");
    let sched = make_schedule(50, 1e-4, 0.02).expect("valid schedule");
    (ds, ExpertConfig::default(), sched)
}

/// Untrained vision and tactile experts on the fixture dataset.
pub fn experts(ds: &Dataset, cfg: &ExpertConfig, sched: &NoiseSchedule) -> Vec<ModalityExpert> {
    let init = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    [VIS, TAC]
        .iter()
        .enumerate()
        .map(|(i, m)| {
            train_expert(ds, m, cfg, &init, sched, &mut seeded(i as u64)).expect("expert init")
        })
        .collect()
}

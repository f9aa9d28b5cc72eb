//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use fedvb_core::fed::{select_clients, FederationConfig, GlobalState};
use fedvb_core::net::NetworkSpec;
use fedvb_core::stream::{build_round_plan, class_incremental_tasks, make_synthetic_blobs, RoundPlan, TaskData};
use fedvb_core::{Label, StreamSchedule};

/// A BNN-phase state one round before `plan` runs, on a 10-class blob task.
pub fn bnn_round(clients: usize, hidden: usize) -> (GlobalState, RoundPlan, FederationConfig) {
    let config = FederationConfig {
        num_clients: clients,
        snn_rounds: 0,
        total_rounds: 2,
        local_epochs: 1,
        minibatch_size: 8,
        ..FederationConfig::default()
    };
    let blobs = make_synthetic_blobs(10, 20, 100, 0.5, 1).expect("blob parameters are valid");
    let spec = class_incremental_tasks(&(0..10).collect::<Vec<_>>(), 1).expect("one task").remove(0);
    let classes: BTreeSet<Label> = spec.classes.iter().copied().collect();
    let task = TaskData::partitioned(
        spec,
        blobs.train.filter_classes(&classes),
        blobs.test.filter_classes(&classes),
        clients,
        0.5,
        2,
    )
    .expect("partition");
    let schedule = StreamSchedule::separate(&[2]).expect("schedule");
    let state = GlobalState::initial(NetworkSpec::mlp(20, &[hidden]).expect("spec"), &config, 3).expect("state");
    let selected = select_clients(1, clients, 1.0, 4);
    let plan = build_round_plan(&schedule, &[task], 1, &selected, 0, 5).expect("plan");
    (state, plan, config)
}

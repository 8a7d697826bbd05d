//! Shared fixtures for the criterion benchmarks.

use koopman_ioc_core::harness::{dataset, demonstration, ExperimentConfig};
use koopman_ioc_core::koopman::{build_matrices, DataMatrices};
use koopman_ioc_core::observables::mlp_observable;
use koopman_ioc_core::{GoalFeatures, Mlp, MlpConfig, Pendulum, Segment, Trajectory};

/// Default pendulum problem with its demonstration, segments and an
/// untrained network of the given hidden width.
pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub sys: Pendulum,
    pub feat: GoalFeatures,
    pub demo: Trajectory,
    pub segments: Vec<Segment>,
    pub net: Mlp,
}

impl Fixture {
    pub fn new(hidden: usize) -> Self {
        let cfg = ExperimentConfig::default();
        let demo = demonstration(&cfg).expect("default demonstration solves").trajectory;
        let segments = dataset(&cfg, &demo).expect("default windows fit");
        let net = mlp_observable(&MlpConfig {
            hidden: vec![hidden],
            ..cfg.observable.clone()
        })
        .expect("valid network");
        Self {
            sys: cfg.system().expect("valid pendulum"),
            feat: cfg.features(),
            cfg,
            demo,
            segments,
            net,
        }
    }

    pub fn matrices(&self) -> Vec<DataMatrices> {
        self.segments
            .iter()
            .map(|s| build_matrices(s, &self.net).expect("segment lifts"))
            .collect()
    }
}

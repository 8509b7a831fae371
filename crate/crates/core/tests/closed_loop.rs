use lpvmpc::config::{ExperimentConfig, SchedulingSpec, SweepAxis, SweepSpec};
use lpvmpc::experiment::{self, VerifyOptions};
use lpvmpc::mpc::Termination;
use lpvmpc::sdp::SdpStatus;
use rayon::prelude::*;

fn preset(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::angular_positioning();
    cfg.run.steps = steps;
    cfg
}

#[test]
fn feasible_start_stays_feasible_under_every_generator() {
    let generators = [
        SchedulingSpec::IntervalUniform,
        SchedulingSpec::IntervalSinusoid { period: 7.0 },
        SchedulingSpec::QmiBoundary,
    ];
    let cases: Vec<(SchedulingSpec, u64)> =
        generators.iter().flat_map(|g| (0..10).map(move |s| (g.clone(), s))).collect();
    let failures: Vec<String> = cases
        .par_iter()
        .filter_map(|(law, seed)| {
            let mut cfg = preset(100);
            cfg.run.scheduling = law.clone();
            let run = experiment::run_seed(&cfg, *seed).unwrap();
            let t = &run.trace;
            let ok = t.termination == Termination::Completed
                && t.records.len() == 100
                && t.records.iter().all(|r| r.status == SdpStatus::Optimal && r.input_slack >= -1e-9 && r.state_slack >= -1e-9);
            (!ok).then(|| format!("{law:?} seed {seed}: {}", t.termination))
        })
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn cost_grows_with_the_bound_on_fixed_data() {
    let base = preset(100);
    let costs: Vec<f64> = [0.4, 0.8, 1.2, 1.6, 2.0]
        .par_iter()
        .map(|&c| experiment::run_seed(&base.with_c(c).unwrap(), base.data.seed).unwrap().trace.accumulated_cost())
        .collect();
    for w in costs.windows(2) {
        assert!(w[1] >= w[0] * (1.0 - 1e-5), "{costs:?}");
    }
}

#[test]
fn gamma0_never_rises_with_longer_data() {
    let mut cfg = preset(1);
    cfg.sweep = Some(SweepSpec { axis: SweepAxis::T, values: vec![3.0, 5.0, 10.0, 20.0] });
    for base in 0..3 {
        cfg.data.seed = base;
        let gammas: Vec<f64> = experiment::run_sweep(&cfg, 4)
            .unwrap()
            .iter()
            .map(|(_, run)| run.trace.gamma0().unwrap_or(f64::INFINITY))
            .collect();
        // T = 3 can be infeasible for some data; the rest must be finite.
        assert!(gammas[1..].iter().all(|g| g.is_finite()), "base {base}: {gammas:?}");
        for w in gammas.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-5), "base {base}: {gammas:?}");
        }
    }
}

#[test]
fn written_bundles_pass_every_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset(30);
    cfg.run.seeds = vec![1, 2];
    experiment::run_experiment(&cfg, dir.path(), 2).unwrap();
    let opts = VerifyOptions { delta_samples: 200, rollouts: 20, horizon: 100, ..Default::default() };
    let summary = experiment::verify_bundle(&cfg, dir.path(), &opts).unwrap();
    let failed: Vec<String> = summary.reports.iter().filter(|r| !r.pass).map(|r| r.summary_line()).collect();
    assert!(summary.pass, "{failed:#?}");
    assert!(!summary.reports.is_empty());
}

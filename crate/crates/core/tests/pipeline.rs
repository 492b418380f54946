use kvprune::diagnostics::{layer_report, DiagnosticsConfig};
use kvprune::trace::{load_trace, save_trace};
use kvprune::{run_decode, DecodeSource, PolicyKind, PruneConfig, ReplaySource, SynthSource, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec {
        text_tokens: 20,
        visual_tokens: 20,
        layers: 2,
        heads: 2,
        head_dim: 8,
        steps: 11,
        obs_rows: 16,
        ..SynthSpec::default()
    }
}

fn cfg() -> PruneConfig {
    PruneConfig {
        budget: 24,
        recent: 4,
        obs_window: 16,
        ..PruneConfig::default()
    }
}

#[test]
fn saved_trace_replays_under_every_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.trace");
    let synth = SynthSource::new(&spec()).unwrap();
    save_trace(synth.trace(), &path).unwrap();
    let replay = ReplaySource::new(load_trace(&path).unwrap(), 7).unwrap();
    assert_eq!(replay.trace(), synth.trace());

    for policy in PolicyKind::ALL {
        let r = run_decode(&replay, policy, &cfg()).unwrap();
        assert_eq!(r.recon_error.len(), 11);
        assert!(r.recon_error.iter().all(|e| *e >= 0.0 && e.is_finite()));
        for e in &r.per_step {
            let pos = &e.decision.retained_positions;
            let newest = 39 + e.step;
            assert_eq!(*pos.last().unwrap(), newest);
            assert!(pos.len() <= 24 || !e.decision.triggered);
        }
        if policy == PolicyKind::FullCache {
            assert!(r.recon_error.iter().all(|e| *e == 0.0));
        } else {
            assert!(r.pruning_events().count() > 0);
            assert!(r.achieved_budget_fraction < 1.0);
        }
    }
}

#[test]
fn budget_past_the_end_never_prunes() {
    let s = spec();
    let src = SynthSource::new(&s).unwrap();
    let cfg = PruneConfig {
        budget: s.prefill_len() + s.steps,
        ..cfg()
    };
    let csp = run_decode(&src, PolicyKind::Csp, &cfg).unwrap();
    let full = run_decode(&src, PolicyKind::FullCache, &cfg).unwrap();
    assert_eq!(csp.per_step, full.per_step);
    assert_eq!(csp.recon_error, full.recon_error);
}

#[test]
fn one_layer_report_has_one_row() {
    let s = SynthSpec { layers: 1, ..spec() };
    let trace = SynthSource::new(&s).unwrap().trace().clone();
    let (report, curves) = layer_report(&trace, &DiagnosticsConfig::default()).unwrap();
    assert_eq!(report.per_layer.len(), 1);
    assert_eq!(curves.len(), 1);
    assert!((0.0..=std::f64::consts::LN_2).contains(&report.per_layer[0].js));
}

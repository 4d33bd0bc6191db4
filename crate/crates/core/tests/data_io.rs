mod common;

use common::*;
use mmnl_core::batch::{fit_batch, StopConfig};
use mmnl_core::data_io::{
    fit_from_json, fit_to_json, load_dataset, load_fit, read_dataset, save_dataset, save_fit, simulate_dataset,
    write_trace, EventCount, SimSpec,
};
use mmnl_core::local::BackendKind;
use mmnl_core::model::{self, ChoiceDataset, Hyperpriors};
use mmnl_core::Error;
use nalgebra::{DMatrix, DVector};

fn scratch_path(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mmnl-data-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn dataset_file_round_trip() {
    let mut spec = SimSpec::preset("desk", 8).unwrap();
    spec.n_agents = 40;
    spec.events = EventCount::Range { min: 0, max: 6 };
    let (data, truth) = simulate_dataset::<f64>(&spec).unwrap();
    assert_eq!(truth.betas.len(), 40);
    assert_eq!(truth.agent_ids, data.agents().iter().map(|a| a.id.clone()).collect::<Vec<_>>());
    let path = scratch_path("round_trip.csv");
    save_dataset(&data, &path).unwrap();
    let back: ChoiceDataset<f64> = load_dataset(&path).unwrap();
    // Agents with no events have no rows and cannot survive the long format.
    let kept: Vec<_> = data.agents().iter().filter(|a| !a.events.is_empty()).cloned().collect();
    assert_eq!(back.agents(), &kept[..]);
    let rows = std::fs::read_to_string(&path).unwrap().lines().count() - 1;
    assert_eq!(rows, data.n_events() * data.n_alternatives());
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let mut spec = SimSpec::preset("desk", 3).unwrap();
    spec.n_agents = 30;
    let (a, ta) = simulate_dataset::<f64>(&spec).unwrap();
    let (b, tb) = simulate_dataset::<f64>(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    spec.seed = 4;
    assert_ne!(simulate_dataset::<f64>(&spec).unwrap().0, a);
}

#[test]
fn malformed_rows_report_their_line() {
    let bad_number = "agent_id,event_id,alt_id,chosen,x1\na,0,0,1,0.5\na,0,1,0,abc\n";
    assert!(matches!(read_dataset::<f64, _>(bad_number.as_bytes()), Err(Error::Parse { line: 3, .. })));
    let two_chosen = "agent_id,event_id,alt_id,chosen,x1\na,0,0,1,0.5\na,0,1,1,0.1\n";
    assert!(read_dataset::<f64, _>(two_chosen.as_bytes()).is_err());
    let gap = "agent_id,event_id,alt_id,chosen,x1\na,0,0,1,0.5\na,0,2,0,0.1\n";
    assert!(read_dataset::<f64, _>(gap.as_bytes()).is_err());
    let header = "agent,event_id,alt_id,chosen,x1\na,0,0,1,0.5\n";
    assert!(matches!(read_dataset::<f64, _>(header.as_bytes()), Err(Error::Schema(_))));
    let short = "agent_id,event_id,alt_id,chosen,x1,x2\na,0,0,1,0.5\na,0,1,0,0.1,0.2\n";
    assert!(read_dataset::<f64, _>(short.as_bytes()).is_err());
}

#[test]
fn comment_preamble_is_skipped_and_counted() {
    let text = "# config: {\"seed\": 1}\n# second\nagent_id,event_id,alt_id,chosen,x1\na,0,0,1,0.5\na,0,1,0,abc\n";
    assert!(matches!(read_dataset::<f64, _>(text.as_bytes()), Err(Error::Parse { line: 5, .. })));
    let ok = "# note\nagent_id,event_id,alt_id,chosen,x1\na,0,0,1,0.5\na,0,1,0,0.1\n";
    assert_eq!(read_dataset::<f64, _>(ok.as_bytes()).unwrap().n_events(), 1);
    // Only the preamble is special: a later '#' agent id is data.
    let hash_id = "agent_id,event_id,alt_id,chosen,x1\n#a,0,0,1,0.5\n#a,0,1,0,0.1\n";
    assert_eq!(read_dataset::<f64, _>(hash_id.as_bytes()).unwrap().agents()[0].id, "#a");
}

#[test]
fn out_of_order_events_are_sorted_without_loss() {
    let text = "agent_id,event_id,alt_id,chosen,x1,x2\n\
                b,5,1,1,0.1,0.2\nb,5,0,0,0.3,0.4\n\
                b,1,0,1,0.5,0.6\nb,1,1,0,0.7,0.8\n\
                a,9,0,0,1.0,1.1\na,9,1,1,1.2,1.3\n";
    let d: ChoiceDataset<f64> = read_dataset(text.as_bytes()).unwrap();
    assert_eq!(d.n_agents(), 2);
    assert_eq!(d.n_events(), 3);
    let b = d.agents().iter().find(|a| a.id == "b").unwrap();
    assert_eq!(b.events[0].x, DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.7, 0.8]));
    assert_eq!(b.events[0].chosen, 0);
    // Alternatives are placed by alt_id, not by row order.
    assert_eq!(b.events[1].x, DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.1, 0.2]));
    assert_eq!(b.events[1].chosen, 1);
}

#[test]
fn degenerate_design_gives_uniform_choices() {
    let spec = SimSpec {
        n_agents: 400,
        n_alternatives: 4,
        n_covariates: 2,
        events: EventCount::Constant(25),
        zeta_true: DVector::zeros(2),
        omega_true: DMatrix::zeros(2, 2),
        covariate_sd: 0.5,
        seed: 12,
    };
    let (data, _) = simulate_dataset::<f64>(&spec).unwrap();
    let mut counts = [0usize; 4];
    for a in data.agents() {
        for e in &a.events {
            counts[e.chosen] += 1;
        }
    }
    let n = data.n_events() as f64;
    let se = (n * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - n / 4.0).abs() < 3.0 * se, "{counts:?}");
    }
}

#[test]
fn pooled_estimate_is_consistent_for_long_panels() {
    // With Ω = 0 every agent shares ζ, so the pooled logit MLE should sit near it.
    let spec = SimSpec {
        n_agents: 20,
        n_alternatives: 5,
        n_covariates: 3,
        events: EventCount::Constant(500),
        zeta_true: DVector::from_vec(vec![-1.0, 0.5, 1.5]),
        omega_true: DMatrix::zeros(3, 3),
        covariate_sd: 0.5,
        seed: 13,
    };
    let (data, truth) = simulate_dataset::<f64>(&spec).unwrap();
    assert!(truth.betas.iter().all(|b| b == &spec.zeta_true));
    let mut beta = DVector::zeros(3);
    for _ in 0..25 {
        let mut grad = DVector::zeros(3);
        let mut hess = DMatrix::zeros(3, 3);
        for a in data.agents() {
            for e in &a.events {
                let p = model::choice_probabilities(&e.x, &beta).unwrap();
                let xbar = e.x.transpose() * &p;
                grad += e.x.row(e.chosen).transpose() - &xbar;
                for j in 0..e.x.nrows() {
                    let d = e.x.row(j).transpose() - &xbar;
                    hess += &d * d.transpose() * p[j];
                }
            }
        }
        beta += hess.cholesky().unwrap().solve(&grad);
    }
    assert!((beta - &spec.zeta_true).amax() < 0.1);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SimSpec::preset("desk", 1).unwrap();
    spec.omega_true = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert!(simulate_dataset::<f64>(&spec).is_err());
    let mut spec = SimSpec::preset("desk", 1).unwrap();
    spec.zeta_true = DVector::zeros(2);
    assert!(simulate_dataset::<f64>(&spec).is_err());
    let mut spec = SimSpec::preset("desk", 1).unwrap();
    spec.events = EventCount::Range { min: 5, max: 2 };
    assert!(simulate_dataset::<f64>(&spec).is_err());
}

#[test]
fn fit_file_round_trip_and_version_check() {
    let data = small_sim(30, 2, 14);
    let fit = fit_batch(&data, &Hyperpriors::vague(2), BackendKind::slr_default(), &StopConfig::default(), 2).unwrap();
    let config = serde_json::json!({"seed": 2, "backend": "slr"});
    let path = scratch_path("fit.json");
    save_fit(&fit, config.clone(), &path).unwrap();
    let back = load_fit::<f64>(&path).unwrap();
    assert_eq!(back.fit, fit);
    assert_eq!(back.config, config);

    let text = fit_to_json(&fit, config).unwrap();
    let old = text.replacen("mmnl-fit/1", "mmnl-fit/0", 1);
    match fit_from_json::<f64>(&old) {
        Err(Error::Version { found, .. }) => assert_eq!(found, "mmnl-fit/0"),
        other => panic!("expected version error, got {other:?}"),
    }
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["fit"]["locals"][0]["sigma"]["data"][0] = serde_json::json!(-1.0);
    assert!(matches!(fit_from_json::<f64>(&value.to_string()), Err(Error::Schema(_))));
}

#[test]
fn matrices_are_written_row_major_with_dimensions() {
    let data = small_sim(10, 2, 15);
    let fit = fit_batch(&data, &Hyperpriors::vague(2), BackendKind::Laplace, &StopConfig::default(), 0).unwrap();
    let value: serde_json::Value = serde_json::from_str(&fit_to_json(&fit, serde_json::Value::Null).unwrap()).unwrap();
    let ups = &value["fit"]["global"]["upsilon"];
    assert_eq!(ups["rows"], 2);
    assert_eq!(ups["cols"], 2);
    let entries: Vec<f64> = ups["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let u = fit.global.upsilon();
    assert_eq!(entries, vec![u[(0, 0)], u[(0, 1)], u[(1, 0)], u[(1, 1)]]);
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let data = small_sim(20, 2, 16);
    let fit = fit_batch(&data, &Hyperpriors::vague(2), BackendKind::Ncvmp, &StopConfig::default(), 0).unwrap();
    let mut out = Vec::new();
    write_trace(&fit.trace, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), fit.trace.len() + 1);
    assert!(text.starts_with("iteration,phase,xi,min_ratio,batch_size,alpha,lower_bound,elapsed_secs"));
}

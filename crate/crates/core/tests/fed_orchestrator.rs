use teeslice::data::{gen_dataset, Dataset, SyntheticTask};
use teeslice::fed::{
    aggregate, compare, local_train_step, run, run_baseline, run_centralized, run_method1,
    run_method2, ExperimentConfig, LocalState, ModelObjective, RunOutput, SplitClient, SplitServer,
    TrainConfig, Update,
};
use teeslice::model::{Model, ParamSet, TransformerConfig};
use teeslice::partition::{build_plan, Channel, MaskConfig, Method};
use teeslice::tensor::{max_abs_diff, Precision, Rng};
use teeslice::Error;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        rounds: 3,
        model: TransformerConfig {
            n_layers: 3,
            ..TransformerConfig::default()
        },
        data: SyntheticTask {
            train_examples: 48,
            test_examples: 24,
            ..SyntheticTask::default()
        },
        ..ExperimentConfig::default()
    }
    .with_split(2)
}

trait WithSplit {
    fn with_split(self, split: usize) -> Self;
}

impl WithSplit for ExperimentConfig {
    fn with_split(mut self, split: usize) -> Self {
        self.tuning.split_layer = split;
        self
    }
}

fn data_for(cfg: &ExperimentConfig) -> Dataset {
    gen_dataset(&cfg.task(), cfg.seed).unwrap()
}

fn go(cfg: &ExperimentConfig, method: Method) -> RunOutput {
    let cfg = ExperimentConfig {
        method,
        ..cfg.clone()
    };
    run(&cfg, &data_for(&cfg)).unwrap()
}

fn max_param_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .map(|(k, t)| max_abs_diff(t, &b[k]))
        .fold(0.0, f64::max)
}

#[test]
fn method1_wire_carries_only_masked_payloads() {
    let out = go(&small(), Method::Method1);
    let a = &out.artifacts;
    assert_eq!(a.sent.len(), 3 * 3);
    assert!(a.wire_log.iter().all(|r| r.masked));
    for (i, msg) in a.sent.iter().enumerate() {
        assert!(msg.masked());
        let plain = &a.uploads[i / 3][i % 3].params;
        for (w, p) in msg.payload.iter().zip(plain.values()) {
            assert_ne!(&w.value, p);
        }
    }
    assert_eq!(out.report.audit_status, "pass");
    assert_eq!(out.report.audit.pads.reused, 0);
    assert!(out.report.base_unchanged);
}

#[test]
fn every_round_global_is_the_weighted_mean_of_uploads() {
    let mut cfg = small();
    cfg.data.train_examples = 50;
    let out = go(&cfg, Method::Method1);
    let a = &out.artifacts;
    assert_eq!(a.globals.len(), 3);
    for (ups, global) in a.uploads.iter().zip(&a.globals) {
        let ns: Vec<u64> = ups.iter().map(|u| u.n_k).collect();
        assert_eq!(ns, vec![17, 17, 16]);
        let n: u64 = ns.iter().sum();
        for (name, g) in global {
            for (i, &v) in g.data().iter().enumerate() {
                let oracle: f64 = ups
                    .iter()
                    .map(|u| u.n_k as f64 * u.params[name].data()[i])
                    .sum::<f64>()
                    / n as f64;
                assert!((v - oracle).abs() <= 1e-14 * oracle.abs().max(1.0));
            }
        }
    }
}

#[test]
fn one_client_federation_is_centralized_training() {
    let mut cfg = small();
    cfg.clients = 1;
    let data = data_for(&cfg);
    for (method, tol) in [(Method::FlLlm, 0.0), (Method::Method1, 1e-9)] {
        let cfg = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        let fed = run(&cfg, &data).unwrap().artifacts.globals;
        let central = run_centralized(&cfg, &data).unwrap();
        assert_eq!(fed.len(), central.len());
        for (f, c) in fed.iter().zip(&central) {
            let d = max_param_diff(f, c);
            assert!(d <= tol, "{method}: {d}");
        }
    }
}

#[test]
fn plaintext_and_method1_learn_the_same_weights() {
    let fl = go(&small(), Method::FlLlm);
    let m1 = go(&small(), Method::Method1);
    let d = max_param_diff(&fl.artifacts.final_params, &m1.artifacts.final_params);
    assert!(d < 1e-6, "{d}");
    assert_eq!(fl.report.audit_status, "n/a-plaintext");
    assert!(!fl.report.audit.passed);
}

#[test]
fn swmt_runs_nothing_untrusted() {
    let out = go(&small(), Method::Swmt);
    assert!(out.report.audit.untrusted_sites.is_empty());
    assert_eq!(out.report.audit.crossings, 0);
    assert_eq!(out.report.audit_status, "pass");
}

#[test]
fn method2_uploads_once_and_sends_nothing_back() {
    let cfg = small();
    let out = go(&cfg, Method::Method2);
    let r = &out.report;
    assert_eq!(r.messages.embedding_batch, cfg.clients as u64);
    assert_eq!(r.messages.server_to_client_params, 0);
    assert_eq!(r.messages.adapter_update + r.messages.global_broadcast, 0);
    assert_eq!(r.messages.query, 24);
    assert_eq!(r.audit_status, "pass");
    let a = &out.artifacts;
    assert_eq!(a.client_features.len(), 3);
    for (c, s) in a.client_features.iter().zip(&a.server_features) {
        assert_eq!(c.len(), s.len());
        for (x, y) in c.iter().zip(s) {
            assert_eq!((x.id, x.label), (y.id, y.label));
            let scale = x.value.max_abs().max(1.0);
            assert!(max_abs_diff(&x.value, &y.value) <= 1e-12 * scale);
        }
    }
    assert!(a.sent.iter().all(|m| m.masked()));
}

#[test]
fn method2_loss_falls_within_fifty_steps() {
    let mut cfg = small();
    cfg.rounds = 9;
    let out = go(&cfg, Method::Method2);
    let steps = &out.report.step_losses[0];
    assert!(steps.len() > 50);
    assert!(steps[50] < steps[0], "{} vs {}", steps[50], steps[0]);
}

#[test]
fn second_feature_upload_is_a_protocol_error() {
    let mut cfg = small();
    cfg.method = Method::Method2;
    let data = data_for(&cfg);
    let tuning = cfg.run_tuning();
    let plan = std::sync::Arc::new(build_plan(&cfg.model, Method::Method2, Some(2)).unwrap());
    let model = Model::init(&cfg.model, &tuning, cfg.seed).unwrap();
    let mut client = SplitClient::new(&cfg, &model, &plan, data.shard(0), 0);
    let mut server = SplitServer::new(&cfg, &model, &plan);
    let f = client.features(Precision::Exact).unwrap();
    let msg = client.upload(&f).unwrap();
    server.accept_upload(&msg).unwrap();
    assert!(matches!(
        server.accept_upload(&msg),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(client.upload(&f), Err(Error::Protocol(_))));
    // Training before every client has uploaded is refused too.
    assert!(matches!(server.train_round(&cfg), Err(Error::Protocol(_))));
}

#[test]
fn same_seed_same_report() {
    for m in [Method::Method1, Method::Method2] {
        let a = serde_json::to_string(&go(&small(), m).report).unwrap();
        let b = serde_json::to_string(&go(&small(), m).report).unwrap();
        assert_eq!(a, b);
    }
    let mut other = small();
    other.seed = 9;
    assert_ne!(
        go(&small(), Method::Method1)
            .report
            .final_params_fingerprint,
        go(&other, Method::Method1).report.final_params_fingerprint
    );
}

#[test]
fn local_step_with_zero_rate_moves_nothing() {
    let cfg = small();
    let data = data_for(&cfg);
    let mut model = Model::init(&cfg.model, &cfg.tuning, 1).unwrap();
    let base = model.base.fingerprint();
    let params = model.trainable();
    let plan = std::sync::Arc::new(build_plan(&cfg.model, Method::Method1, None).unwrap());
    let mut ch = Channel::new(plan, 1, Rng::new(0, 0), MaskConfig::default());
    let train = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let mut st = LocalState::new(0.0, Rng::new(0, 1));
    let mut obj: ModelObjective<'_, _, teeslice::data::Example> =
        ModelObjective::new(&mut model, &mut ch, Precision::Exact, Rng::new(0, 2));
    let out = local_train_step(&mut obj, &mut st, params.clone(), &data.shard(0), &train).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(model.base.fingerprint(), base);
    let mut obj: ModelObjective<'_, _, teeslice::data::Example> =
        ModelObjective::new(&mut model, &mut ch, Precision::Exact, Rng::new(0, 2));
    assert!(matches!(
        local_train_step(&mut obj, &mut st, params, &[], &train),
        Err(Error::Contract(_))
    ));
}

#[test]
fn missing_client_stops_aggregation() {
    let u = Update {
        client: 0,
        n_k: 4,
        params: ParamSet::new(),
    };
    assert!(matches!(aggregate(&[u], 3, 0), Err(Error::Protocol(_))));
}

#[test]
fn run_costs_order_the_schemes() {
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = 1;
    cfg.data.train_examples = 24;
    cfg.data.test_examples = 4;
    let cost: Vec<f64> = Method::ALL
        .iter()
        .map(|&m| go(&cfg, m).report.cost.total)
        .collect();
    assert!(cost.windows(2).all(|w| w[0] < w[1]), "{cost:?}");
}

#[test]
fn compare_rejects_mismatched_runs_and_tabulates_the_rest() {
    let base = small();
    let mut reports = Vec::new();
    for split in [2, 1, 0] {
        let cfg = ExperimentConfig {
            rounds: 1,
            ..base.clone().with_split(split)
        };
        reports.push(go(&cfg, Method::Method2).report);
    }
    let rows = compare(&reports).unwrap();
    let layers: Vec<_> = rows.iter().map(|r| r.server_layers.unwrap()).collect();
    assert_eq!(layers, vec![1, 2, 3]);
    assert!(rows
        .windows(2)
        .all(|w| w[0].trainable_params < w[1].trainable_params));

    let mut odd = reports[0].clone();
    odd.config.seed += 1;
    reports.push(odd);
    assert!(matches!(compare(&reports), Err(Error::Contract(m)) if m.contains("seed")));
}

#[test]
fn baseline_entry_refuses_secure_schemes() {
    let cfg = small();
    let data = data_for(&cfg);
    assert!(run_baseline(&cfg, &data, Method::Method1).is_err());
    let mut wrong = cfg.clone();
    wrong.clients = 2;
    assert!(matches!(
        run_method1(&wrong, &data),
        Err(Error::Contract(_))
    ));
    assert!(run_method2(&cfg, &data).is_ok());
}

#[test]
fn config_reads_partial_toml_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::from_toml(
        "method = \"method2\"\nseed = 4\n[train]\nlr = 0.02\n[tuning]\nsplit_layer = 3\n",
    )
    .unwrap();
    assert_eq!(cfg.method, Method::Method2);
    assert_eq!(cfg.train.lr, 0.02);
    assert_eq!(cfg.train.batch, 8);
    assert_eq!(cfg.clients, 3);
    assert_eq!(cfg.rounds, 10);
    assert_eq!(cfg.tuning.lora.rank, 8);
    assert_eq!(cfg.tuning.lora.dropout, 0.1);
    assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

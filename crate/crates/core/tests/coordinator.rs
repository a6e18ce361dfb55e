use std::collections::{BTreeMap, BTreeSet};

use gradloom_core::coordinator::{
    reduce, BudgetMode, DataIndexTable, Outgoing, Project, ProjectConfig, ReportOutcome,
};
use gradloom_core::datastore::{DatasetManifest, DatumId, ItemFormat, ManifestEntry};
use gradloom_core::nn::{
    adagrad_update, build_network, GradientBundle, Hyperparams, LayerParams, LayerSpec, NetworkSpec,
    ParamSet, Params, Pass, Shape, Tensor,
};
use gradloom_core::protocol::{Budget, Message, WorkerMode};
use gradloom_core::worker::{train_budget, CachedItem, WorkerCache};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn manifest(id: &str, n: u32, labels: &[&str]) -> DatasetManifest {
    let mut label_set: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    label_set.sort();
    DatasetManifest {
        dataset_id: id.to_string(),
        entries: (0..n)
            .map(|i| ManifestEntry {
                id: i,
                label: labels[i as usize % labels.len()].to_string(),
                byte_size: 16,
                format: ItemFormat::Mlb1,
            })
            .collect(),
        label_set,
        skipped: 0,
    }
}

// ---------------------------------------------------------------- allocation

#[derive(Clone, Debug)]
enum Op {
    Register(u32),
    Join(usize),
    Leave(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u32..4000).prop_map(Op::Register),
        prop_oneof![Just(3000usize), 0usize..3001].prop_map(Op::Join),
        (0usize..20).prop_map(Op::Leave),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn allocation_invariants_hold_after_every_settled_iteration(ops in prop::collection::vec(op(), 1..40)) {
        let mut t = DataIndexTable::new();
        let mut next_worker = 0;
        let mut datasets = 0;
        for op in ops {
            match op {
                Op::Register(n) => {
                    let n = n.min(10_000 - t.len() as u32);
                    t.register(&manifest(&format!("d{datasets}"), n, &["x"])).unwrap();
                    datasets += 1;
                }
                Op::Join(cap) => {
                    if t.workers().count() >= 20 {
                        continue;
                    }
                    let id = format!("w{next_worker:02}");
                    next_worker += 1;
                    let before = t.sizes();
                    let pool_empty = t.unallocated_len() == 0;
                    let allocated_before = t.allocated_len();
                    let changes = t.join(&id, cap);
                    // pre-existing workers only ever lose ids, and only to the joiner
                    for (w, size) in &before {
                        prop_assert!(t.allocation_len(w) <= *size);
                        if let Some(d) = changes.get(w) {
                            prop_assert!(d.add.is_empty());
                        }
                    }
                    if pool_empty && !before.is_empty() {
                        let target = (allocated_before / (before.len() + 1)).min(cap);
                        prop_assert_eq!(t.allocation_len(&id), target);
                    }
                }
                Op::Leave(i) => {
                    let workers: Vec<String> = t.workers().cloned().collect();
                    if workers.is_empty() {
                        continue;
                    }
                    let gone = &workers[i % workers.len()];
                    let before = t.sizes();
                    let changes = t.remove_worker(gone);
                    prop_assert!(!changes.contains_key(gone));
                    for (w, d) in &changes {
                        prop_assert!(d.remove.is_empty());
                        prop_assert!(t.allocation_len(w) > before[w]);
                    }
                }
            }
            // step (a) of the next iteration
            t.allocate_unallocated();
            prop_assert!(t.check_invariants().is_ok(), "{:?}", t.check_invariants());
            // balance: nothing waits in the pool while someone has room
            if t.unallocated_len() > 0 {
                for w in t.workers() {
                    prop_assert_eq!(t.allocation_len(w), t.limit(w).unwrap());
                }
            }
        }
    }
}

#[test]
fn registration_is_dealt_evenly_to_equal_workers() {
    let mut t = DataIndexTable::new();
    for w in ["a", "b", "c"] {
        t.join(w, 3000);
    }
    t.register(&manifest("d", 1000, &["x"])).unwrap();
    t.allocate_unallocated();
    let sizes: Vec<usize> = t.sizes().into_values().collect();
    assert_eq!(sizes, [334, 333, 333]);
}

#[test]
fn cap_fractions_on_sixty_thousand_ids() {
    let mut t = DataIndexTable::new();
    t.register(&manifest("mnist", 60_000, &["x"])).unwrap();
    t.join("w00", 3000);
    t.allocate_unallocated();
    assert_eq!((t.allocated_len(), t.len()), (3000, 60_000));
    for i in 1..20 {
        t.join(&format!("w{i:02}"), 3000);
        t.allocate_unallocated();
    }
    assert_eq!(t.allocated_len(), 60_000);
    assert_eq!(t.unallocated_len(), 0);
}

// ---------------------------------------------------------------- reduce

#[test]
fn reduce_equals_flat_average_over_all_examples() {
    // per-example gradient of worker w, example i is the constant (w + 1) * 0.1 + i * 1e-3
    let counts = [5u64, 9, 2];
    let per_example = |w: usize, i: u64| (w as f64 + 1.0) * 0.1 + i as f64 * 1e-3;
    let mut reports = BTreeMap::new();
    for (w, &n) in counts.iter().enumerate() {
        let mut sum = 0.0;
        for i in 0..n {
            sum += per_example(w, i);
        }
        reports.insert(
            format!("w{w}"),
            GradientBundle {
                params_version: 0,
                grads: ParamSet {
                    layers: vec![LayerParams {
                        weights: vec![sum; 3],
                        biases: vec![sum],
                    }],
                },
                example_count: n,
                compute_ms: 1.0,
            },
        );
    }
    let (avg, total) = reduce(&reports).unwrap().unwrap();
    assert_eq!(total, 16);
    let mut flat = 0.0;
    for (w, &n) in counts.iter().enumerate() {
        for i in 0..n {
            flat += per_example(w, i);
        }
    }
    let flat = flat / 16.0;
    for v in avg.iter() {
        assert!((v - flat).abs() < 1e-15);
    }
}

#[test]
fn reduce_of_one_worker_is_its_mean() {
    let mut reports = BTreeMap::new();
    reports.insert(
        "solo".to_string(),
        GradientBundle {
            params_version: 3,
            grads: ParamSet {
                layers: vec![LayerParams {
                    weights: vec![3.0, -6.0],
                    biases: vec![9.0],
                }],
            },
            example_count: 3,
            compute_ms: 0.0,
        },
    );
    let (avg, _) = reduce(&reports).unwrap().unwrap();
    assert_eq!(avg.to_vec(), [1.0, -2.0, 3.0]);
}

// ---------------------------------------------------------------- project

fn tiny_spec() -> NetworkSpec {
    NetworkSpec::new(vec![
        LayerSpec::Input {
            width: 4,
            height: 1,
            depth: 1,
        },
        LayerSpec::Fc { neurons: 3 },
        LayerSpec::Softmax {
            labels: vec!["a".into(), "b".into()],
        },
    ])
}

fn synthetic(id: &DatumId) -> CachedItem {
    let i = id.index() as f64;
    CachedItem {
        label: if id.index() % 2 == 0 { "a" } else { "b" }.into(),
        input: Tensor::from_vec(
            Shape::new(4, 1, 1),
            (0..4).map(|k| (i * 0.37 + k as f64 * 0.11) % 1.0).collect(),
        )
        .unwrap(),
    }
}

fn step_config(steps: u64) -> ProjectConfig {
    let mut c = ProjectConfig::new("p", tiny_spec(), 1.0);
    c.mode = BudgetMode::StepBudget;
    c.step_budget_steps = Some(steps);
    c.seed = 11;
    c.hyper = Some(Hyperparams {
        learning_rate: 0.1,
        ..Hyperparams::default()
    });
    c
}

/// In-process stand-in for worker processes: caches synthetic items and
/// answers work orders with `train_budget`.
#[derive(Default)]
struct SimWorkers {
    caches: BTreeMap<String, WorkerCache>,
    orders: BTreeMap<String, (Params<f64>, Budget)>,
    welcomed: BTreeSet<String>,
}

impl SimWorkers {
    fn deliver(&mut self, out: Vec<Outgoing>) {
        for o in out {
            match o.message {
                Message::Welcome { .. } => {
                    self.welcomed.insert(o.to.clone());
                    self.caches.entry(o.to).or_default();
                }
                Message::AllocationUpdate { add_ids, remove_ids } => {
                    let cache = self.caches.entry(o.to).or_default();
                    cache.apply_update(&add_ids, &remove_ids);
                    for id in cache.missing() {
                        cache.insert(id.clone(), synthetic(&id));
                    }
                }
                Message::WorkOrder { params, budget, .. } => {
                    self.orders.insert(o.to, (params.into(), budget));
                }
                _ => {}
            }
        }
    }

    fn report_ready(&mut self, project: &mut Project) {
        for (id, cache) in &self.caches {
            project.cache_status(id, cache.is_complete(), &[]);
        }
    }

    fn compute(&mut self, project: &mut Project, now: f64) -> Vec<(String, ReportOutcome)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut outcomes = Vec::new();
        for (id, (params, budget)) in std::mem::take(&mut self.orders) {
            let cache = self.caches.get_mut(&id).unwrap();
            let bundle = train_budget(project.network(), &params, cache, budget, 0.0, &mut rng).unwrap();
            outcomes.push((id.clone(), project.gradient_report(&id, bundle, now)));
        }
        outcomes
    }
}

#[test]
fn idle_without_trainers() {
    let mut p = Project::new(step_config(10)).unwrap();
    assert!(p.is_idle());
    assert!(!p.due(0.0));
    assert!(p.next_deadline_ms().is_none());
    p.join("t", WorkerMode::Track, 0).unwrap();
    assert!(p.due(0.0));
    let b = p.run_boundary(0.0);
    assert!(b.record.is_none());
    assert!(matches!(b.outgoing[0].message, Message::Welcome { .. }));
    assert!(p.is_idle());
    assert_eq!(p.params().version, 0);
}

#[test]
fn one_worker_step_budget_matches_serial_oracle() {
    let mut p = Project::new(step_config(10)).unwrap();
    let (net, mut oracle, mut acc) = build_network::<f64>(tiny_spec(), 11).unwrap();
    assert_eq!(&oracle, p.params());
    p.register_dataset(&manifest("syn", 30, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(1000.0).outgoing);
    assert_eq!(sim.orders["w1"].1, Budget::Steps(10));
    let outcomes = sim.compute(&mut p, 1500.0);
    assert_eq!(outcomes, [("w1".to_string(), ReportOutcome::Accepted)]);
    let record = p.run_boundary(2000.0).record.unwrap();
    assert_eq!(record.total_examples, 10);
    assert_eq!(record.params_version, 1);

    let mut sum = ParamSet::zeros(net.slots());
    for i in 0..10 {
        let item = synthetic(&DatumId::new("syn", i));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = net
            .forward(
                &oracle,
                &item.input,
                Pass::Train {
                    dropout_p: 0.0,
                    rng: &mut rng,
                },
            )
            .unwrap();
        sum.add_assign(&net.backward(&oracle, &cache, (i % 2) as usize).unwrap().0);
    }
    sum.scale(1.0 / 10.0);
    // the oracle divides by multiplying with 1/10, the reduce divides
    adagrad_update(&mut oracle, &mut acc, &sum, p.hyper()).unwrap();
    for (a, b) in p.params().layers.iter().zip(oracle.layers.iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(p.params().version, oracle.version);
}

#[test]
fn stale_and_unsolicited_reports_are_discarded_and_counted() {
    let mut p = Project::new(step_config(5)).unwrap();
    p.register_dataset(&manifest("syn", 20, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    let empty = GradientBundle::empty(0, &p.params().layers);
    assert_eq!(p.gradient_report("w1", empty.clone(), 10.0), ReportOutcome::Stale);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(1000.0).outgoing);
    let mut old = empty.clone();
    old.params_version = 7;
    assert_eq!(p.gradient_report("w1", old, 1100.0), ReportOutcome::Stale);
    assert_eq!(p.gradient_report("ghost", empty, 1100.0), ReportOutcome::Stale);
    sim.compute(&mut p, 1200.0);
    let r = p.run_boundary(2000.0).record.unwrap();
    assert_eq!(r.stale_discarded, 3);
    assert_eq!(r.reports_received, 1);
}

#[test]
fn stalled_iteration_bumps_version_only() {
    let mut p = Project::new(step_config(5)).unwrap();
    p.register_dataset(&manifest("syn", 20, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    p.run_boundary(1000.0);
    let before = p.params().clone();
    assert!(!p.due(2000.0));
    // T + 2·0 + 1 s after the window opened
    assert!(p.due(3000.0));
    let r = p.run_boundary(3000.0).record.unwrap();
    assert!(r.stalled);
    assert_eq!(r.reports_received, 0);
    assert_eq!(p.params().version, before.version + 1);
    assert_eq!(p.params().layers, before.layers);
    assert!(r.wall_ms >= 1000.0);
}

#[test]
fn hyper_change_takes_effect_at_the_next_reduce() {
    let mut p = Project::new(step_config(5)).unwrap();
    p.register_dataset(&manifest("syn", 20, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(1000.0).outgoing);
    let new = Hyperparams {
        learning_rate: 0.5,
        ..p.hyper().clone()
    };
    p.set_hyper(new.clone()).unwrap();
    assert_eq!(p.hyper().learning_rate, 0.1);
    sim.compute(&mut p, 1100.0);
    let b = p.run_boundary(2000.0);
    assert_eq!(b.record.unwrap().hyper, new);
    assert!(b
        .outgoing
        .iter()
        .any(|o| matches!(&o.message, Message::HyperUpdate { hyper } if hyper.learning_rate == 0.5)));
    assert!(p
        .set_hyper(Hyperparams {
            learning_rate: -1.0,
            ..new
        })
        .is_err());
}

#[test]
fn lost_worker_report_is_never_folded_in() {
    let mut c = step_config(1000);
    c.min_trainers = 3;
    let mut p = Project::new(c).unwrap();
    p.register_dataset(&manifest("syn", 300, &["a", "b"])).unwrap();
    for w in ["w1", "w2", "w3"] {
        p.join(w, WorkerMode::Train, 3000).unwrap();
    }
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(1000.0).outgoing);
    assert_eq!(sim.orders.len(), 3);
    let outcomes = sim.compute(&mut p, 1200.0);
    assert!(outcomes.iter().all(|(_, o)| *o == ReportOutcome::Accepted));

    let lost_ids = p.table().allocation("w2").unwrap().clone();
    let out = p.worker_lost("w2");
    assert!(out.iter().all(|o| o.to != "w2"));
    p.table().check_invariants().unwrap();
    for id in &lost_ids {
        let owner = p.table().datum(id).unwrap().allocated_to.clone();
        assert!(owner.as_deref() != Some("w2"));
    }
    let r = p.run_boundary(2000.0).record.unwrap();
    assert_eq!(r.reports_received, 2);
    assert_eq!(r.total_examples, 300 - lost_ids.len() as u64);
    assert!(!p.workers().contains_key("w2"));
}

#[test]
fn new_label_grows_the_output_layer_for_everyone() {
    let mut p = Project::new(step_config(5)).unwrap();
    p.register_dataset(&manifest("syn", 20, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    p.join("t1", WorkerMode::Track, 0).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(1000.0).outgoing);
    sim.compute(&mut p, 1100.0);
    p.register_dataset(&manifest("more", 4, &["a", "c"])).unwrap();
    assert!(p.register_dataset(&manifest("more", 4, &["a"])).is_err());
    let b = p.run_boundary(2000.0);
    assert_eq!(p.network().labels(), ["a", "b", "c"]);
    let with_spec = b
        .outgoing
        .iter()
        .filter(|o| {
            matches!(
                &o.message,
                Message::WorkOrder { spec: Some(_), .. } | Message::ParamBroadcast { spec: Some(_), .. }
            )
        })
        .count();
    assert_eq!(with_spec, 2);
    assert_eq!(p.table().len(), 24);
}

#[test]
fn resumed_project_repeats_the_next_step_exactly() {
    let mut p = Project::new(step_config(7)).unwrap();
    p.register_dataset(&manifest("syn", 40, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    for k in 1..4 {
        sim.deliver(p.run_boundary(1000.0 * k as f64).outgoing);
        sim.compute(&mut p, 1000.0 * k as f64 + 10.0);
    }
    sim.deliver(p.run_boundary(4000.0).outgoing);
    let archive = p.snapshot();
    let mut config = step_config(7);
    config.project_id = "q".into();
    config.spec = None;
    config.resume_from = Some(Box::new(archive.clone()));
    let mut q = Project::new(config).unwrap();
    assert_eq!(q.snapshot(), archive);
    assert_eq!(q.iteration(), p.iteration());

    // identical reports into both
    let bundle = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (params, budget) = sim.orders["w1"].clone();
        train_budget(p.network(), &params, sim.caches.get_mut("w1").unwrap(), budget, 0.0, &mut rng).unwrap()
    };
    assert_eq!(p.gradient_report("w1", bundle.clone(), 4500.0), ReportOutcome::Accepted);
    p.run_boundary(5000.0);

    q.register_dataset(&manifest("syn", 40, &["a", "b"])).unwrap();
    q.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut qsim = SimWorkers::default();
    qsim.deliver(q.run_boundary(0.0).outgoing);
    qsim.report_ready(&mut q);
    qsim.deliver(q.run_boundary(1000.0).outgoing);
    assert_eq!(q.gradient_report("w1", bundle, 1500.0), ReportOutcome::Accepted);
    q.run_boundary(2000.0);
    assert_eq!(p.params(), q.params());
    assert_eq!(p.adagrad(), q.adagrad());
}

#[test]
fn time_mode_budget_and_power() {
    let mut c = ProjectConfig::new("p", tiny_spec(), 4.0);
    c.mode = BudgetMode::TimeBudget;
    let mut p = Project::new(c).unwrap();
    p.register_dataset(&manifest("syn", 10, &["a", "b"])).unwrap();
    p.join("w1", WorkerMode::Train, 3000).unwrap();
    let mut sim = SimWorkers::default();
    sim.deliver(p.run_boundary(0.0).outgoing);
    sim.report_ready(&mut p);
    sim.deliver(p.run_boundary(4000.0).outgoing);
    assert_eq!(sim.orders["w1"].1, Budget::BudgetMs(3900));
    // round trip 3900 + 500 ms, compute reported as 3900: one-way 250, ewma 50
    let (params, _) = sim.orders.remove("w1").unwrap();
    let mut bundle = GradientBundle::empty(params.version, &params.layers);
    bundle.example_count = 0;
    bundle.compute_ms = 3900.0;
    let _ = p.gradient_report("w1", bundle, 4000.0 + 4400.0);
    assert!(!p.due(4000.0 + 3999.0));
    let r = p.run_boundary(8400.0).record.unwrap();
    assert!(r.wall_ms >= 4000.0);
    assert_eq!(r.power, r.total_examples as f64 / (r.wall_ms / 1000.0));
    assert!((r.workers[0].latency_ewma_ms - 50.0).abs() < 1e-9);
    assert_eq!(r.workers[0].budget, Some(Budget::BudgetMs(3800)));
}

#[test]
fn config_validation() {
    let mut c = ProjectConfig::new("p", tiny_spec(), 0.5);
    assert!(Project::new(c.clone()).is_err());
    c.period_s = 31.0;
    assert!(Project::new(c.clone()).is_err());
    c.period_s = 2.0;
    c.mode = BudgetMode::StepBudget;
    assert!(Project::new(c.clone()).is_err());
    c.step_budget_steps = Some(3);
    c.data_refresh = true;
    assert!(Project::new(c.clone()).is_err());
    c.data_refresh = false;
    c.project_id = "bad id".into();
    assert!(Project::new(c.clone()).is_err());
    c.project_id = "ok".into();
    assert!(Project::new(c).is_ok());

    let json = r#"{"project_id":"x","T_seconds":2,"spec":{"layers":[
        {"type":"input","width":2,"height":1,"depth":1},{"type":"softmax","labels":["a"]}]}}"#;
    let parsed: ProjectConfig = serde_json::from_str(json).unwrap();
    assert_eq!(parsed.per_worker_cap, 3000);
    assert_eq!(parsed.reduce_margin_ms, 100);
    assert_eq!(parsed.min_budget_ms, 100);
    assert_eq!(parsed.mode, BudgetMode::TimeBudget);
}

#[test]
fn duplicate_worker_ids_are_rejected() {
    let mut p = Project::new(step_config(5)).unwrap();
    p.join("w", WorkerMode::Train, 10).unwrap();
    assert!(p.join("w", WorkerMode::Track, 10).is_err());
    p.run_boundary(0.0);
    assert!(p.join("w", WorkerMode::Train, 10).is_err());
    p.worker_lost("w");
    assert!(p.join("w", WorkerMode::Train, 10).is_ok());
}

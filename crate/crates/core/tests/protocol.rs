use gradloom_core::datastore::DatumId;
use gradloom_core::nn::{
    build_network, GradientBundle, Hyperparams, LayerParams, LayerSpec, ModelArchive, NetworkSpec,
    ParamSet, Shape, Tensor,
};
use gradloom_core::protocol::{
    decode, encode, encode_frame, Budget, Envelope, FrameDecoder, IterationRecord, Message,
    MetricSample, PredictInput, ProtocolError, SeqGuard, Sender, WireBundle, WireParams,
    WorkerMode, WorkerTelemetry, DEFAULT_MAX_FRAME, PROTOCOL_VERSION,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn envelope(message: Message) -> Envelope {
    Envelope {
        project_id: "demo".into(),
        sender_id: "w1".into(),
        msg_seq: 1,
        message,
    }
}

fn spec() -> NetworkSpec {
    NetworkSpec::new(vec![
        LayerSpec::Input {
            width: 3,
            height: 3,
            depth: 1,
        },
        LayerSpec::Conv {
            filters: 2,
            size: 2,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Softmax {
            labels: vec!["x".into(), "y".into()],
        },
    ])
}

fn grads(values: Vec<f64>) -> ParamSet<f64> {
    ParamSet {
        layers: vec![LayerParams {
            weights: values,
            biases: vec![-0.0, f64::MIN_POSITIVE],
        }],
    }
}

#[test]
fn ping_round_trips() {
    let env = envelope(Message::Ping { sent_at_ms: 1234 });
    let text = String::from_utf8(encode(&env)).unwrap();
    assert!(text.contains(r#""type":"ping""#));
    assert_eq!(decode(text.as_bytes(), DEFAULT_MAX_FRAME).unwrap(), env);
}

#[test]
fn large_gradient_report_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut values: Vec<f64> = (0..10_000)
        .map(|_| f64::from_bits(rng.random::<u64>()))
        .filter(|v| v.is_finite())
        .collect();
    values.extend([0.1, -0.0, 1e-310, f64::MAX, f64::EPSILON]);
    values.truncate(10_000);
    while values.len() < 10_000 {
        values.push(rng.random::<f64>() - 0.5);
    }
    let bundle = GradientBundle {
        params_version: 42,
        grads: grads(values.clone()),
        example_count: 256,
        compute_ms: 1817.25,
    };
    let env = envelope(Message::GradientReport {
        bundle: WireBundle::from(&bundle),
    });
    let back = decode(&encode(&env), DEFAULT_MAX_FRAME).unwrap();
    let Message::GradientReport { bundle: wire } = back.message else {
        panic!("wrong variant");
    };
    let decoded: GradientBundle<f64> = wire.into();
    assert_eq!(decoded.grads.layers[0].weights.len(), 10_000);
    for (a, b) in decoded.grads.iter().zip(bundle.grads.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(decoded.params_version, 42);
    assert_eq!(decoded.example_count, 256);
}

#[test]
fn error_kinds() {
    let unknown = br#"{"project_id":"p","sender_id":"s","msg_seq":1,"message":{"type":"teleport"}}"#;
    assert!(matches!(
        decode(unknown, DEFAULT_MAX_FRAME),
        Err(ProtocolError::UnknownVariant(_))
    ));
    let schema = br#"{"project_id":"p","sender_id":"s","msg_seq":1,"message":{"type":"ping","sent_at_ms":"soon"}}"#;
    match decode(schema, DEFAULT_MAX_FRAME) {
        Err(ProtocolError::Schema { path, message }) => {
            assert_eq!(path, "message");
            assert!(message.contains("u64"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let body = encode(&envelope(Message::SaveRequest));
    assert!(matches!(
        decode(&body, body.len() - 1),
        Err(ProtocolError::Oversized { .. })
    ));
    let mut trailing = body.clone();
    trailing.extend_from_slice(b" {}");
    assert!(matches!(
        decode(&trailing, DEFAULT_MAX_FRAME),
        Err(ProtocolError::Schema { .. })
    ));
    let odd_blob = br#"{"project_id":"p","sender_id":"s","msg_seq":1,"message":{"type":"param_broadcast","iteration":1,"params":{"version":1,"layers":[{"weights":"AAAA","biases":""}]}}}"#;
    assert!(matches!(
        decode(odd_blob, DEFAULT_MAX_FRAME),
        Err(ProtocolError::Schema { .. })
    ));
}

#[test]
fn sequence_numbers_must_increase() {
    let mut sender = Sender::new("p", "w");
    let mut guard = SeqGuard::default();
    let a = sender.wrap(Message::Ping { sent_at_ms: 0 });
    let b = sender.wrap(Message::Ping { sent_at_ms: 1 });
    assert_eq!((a.msg_seq, b.msg_seq), (1, 2));
    guard.accept(&a).unwrap();
    guard.accept(&b).unwrap();
    assert!(matches!(
        guard.accept(&a),
        Err(ProtocolError::OutOfOrder { last: 2, got: 1, .. })
    ));
}

#[test]
fn frame_decoder_reassembles_split_streams() {
    let envs: Vec<Envelope> = (0..5)
        .map(|i| {
            let mut e = envelope(Message::Pong { sent_at_ms: i });
            e.msg_seq = i + 1;
            e
        })
        .collect();
    let stream: Vec<u8> = envs.iter().flat_map(encode_frame).collect();
    let mut dec = FrameDecoder::new(DEFAULT_MAX_FRAME);
    let mut got = Vec::new();
    for chunk in stream.chunks(7) {
        dec.push(chunk);
        while let Some(frame) = dec.next_frame() {
            got.push(frame.unwrap());
        }
    }
    assert_eq!(got, envs);

    let mut dec = FrameDecoder::new(16);
    dec.push(&encode_frame(&envs[0]));
    assert!(matches!(dec.next_frame(), Some(Err(ProtocolError::Oversized { .. }))));
}

#[test]
fn fuzzed_frames_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let seeds: Vec<Vec<u8>> = sample_messages().into_iter().map(|m| encode(&envelope(m))).collect();
    let mut errors = 0;
    for i in 0..10_000 {
        let frame: Vec<u8> = match i % 4 {
            0 => (0..rng.random_range(0..256)).map(|_| rng.random()).collect(),
            1 => {
                let mut f = seeds[rng.random_range(0..seeds.len())].clone();
                for _ in 0..rng.random_range(1..8) {
                    let at = rng.random_range(0..f.len());
                    f[at] = rng.random();
                }
                f
            }
            2 => {
                let f = &seeds[rng.random_range(0..seeds.len())];
                f[..rng.random_range(0..f.len())].to_vec()
            }
            _ => {
                let a = &seeds[rng.random_range(0..seeds.len())];
                let b = &seeds[rng.random_range(0..seeds.len())];
                let (x, y) = (rng.random_range(0..a.len()), rng.random_range(0..b.len()));
                [&a[..x], &b[y..]].concat()
            }
        };
        match decode(&frame, 4096) {
            Ok(_) => {}
            Err(
                ProtocolError::Oversized { .. }
                | ProtocolError::UnknownVariant(_)
                | ProtocolError::Schema { .. },
            ) => errors += 1,
            Err(other) => panic!("unexpected error kind {other:?}"),
        }
        let mut dec = FrameDecoder::new(4096);
        dec.push(&frame);
        while let Some(Ok(_)) = dec.next_frame() {}
    }
    assert!(errors > 9_000);
}

fn sample_messages() -> Vec<Message> {
    let (net, params, adagrad) = build_network::<f64>(spec(), 1).unwrap();
    let wire = WireParams::from(&params);
    let archive = ModelArchive::new(&net, params.clone(), adagrad, Hyperparams::default(), 3, 1);
    vec![
        Message::Join {
            worker_id: "w1".into(),
            mode: WorkerMode::Train,
            capacity: 3000,
            protocol_version: PROTOCOL_VERSION,
        },
        Message::Welcome {
            project_id: "demo".into(),
            protocol_version: PROTOCOL_VERSION,
            spec: spec(),
            hyper: Hyperparams::default(),
            params: wire.clone(),
            iteration: 0,
        },
        Message::AllocationUpdate {
            add_ids: vec![DatumId::new("mnist", 0), DatumId::new("mnist", 7)],
            remove_ids: vec![DatumId::new("extra", 2)],
        },
        Message::CacheStatus {
            cached: 2,
            complete: false,
            missing_ids: vec![DatumId::new("mnist", 9)],
        },
        Message::WorkOrder {
            params: wire.clone(),
            budget: Budget::BudgetMs(3800),
            deadline_hint_ms: 4000,
            spec: None,
        },
        Message::WorkOrder {
            params: wire.clone(),
            budget: Budget::Steps(10),
            deadline_hint_ms: 4000,
            spec: Some(spec()),
        },
        Message::ParamBroadcast {
            params: wire,
            iteration: 9,
            spec: None,
        },
        Message::GradientReport {
            bundle: WireBundle::from(&GradientBundle {
                params_version: 3,
                grads: params.layers.clone(),
                example_count: 17,
                compute_ms: 12.5,
            }),
        },
        Message::StatsReport {
            iteration: 4,
            metric_name: "test_error".into(),
            value: 0.125,
        },
        Message::HyperUpdate {
            hyper: Hyperparams {
                learning_rate: 0.02,
                l1_decay: 1e-5,
                l2_decay: 1e-4,
                adagrad_eps: 1e-8,
                dropout_p: 0.5,
            },
        },
        Message::PredictRequest {
            request_id: 7,
            input: PredictInput::Tensor(Tensor::from_vec(Shape::new(1, 1, 2), vec![0.5, 1.0]).unwrap()),
        },
        Message::PredictRequest {
            request_id: 8,
            input: PredictInput::Png("iVBORw0KGgo=".into()),
        },
        Message::PredictResponse {
            request_id: 7,
            label: "y".into(),
            probability: 0.75,
        },
        Message::SaveRequest,
        Message::ModelSnapshot {
            archive: Box::new(archive),
        },
        Message::Telemetry {
            record: Box::new(IterationRecord {
                iteration: 3,
                params_version: 3,
                reports_received: 2,
                total_examples: 512,
                wall_ms: 2001.5,
                power: 255.8,
                stale_discarded: 1,
                stalled: false,
                hyper: Hyperparams::default(),
                period_s: 2.0,
                allocated: 6000,
                unallocated: 0,
                workers: vec![WorkerTelemetry {
                    worker_id: "w1".into(),
                    mode: WorkerMode::Train,
                    latency_ewma_ms: 3.5,
                    budget: Some(Budget::BudgetMs(1893)),
                    example_count: 256,
                    allocated: 3000,
                    cache_ready: true,
                    paused: false,
                }],
                metrics: vec![MetricSample {
                    worker_id: "t1".into(),
                    iteration: 2,
                    metric_name: "test_error".into(),
                    value: 0.4,
                }],
            }),
        },
        Message::Bye {
            reason: "shutdown".into(),
        },
        Message::Ping { sent_at_ms: 1 },
        Message::Pong { sent_at_ms: 1 },
    ]
}

#[test]
fn every_variant_round_trips() {
    let mut kinds = std::collections::BTreeSet::new();
    for m in sample_messages() {
        kinds.insert(m.kind());
        let env = envelope(m);
        let bytes = encode(&env);
        assert_eq!(decode(&bytes, DEFAULT_MAX_FRAME).unwrap(), env, "{}", String::from_utf8_lossy(&bytes));
    }
    assert_eq!(kinds.len(), 17);
}

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<String>(), 0u64..10_000).prop_map(|(worker_id, capacity)| Message::Join {
            worker_id,
            mode: WorkerMode::Track,
            capacity,
            protocol_version: PROTOCOL_VERSION,
        }),
        (prop::collection::vec(finite(), 0..64), any::<u64>(), finite()).prop_map(|(w, v, ms)| {
            Message::GradientReport {
                bundle: WireBundle::from(&GradientBundle {
                    params_version: v,
                    grads: grads(w),
                    example_count: v / 2,
                    compute_ms: ms,
                }),
            }
        }),
        (any::<u64>(), "[a-z_]{0,12}", finite()).prop_map(|(iteration, metric_name, value)| {
            Message::StatsReport {
                iteration,
                metric_name,
                value,
            }
        }),
        (
            prop::collection::vec(("[a-z]{1,4}", any::<u32>()), 0..20),
            prop::collection::vec(("[a-z]{1,4}", any::<u32>()), 0..20)
        )
            .prop_map(|(a, r)| Message::AllocationUpdate {
                add_ids: a.into_iter().map(|(d, i)| DatumId::new(d, i)).collect(),
                remove_ids: r.into_iter().map(|(d, i)| DatumId::new(d, i)).collect(),
            }),
        (any::<u64>(), any::<String>(), finite()).prop_map(|(request_id, label, probability)| {
            Message::PredictResponse {
                request_id,
                label,
                probability,
            }
        }),
        any::<String>().prop_map(|reason| Message::Bye { reason }),
        any::<u64>().prop_map(|sent_at_ms| Message::Ping { sent_at_ms }),
    ]
}

proptest! {
    #[test]
    fn encode_decode_is_identity(m in message(), seq in any::<u64>(), sender in any::<String>()) {
        let env = Envelope {
            project_id: "p".into(),
            sender_id: sender,
            msg_seq: seq,
            message: m,
        };
        let back = decode(&encode(&env), DEFAULT_MAX_FRAME).unwrap();
        prop_assert_eq!(encode(&back), encode(&env));
    }
}

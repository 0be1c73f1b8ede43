use fedorch_core::aggregation::weighted_average;
use fedorch_core::clock::Clock;
use fedorch_core::controller::{FederationState, Phase, Registration};
use fedorch_core::data::{generate_synthetic, partition, PartitionPlan, Scheme, SyntheticTaskSpec};
use fedorch_core::learner::{Hyperparams, Learner, LocalUpdate, TaskAssignment};
use fedorch_core::model::{
    evaluate, forward, init_model, loss, Dataset, ModelSpec, ParameterVector, Segment,
};
use fedorch_core::policy::{compute_tmax, idle_time, LearnerProfile, Policy};
use fedorch_core::transport::{Codec, Envelope, Kind};
use proptest::prelude::*;

fn flat(values: Vec<f64>) -> ParameterVector {
    ParameterVector::new(vec![Segment::new("w", vec![values.len()])], values).unwrap()
}

/// (models, raw weights): up to 5 learners, up to 16 coordinates.
fn federation() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=5, 1usize..=16).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1e3..1e3f64, d), n),
            prop::collection::vec(1e-3..1e4f64, n),
        )
    })
}

fn average(models: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let pvs: Vec<ParameterVector> = models.iter().cloned().map(flat).collect();
    let pairs: Vec<(&ParameterVector, f64)> = pvs.iter().zip(weights.iter().copied()).collect();
    weighted_average(&pairs).unwrap().into_values()
}

proptest! {
    #[test]
    fn averaging_copies_is_identity(w in prop::collection::vec(-1e6..1e6f64, 1..16), p in prop::collection::vec(1e-6..1e6f64, 1..6)) {
        let models = vec![w.clone(); p.len()];
        let out = average(&models, &p);
        prop_assert!(out.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn average_is_convex((models, p) in federation()) {
        let out = average(&models, &p);
        for (i, v) in out.iter().enumerate() {
            let lo = models.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
            let hi = models.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *v && *v <= hi, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn raw_weight_scale_is_irrelevant((models, p) in federation(), c in 1e-3..1e3f64) {
        let scaled: Vec<f64> = p.iter().map(|x| x * c).collect();
        for (a, b) in average(&models, &p).iter().zip(average(&models, &scaled)) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn average_matches_double_loop((models, p) in federation()) {
        let total: f64 = p.iter().sum();
        let out = average(&models, &p);
        for (i, v) in out.iter().enumerate() {
            let mut expect = 0.0;
            for (m, w) in models.iter().zip(&p) {
                expect += w / total * m[i];
            }
            prop_assert!((v - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{v} vs {expect}");
        }
    }
}

fn regression(d: usize, n: usize, sigma: f64, seed: u64) -> Dataset {
    let spec = SyntheticTaskSpec {
        input_dim: d,
        true_weight_seed: seed ^ 0x55,
        noise_sigma: sigma,
        target_low: -2.0,
        target_high: 3.0,
    };
    generate_synthetic(&spec, n, seed).unwrap()
}

fn any_spec() -> impl Strategy<Value = ModelSpec> {
    (1usize..6, prop::collection::vec(1usize..6, 0..3)).prop_map(|(d, hidden)| {
        if hidden.is_empty() {
            ModelSpec::linear(d)
        } else {
            ModelSpec::mlp(d, hidden)
        }
    })
}

proptest! {
    #[test]
    fn metric_identities(spec in any_spec(), n in 1usize..40, seed in any::<u64>()) {
        let data = regression(spec.input_dim, n, 0.3, seed);
        let m = evaluate(&spec, &init_model(&spec, seed), &data).unwrap();
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-12 * m.mse.max(f64::MIN_POSITIVE));
        prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12), "mae {} rmse {}", m.mae, m.rmse);
        prop_assert!((-1.0..=1.0).contains(&m.corr));
    }

    #[test]
    fn forward_is_bitwise_deterministic(spec in any_spec(), seed in any::<u64>()) {
        let data = regression(spec.input_dim, 16, 0.3, seed);
        let p = init_model(&spec, seed);
        let a = forward(&spec, &p, data.features()).unwrap();
        let b = forward(&spec, &p, data.features()).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn one_epoch_lowers_noiseless_1d_mse(seed in any::<u64>(), n in 8usize..80) {
        let spec = ModelSpec::linear(1);
        let data = regression(1, n, 0.0, seed);
        let learner = Learner::new(0, spec.clone(), data.clone(), Clock::simulated_secs(0.1)).unwrap();
        let start = init_model(&spec, seed);
        let before = loss(&spec, &start, &data).unwrap();
        let update = learner.execute(&task(start, n as u64, 0.01, 1, seed)).unwrap();
        let after = loss(&spec, &update.params, &data).unwrap();
        prop_assert!(after < before, "{after} >= {before}");
    }
}

fn task(
    community: ParameterVector,
    batches: u64,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> TaskAssignment {
    TaskAssignment {
        round: 1,
        community,
        num_batches: batches,
        hyperparams: Hyperparams {
            learning_rate: lr,
            batch_size,
            seed,
        },
    }
}

proptest! {
    #[test]
    fn learner_does_exactly_the_assigned_work(n in 1usize..50, batches in 1u64..200, beta in 1usize..8, seed in any::<u64>()) {
        let spec = ModelSpec::mlp(3, vec![4]);
        let learner = Learner::new(2, spec.clone(), regression(3, n, 0.1, seed), Clock::simulated_secs(0.25)).unwrap();
        let t = task(init_model(&spec, 1), batches, 0.001, beta, seed);
        let a = learner.execute(&t).unwrap();
        let b = learner.execute(&t).unwrap();
        prop_assert_eq!(a.batches_executed, batches);
        prop_assert_eq!(a.busy_time, batches as f64 * 0.25);
        prop_assert!(a.params.values().iter().zip(b.params.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn many_epochs_do_not_raise_noiseless_mse(n in 4usize..40, epochs in 1u64..5, seed in any::<u64>()) {
        let spec = ModelSpec::linear(3);
        let data = regression(3, n, 0.0, seed);
        let learner = Learner::new(0, spec.clone(), data.clone(), Clock::simulated_secs(0.1)).unwrap();
        let start = init_model(&spec, seed);
        let before = loss(&spec, &start, &data).unwrap();
        let update = learner.execute(&task(start, epochs * n as u64, 0.005, 1, seed)).unwrap();
        prop_assert!(loss(&spec, &update.params, &data).unwrap() <= before);
    }
}

fn plan_for(scheme: Scheme, learners: usize, seed: u64) -> PartitionPlan {
    match scheme {
        Scheme::SkewedNoniid => {
            // Decreasing fractions, normalized to sum to one.
            let raw: Vec<f64> = (0..learners).map(|k| (learners - k) as f64).collect();
            let total: f64 = raw.iter().sum();
            PartitionPlan::skewed(raw.iter().map(|r| r / total).collect(), seed)
        }
        s => PartitionPlan::new(s, learners, seed),
    }
}

fn any_scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::UniformIid),
        Just(Scheme::UniformNoniid),
        Just(Scheme::SkewedNoniid)
    ]
}

proptest! {
    #[test]
    fn shards_are_a_permutation_of_rows(scheme in any_scheme(), learners in 1usize..9, extra in 0usize..200, seed in any::<u64>()) {
        let n = learners * 4 + extra;
        let data = regression(2, n, 0.2, seed);
        let shards = partition(&data, &plan_for(scheme, learners, seed)).unwrap();
        prop_assert_eq!(shards.len(), learners);
        let mut rows: Vec<usize> = shards.iter().flat_map(|s| s.rows.iter().copied()).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..n).collect::<Vec<_>>());
        for s in &shards {
            for (j, &r) in s.rows.iter().enumerate() {
                prop_assert_eq!(s.data.row(j), data.row(r));
            }
        }
    }

    #[test]
    fn noniid_shards_cover_narrow_target_ranges(learners in 4usize..9, n in 200usize..600, seed in any::<u64>()) {
        let data = regression(3, n, 0.2, seed);
        let t = data.targets();
        let width = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            hi - lo
        };
        let global = width(&mut t.iter().copied());
        for s in partition(&data, &PartitionPlan::new(Scheme::UniformNoniid, learners, seed)).unwrap() {
            let w = width(&mut s.data.targets().iter().copied());
            prop_assert!(w < global / 2.0, "learner {}: {w} vs global {global}", s.learner_index);
        }
    }

    #[test]
    fn skewed_sizes_follow_quota_rule(learners in 1usize..9, n in 50usize..5000, seed in any::<u64>()) {
        let plan = plan_for(Scheme::SkewedNoniid, learners, seed);
        let mut expect: Vec<i64> = plan.size_fractions.iter().map(|f| (f * n as f64).round() as i64).collect();
        // Fractions decrease, so learner 0 holds the largest quota and absorbs the residual.
        expect[0] += n as i64 - expect.iter().sum::<i64>();
        let expect: Vec<usize> = expect.into_iter().map(|s| s as usize).collect();
        let data = regression(2, n, 0.2, seed);
        let got: Vec<usize> = partition(&data, &plan).unwrap().iter().map(|s| s.rows.len()).collect();
        prop_assert_eq!(got, expect);
    }
}

#[test]
fn iid_shard_means_match_global_mean() {
    let n = 8000;
    let data = regression(4, n, 0.5, 1990);
    let t = data.targets();
    let mean = t.iter().sum::<f64>() / n as f64;
    let sd = (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    for s in partition(&data, &PartitionPlan::new(Scheme::UniformIid, 8, 1990)).unwrap() {
        let m = s.data.targets().iter().sum::<f64>() / s.rows.len() as f64;
        let se = sd / (s.rows.len() as f64).sqrt();
        assert!(
            (m - mean).abs() < 3.0 * se,
            "learner {}: {m} vs {mean}",
            s.learner_index
        );
    }
}

fn profiles(sizes: &[usize], times: &[f64]) -> Vec<LearnerProfile> {
    sizes
        .iter()
        .zip(times)
        .enumerate()
        .map(|(k, (&n, &t))| LearnerProfile {
            learner_index: k as u16,
            num_examples: n,
            batch_size: 1,
            batch_time: t,
        })
        .collect()
}

fn batches(policy: Policy, p: &[LearnerProfile]) -> Vec<u64> {
    policy
        .plan(p)
        .unwrap()
        .allocations
        .iter()
        .map(|a| a.num_batches)
        .collect()
}

fn fleet() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(1usize..5000, n),
            prop::collection::vec(0.001..2.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn semisync_gives_equal_batches_for_equal_batch_times((sizes, _) in fleet(), t in 0.001..2.0f64, lambda in 0.1..8.0f64) {
        let b = batches(Policy::SemiSync { lambda }, &profiles(&sizes, &vec![t; sizes.len()]));
        prop_assert!(b.iter().all(|&x| x == b[0]), "{b:?}");
    }

    #[test]
    fn semisync_idle_is_under_one_batch((sizes, times) in fleet(), lambda in 0.5..8.0f64) {
        let p = profiles(&sizes, &times);
        let plan = Policy::SemiSync { lambda }.plan(&p).unwrap();
        // Skip plans clamped to one batch, where a learner's one batch outlasts t_max.
        prop_assume!(p.iter().all(|x| plan.t_max.unwrap() >= x.batch_time));
        for (idle, x) in idle_time(&p, &plan).unwrap().iter().zip(&p) {
            prop_assert!(*idle < x.batch_time, "idle {idle} vs batch {}", x.batch_time);
        }
    }

    #[test]
    fn doubling_lambda_doubles_batches((sizes, times) in fleet(), lambda in 0.5..8.0f64) {
        let p = profiles(&sizes, &times);
        let one = batches(Policy::SemiSync { lambda }, &p);
        let two = batches(Policy::SemiSync { lambda: 2.0 * lambda }, &p);
        for (a, b) in one.iter().zip(&two) {
            prop_assert!((*b as i64 - 2 * *a as i64).abs() <= 1, "{a} -> {b}");
        }
    }

    #[test]
    fn sync_uniform_fleet_gets_equal_batches(n in 1usize..5000, learners in 1usize..9, e in 1u32..8) {
        let b = batches(Policy::Sync { local_epochs: e }, &profiles(&vec![n; learners], &vec![0.1; learners]));
        prop_assert!(b.iter().all(|&x| x == n as u64 * u64::from(e)));
    }

    #[test]
    fn slower_epochs_never_shrink_tmax((sizes, times) in fleet(), k in any::<prop::sample::Index>(), grow in 1usize..1000, lambda in 0.1..8.0f64) {
        let p = profiles(&sizes, &times);
        let mut q = p.clone();
        let i = k.index(q.len());
        q[i].num_examples += grow;
        prop_assert!(compute_tmax(&q, lambda).unwrap() >= compute_tmax(&p, lambda).unwrap());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Register(u16),
    Calibrate(u16),
    Start,
    Update(u16),
    Complete,
    Finish,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u16..4).prop_map(Op::Register),
        (0u16..4).prop_map(Op::Calibrate),
        Just(Op::Start),
        (0u16..4).prop_map(Op::Update),
        Just(Op::Complete),
        Just(Op::Finish),
    ]
}

const N: usize = 3;

fn update_for(k: u16, round: u32, params: &ParameterVector, batches: u64) -> LocalUpdate {
    LocalUpdate {
        learner_index: k,
        round,
        params: params.clone(),
        num_examples: 10 + usize::from(k),
        batch_time: 0.1,
        busy_time: batches as f64 * 0.1,
        batches_executed: batches,
    }
}

proptest! {
    /// Random call sequences against a reference model of which calls are
    /// legal in which phase.
    #[test]
    fn controller_rejects_illegal_transitions(ops in prop::collection::vec(op(), 1..60)) {
        let spec = ModelSpec::linear(2);
        let data = regression(2, 20, 0.1, 4);
        let hp = Hyperparams { learning_rate: 0.01, batch_size: 1, seed: 1 };
        let mut st = FederationState::new(spec.clone(), init_model(&spec, 1), Policy::Sync { local_epochs: 2 }, hp, N).unwrap();
        let layout = st.community().layout().to_vec();
        let mut registered = std::collections::BTreeSet::new();
        let mut calibrated = std::collections::BTreeSet::new();
        let mut reported = std::collections::BTreeSet::new();
        let mut rounds = 0u32;
        let mut plan: Vec<u64> = Vec::new();

        for op in ops {
            let phase = st.phase();
            match op {
                Op::Register(k) => {
                    let r = st.register_learner(Registration { learner_index: k, num_examples: 10 + usize::from(k), batch_size: 1 });
                    let legal = phase == Phase::AwaitingRegistration && usize::from(k) < N && !registered.contains(&k);
                    prop_assert_eq!(r.is_ok(), legal, "{:?} in {:?}", op, phase);
                    if legal {
                        registered.insert(k);
                    }
                }
                Op::Calibrate(k) => {
                    let r = st.receive_calibration(k, 0.1);
                    let legal = phase == Phase::Calibrating && registered.contains(&k) && !calibrated.contains(&k);
                    prop_assert_eq!(r.is_ok(), legal, "{:?} in {:?}", op, phase);
                    if legal {
                        calibrated.insert(k);
                    }
                }
                Op::Start => {
                    let r = st.start_round();
                    prop_assert_eq!(r.is_ok(), phase == Phase::Ready, "{:?} in {:?}", op, phase);
                    if let Ok(tasks) = r {
                        rounds += 1;
                        reported.clear();
                        plan = tasks.iter().map(|(_, t)| t.num_batches).collect();
                        prop_assert_eq!(tasks.len(), N);
                        prop_assert!(tasks.iter().all(|(_, t)| t.round == rounds && t.community.layout() == layout.as_slice()));
                    }
                }
                Op::Update(k) => {
                    let batches = plan.get(usize::from(k)).copied().unwrap_or(1);
                    let r = st.receive_update(update_for(k, rounds, st.community(), batches));
                    let legal = phase == Phase::RoundOpen && usize::from(k) < N && !reported.contains(&k);
                    prop_assert_eq!(r.is_ok(), legal, "{:?} in {:?}", op, phase);
                    if legal {
                        reported.insert(k);
                    }
                }
                Op::Complete => {
                    let r = st.complete_round(&data, 1.0);
                    prop_assert_eq!(r.is_ok(), phase == Phase::Aggregating, "{:?} in {:?}", op, phase);
                    if let Ok(rec) = r {
                        prop_assert_eq!((rec.messages_sent, rec.messages_received), (N as u64, N as u64));
                        prop_assert_eq!(rec.community.layout(), layout.as_slice());
                    }
                }
                Op::Finish => {
                    let r = st.finish();
                    let legal = matches!(phase, Phase::AwaitingRegistration | Phase::Calibrating | Phase::Ready);
                    prop_assert_eq!(r.is_ok(), legal, "{:?} in {:?}", op, phase);
                }
            }
        }
    }
}

fn any_envelope(max: usize) -> impl Strategy<Value = Envelope> {
    (
        prop::sample::select(Kind::ALL.to_vec()),
        any::<u32>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..=max),
    )
        .prop_map(|(kind, round, learner, payload)| Envelope::new(kind, round, learner, payload))
}

proptest! {
    #[test]
    fn codec_round_trips(env in any_envelope(300)) {
        let codec = Codec::default();
        let bytes = codec.encode(&env).unwrap();
        prop_assert_eq!(bytes.len(), env.frame_len());
        prop_assert_eq!(codec.decode(&bytes).unwrap(), env.clone());
        let mut cursor = std::io::Cursor::new(bytes);
        prop_assert_eq!(codec.read_frame(&mut cursor).unwrap(), env);
    }

    #[test]
    fn every_strict_prefix_is_rejected(env in any_envelope(64)) {
        let codec = Codec::default();
        let bytes = codec.encode(&env).unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(codec.decode(&bytes[..cut]).is_err());
            let mut cursor = std::io::Cursor::new(&bytes[..cut]);
            prop_assert!(codec.read_frame(&mut cursor).is_err());
        }
    }

    #[test]
    fn payload_at_the_limit_round_trips(limit in 0usize..2048, kind in prop::sample::select(Kind::ALL.to_vec())) {
        let codec = Codec::with_max_payload(limit);
        let env = Envelope::new(kind, 1, 1, vec![0xa5; limit]);
        prop_assert_eq!(codec.decode(&codec.encode(&env).unwrap()).unwrap(), env);
        let over = Envelope::new(kind, 1, 1, vec![0; limit + 1]);
        prop_assert!(codec.encode(&over).is_err());
    }
}

#[test]
fn default_limit_payload_round_trips() {
    let codec = Codec::default();
    let env = Envelope::new(
        Kind::Community,
        3,
        9,
        vec![0x3c; fedorch_core::transport::DEFAULT_MAX_PAYLOAD],
    );
    let bytes = codec.encode(&env).unwrap();
    assert_eq!(codec.decode(&bytes).unwrap(), env);
}

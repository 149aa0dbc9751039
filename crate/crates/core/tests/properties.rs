use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scout_core::eval::{auc_op, iou, InterestPoint, InterestSequence};
use scout_core::features::{cosine_sim, max_shift_sim, roi_pool, BBox, FeatureTensor};
use scout_core::head::{fine_tune, BaseShot, Budget, FineTuneConfig, HeadParams, RoiSample, SamplePool};
use scout_core::memory::{similarity_weights, VisualMemory};
use scout_core::protocol::{
    decode, encode, BufferedCandidate, CandidateBuffer, FrameDecoder, LinkSchedule, LinkSim, Message, MessageKind,
};

fn flat_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn tensor_with(shape: (usize, usize, usize)) -> impl Strategy<Value = FeatureTensor> {
    let (c, w, h) = shape;
    prop::collection::vec(-1.0f64..1.0, c * w * h)
        .prop_filter("nonzero", |d| d.iter().any(|v| v.abs() > 1e-3))
        .prop_map(move |d| FeatureTensor::new(c, w, h, d).unwrap())
}

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=8, 1usize..=8)
}

fn tensor() -> impl Strategy<Value = FeatureTensor> {
    shape().prop_flat_map(tensor_with)
}

fn tensor_pair() -> impl Strategy<Value = (FeatureTensor, FeatureTensor)> {
    shape().prop_flat_map(|s| (tensor_with(s), tensor_with(s)))
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn shift_sim_of_self_is_one(x in tensor()) {
        prop_assert!((max_shift_sim(&x, &x).unwrap().similarity - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn shift_sim_dominates_plain_cosine((x, m) in tensor_pair()) {
        let s = max_shift_sim(&x, &m).unwrap().similarity;
        prop_assert!(s >= cosine_sim(x.data(), m.data()).unwrap() - 1e-6);
    }

    #[test]
    fn shift_sim_matches_brute_force((x, m) in tensor_pair()) {
        let got = max_shift_sim(&x, &m).unwrap();
        let (_, w, h) = x.shape();
        let mut best = f64::NEG_INFINITY;
        for dy in 0..h {
            for dx in 0..w {
                best = best.max(flat_cos(x.roll(dy, dx).data(), m.data()));
            }
        }
        prop_assert!((got.similarity - best).abs() <= 1e-6, "{} vs {}", got.similarity, best);
        let at = flat_cos(x.roll(got.dy, got.dx).data(), m.data());
        prop_assert!((at - best).abs() <= 1e-6);
    }

    #[test]
    fn cosine_symmetric_and_scale_free((x, m) in tensor_pair(), k in 0.01f64..100.0) {
        let a = cosine_sim(x.data(), m.data()).unwrap();
        let b = cosine_sim(m.data(), x.data()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((cosine_sim(x.data(), x.scaled(k).data()).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn roi_pool_is_pure(x in tensor_with((3, 8, 8)), b in bbox()) {
        let b = b.clip(64.0, 64.0);
        prop_assume!(b.is_some());
        let b = b.unwrap();
        let first = roi_pool(&x, &b, (64, 64), 3).unwrap();
        prop_assert_eq!(first, roi_pool(&x, &b, (64, 64), 3).unwrap());
    }

    #[test]
    fn memory_weights_sum_to_one(sims in prop::collection::vec(-1.0f64..=1.0, 1..12), gain in 0.1f64..10.0) {
        let w = similarity_weights(&sims, gain);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn memory_scores_are_bounded_and_habituate(x in tensor_with((2, 6, 5)), seed in 0u64..1000) {
        let mut mem = VisualMemory::new(10, (2, 6, 5), 5.0, 5.0, seed).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let r = mem.process_frame(&x).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.score));
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(r.score <= last + 1e-9, "{} after {}", r.score, last);
            last = r.score;
        }
    }

    #[test]
    fn reading_a_shift_matches_reading_the_frame(x in tensor_with((3, 8, 8)), dy in 0usize..8, dx in 0usize..8, seed in 0u64..1000) {
        let mut mem = VisualMemory::new(10, (3, 8, 8), 5.0, 5.0, seed).unwrap();
        mem.write(&x).unwrap();
        let a = mem.read(&x).unwrap().confidence;
        let b = mem.read(&x.roll(dy, dx)).unwrap().confidence;
        prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn stored_cube_reads_back_with_zero_score(x in tensor_with((2, 4, 4)), others in prop::collection::vec(tensor_with((2, 4, 4)), 1..6)) {
        let mut cubes = others;
        cubes.push(x.clone());
        let mem = VisualMemory::from_cubes(cubes, 5.0, 5.0).unwrap();
        prop_assert!(mem.read(&x).unwrap().score <= 1e-12);
    }

    #[test]
    fn classifier_is_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
        let head = random_head(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let f: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut rng, 0.1..1.0)).collect();
        let a = head.forward(&f).unwrap().class_scores;
        let scaled: Vec<f64> = f.iter().map(|v| v * k).collect();
        let b = head.forward(&scaled).unwrap().class_scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auc_op_is_monotone_in_delta(flags in prop::collection::vec(any::<bool>(), 1..40), seed in 0u64..1000) {
        prop_assume!(flags.iter().any(|f| *f));
        let seq = sequence(&flags, seed);
        let mut prev = 0.0;
        for k in 0..=40 {
            let delta = 1.0 + k as f64 * 0.25;
            let v = auc_op(&seq, delta).unwrap();
            prop_assert!(v >= prev - 1e-12, "delta {}: {} < {}", delta, v, prev);
            prev = v;
        }
    }

    #[test]
    fn buffer_respects_capacity_and_evicts_the_minimum(cap in 1usize..8, scores in prop::collection::vec(0.0f64..=1.0, 1..60)) {
        let buf = CandidateBuffer::new(cap).unwrap();
        let mut min_at_full: Option<f64> = None;
        for (i, &s) in scores.iter().enumerate() {
            let before = buf.snapshot();
            let evicted = buf.push(cand(i as u64, s)).unwrap();
            prop_assert!(buf.len() <= cap);
            if let Some(e) = evicted {
                let union_min = before.iter().map(|c| c.score).fold(s, f64::min);
                prop_assert_eq!(e.score, union_min);
                prop_assert!(!buf.contains(e.frame_id));
            }
            if buf.len() == cap {
                let m = buf.min_score().unwrap();
                if let Some(prev) = min_at_full {
                    prop_assert!(m >= prev);
                }
                min_at_full = Some(m);
            }
        }
    }

    #[test]
    fn successive_drains_are_globally_sorted(scores in prop::collection::vec(0.0f64..=1.0, 0..40), sizes in prop::collection::vec(1usize..6, 1..10)) {
        let buf = CandidateBuffer::new(64).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            buf.push(cand(i as u64, s)).unwrap();
        }
        let mut all = Vec::new();
        for n in sizes {
            let d = buf.drain_highest(n);
            prop_assert!(d.len() <= n);
            prop_assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
            all.extend(d.into_iter().map(|c| c.score));
        }
        prop_assert!(all.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn codec_round_trips_every_kind(msg in message()) {
        let bytes = encode(&msg).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), msg.clone());
        // byte-at-a-time streaming yields the same message exactly once
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for b in &bytes {
            dec.push(std::slice::from_ref(b));
            while let Some(m) = dec.next_message() {
                got.push(m.unwrap());
            }
        }
        prop_assert_eq!(got, vec![msg]);
    }

    #[test]
    fn truncated_frames_never_surface(msg in message(), cut in 0.0f64..1.0) {
        let bytes = encode(&msg).unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(decode(&bytes[..n]).is_err());
        let mut dec = FrameDecoder::new();
        dec.push(&bytes[..n]);
        prop_assert!(dec.next_message().is_none());
    }

    #[test]
    fn link_delivers_everything_in_order(
        sizes in prop::collection::vec(1usize..2000, 1..20),
        outages in prop::collection::vec((0u64..8_000, 1u64..5_000), 0..4),
        latency in 0u64..200,
        bandwidth in prop::option::of(500.0f64..50_000.0),
    ) {
        let mut start = 0;
        let outages: Vec<(u64, u64)> = outages
            .into_iter()
            .map(|(gap, d)| {
                start += gap;
                let w = (start, start + d);
                start += d;
                w
            })
            .collect();
        let mut link = LinkSim::new(LinkSchedule { outages: outages.clone(), latency_ms: latency, bandwidth_bps: bandwidth, ..LinkSchedule::default() }).unwrap();
        let schedule = link.schedule().clone();
        let mut got = Vec::new();
        let mut t = 0.0;
        for (i, n) in sizes.iter().enumerate() {
            let mut payload = vec![0u8; *n];
            payload[0] = i as u8;
            link.send(payload, t);
            got.extend(link.transfer(t, t + 100.0).unwrap());
            t += 100.0;
        }
        while !link.is_idle() {
            got.extend(link.transfer(t, t + 1000.0).unwrap());
            t += 1000.0;
            prop_assert!(t < 1e7);
        }
        prop_assert_eq!(got.len(), sizes.len());
        for (i, d) in got.iter().enumerate() {
            prop_assert_eq!(d.bytes[0], i as u8);
            prop_assert!(d.arrive_ms >= d.sent_ms);
            prop_assert!(schedule.is_up(d.sent_ms - 1e-9) || schedule.is_up(d.sent_ms));
        }
        prop_assert!(got.windows(2).all(|w| w[0].arrive_ms <= w[1].arrive_ms));
    }
}

#[test]
fn memory_stays_finite_under_many_writes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mem = VisualMemory::new(10, (2, 4, 4), 5.0, 5.0, 0).unwrap();
    let base: Vec<f64> = (0..32).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    for i in 0..10_000 {
        // a mix of repeats and fresh frames drives similarities to the clamp
        let data: Vec<f64> = if i % 3 == 0 {
            (0..32).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()
        } else {
            base.clone()
        };
        mem.write(&FeatureTensor::new(2, 4, 4, data).unwrap()).unwrap();
    }
    assert!(mem.cubes().iter().all(|c| c.data().iter().all(|v| v.is_finite())));
}

#[test]
fn fine_tune_touches_only_the_final_layer() {
    let head = random_head(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pool = SamplePool::new(3, 3).unwrap();
    pool.base_shots = (0..3)
        .map(|c| BaseShot {
            class_id: c,
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            samples: (0..4)
                .map(|_| RoiSample {
                    feature: (0..6).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect(),
                    label: if c == 2 { None } else { Some(c) },
                    box_target: (c != 2).then_some([0.1, -0.1, 0.05, 0.0]),
                })
                .collect(),
        })
        .collect();
    let frozen = format!("{pool:?}");
    let cfg = FineTuneConfig {
        budget: Budget::Steps(30),
        ..FineTuneConfig::default()
    };
    let out = fine_tune(&head, &pool, &cfg, &mut rng).unwrap();
    assert_eq!(format!("{pool:?}"), frozen);
    let p = out.params;
    assert_eq!(
        (p.dim(), p.alpha(), p.n_base(), p.class_names()),
        (head.dim(), head.alpha(), head.n_base(), head.class_names())
    );
    assert_eq!(p.version(), head.version() + 1);
    assert_ne!(p.trainables(), head.trainables());

    let mut copy = random_head(99, 6);
    copy.apply_delta(&p.snapshot_delta()).unwrap();
    assert_eq!(copy, p);
}

fn random_head(seed: u64, dim: usize) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<(String, Vec<Vec<f64>>)> = (0..3)
        .map(|c| {
            let feats = (0..3)
                .map(|_| (0..dim).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect())
                .collect();
            (format!("class{c}"), feats)
        })
        .collect();
    HeadParams::init(&base, dim, 20.0, seed).unwrap()
}

fn sequence(flags: &[bool], seed: u64) -> InterestSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| InterestPoint {
            frame_id: i as u64,
            score: rand::Rng::random_range(&mut rng, 0.0..1.0),
            interesting: f,
        })
        .collect();
    InterestSequence::new(points).unwrap()
}

fn cand(frame_id: u64, score: f64) -> BufferedCandidate {
    BufferedCandidate {
        frame_id,
        score,
        t_ms: frame_id,
        payload: vec![frame_id as u8],
    }
}

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_ ]{0,11}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn message() -> impl Strategy<Value = Message> {
    let kind = prop::sample::select(MessageKind::ALL.to_vec());
    prop_oneof![
        (name(), name(), any::<u64>()).prop_map(|(node, mission_id, head_version)| Message::Hello {
            node,
            mission_id,
            head_version
        }),
        (
            any::<u64>(),
            0.0f64..=1.0,
            any::<u64>(),
            prop::collection::vec(any::<u8>(), 0..300)
        )
            .prop_map(|(frame_id, score, t_ms, image)| Message::Candidate {
                frame_id,
                score,
                t_ms,
                image
            }),
        any::<u64>().prop_map(|frame_id| Message::FeedbackUninteresting { frame_id }),
        (any::<u64>(), name(), prop::collection::vec(bbox(), 1..4)).prop_map(|(frame_id, class_name, boxes)| {
            Message::FeedbackAnnotation {
                frame_id,
                class_name,
                boxes,
            }
        }),
        (0u64..1000, 1usize..8).prop_map(|(seed, dim)| {
            let mut head = random_head(seed, dim);
            let shot: Vec<f64> = (0..dim).map(|i| (i + 1) as f64).collect();
            head.register_novel_class("novel", &shot).unwrap();
            Message::ParamUpdate(head.snapshot_delta())
        }),
        (kind, prop::option::of(any::<u64>()), prop::option::of(any::<u64>())).prop_map(
            |(acked, frame_id, version)| {
                Message::Ack {
                    acked,
                    frame_id,
                    version,
                }
            }
        ),
    ]
}

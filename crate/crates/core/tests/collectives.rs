use gsync::collectives::*;
use gsync::profile::Precision;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(seed: u64, n: usize, len: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect()
}

// A ring with whole-segment chunks, simulated directly on arrays: member m
// sends segment (m - s) mod n at reduce-scatter step s.
fn brute_ring_reduce_scatter(inputs: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let n = inputs.len();
    let len = inputs[0].len();
    let seg = |k: usize| {
        let base = len / n;
        let extra = len % n;
        let start = k * base + k.min(extra);
        start..start + base + usize::from(k < extra)
    };
    let mut bufs = inputs.to_vec();
    for s in 0..n - 1 {
        let sent: Vec<(usize, Vec<f32>)> = (0..n)
            .map(|m| {
                let k = (m + 2 * n - s - 1) % n;
                (k, bufs[m][seg(k)].to_vec())
            })
            .collect();
        for (m, (k, data)) in sent.into_iter().enumerate() {
            let to = (m + 1) % n;
            for (dst, v) in bufs[to][seg(k)].iter_mut().zip(data) {
                *dst += v;
            }
        }
    }
    bufs
}

#[test]
fn four_rank_reduce_scatter_owns_one_segment() {
    let inputs = random_inputs(1, 4, 16);
    let plan = build_ring_schedule(CollectiveKind::Allreduce, 4, 64, 16, 4);
    // Three reduce-scatter plus three allgather steps per segment.
    let steps: std::collections::BTreeSet<usize> = plan.entries.iter().map(|e| e.step).collect();
    assert_eq!(steps.len(), 6);
    assert_eq!(plan.entries.len(), 4 * 6);

    let out = exchange_in_memory(CollectiveKind::ReduceScatter, inputs.clone(), ReduceOp::Sum, Precision::Fp32, 16).unwrap();
    let brute = brute_ring_reduce_scatter(&inputs);
    let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
    let layout = RingLayout::new(CollectiveKind::ReduceScatter, 4, 16, 4);
    for m in 0..4 {
        let r = layout.owned_range(m);
        assert_eq!(r.len(), 4);
        assert_eq!(out.outputs[m], brute[m][r.clone()].to_vec());
        assert!(max_relative_error(&out.outputs[m], &oracle[r]) <= 1e-6);
    }
}

#[test]
fn single_member_schedule_is_empty() {
    let plan = build_ring_schedule(CollectiveKind::Allreduce, 1, 4000, 64, 4);
    assert!(plan.entries.is_empty());
    let input = vec![vec![1.5f32, -2.0, 3.25]];
    let out = exchange_in_memory(CollectiveKind::Allreduce, input.clone(), ReduceOp::Sum, Precision::Fp32, 64).unwrap();
    assert_eq!(out.outputs, input);
    assert_eq!(out.wire_bytes, 0);
}

#[test]
fn byte_chunks_tile_segments() {
    // 10 one-byte elements over 3 members in 4-byte chunks.
    let plan = build_ring_schedule(CollectiveKind::Allreduce, 3, 10, 4, 1);
    let layout = &plan.layout;
    let mut covered = vec![0usize; 10];
    for seg in 0..3 {
        let r = layout.segment_range(seg);
        let chunks: Vec<usize> = (0..layout.chunks_in_segment(seg)).map(|c| layout.chunk_range(seg, c).len()).collect();
        assert_eq!(chunks.iter().sum::<usize>(), r.len());
        assert!(chunks[..chunks.len() - 1].iter().all(|&c| c == 4));
        for c in 0..layout.chunks_in_segment(seg) {
            for i in layout.chunk_range(seg, c) {
                covered[i] += 1;
            }
        }
    }
    assert!(covered.iter().all(|&c| c == 1));
    // Segments differ by at most one element.
    let sizes: Vec<usize> = (0..3).map(|s| layout.segment_range(s).len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    // 4,4,2 needs one segment of ten; the same tiling holds for the whole buffer.
    let whole = build_ring_schedule(CollectiveKind::Broadcast, 2, 10, 4, 1);
    let lens: Vec<usize> = whole.entries.iter().filter(|e| e.member == 0).map(|e| e.length).collect();
    assert_eq!(lens, vec![4, 4, 2]);
}

#[test]
fn schedule_neighbors_follow_ring_order() {
    let plan = build_ring_schedule(CollectiveKind::Allreduce, 5, 4000, 256, 4);
    for e in &plan.entries {
        assert_eq!(e.send_to, (e.member + 1) % 5);
        assert_eq!(e.recv_from, (e.member + 4) % 5);
    }
    for m in 0..5 {
        let per_step: Vec<usize> = plan.for_member(m).map(|e| e.step).collect();
        assert!(per_step.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*per_step.last().unwrap(), 7);
    }
}

#[test]
fn reduce_examples() {
    let mut a = vec![1.0f32, 2.0];
    reduce_elementwise(ReduceOp::Sum, &mut a, &[3.0, 4.0]).unwrap();
    assert_eq!(a, vec![4.0, 6.0]);
    let mut a = vec![1.0f32, 5.0];
    reduce_elementwise(ReduceOp::Max, &mut a, &[2.0, 3.0]).unwrap();
    assert_eq!(a, vec![2.0, 5.0]);
    let mut a = vec![1.0f32, 5.0];
    reduce_elementwise(ReduceOp::Min, &mut a, &[2.0, 3.0]).unwrap();
    assert_eq!(a, vec![1.0, 3.0]);
    assert!(matches!(
        reduce_elementwise(ReduceOp::Sum, &mut a, &[1.0]),
        Err(CollectiveError::LengthMismatch { .. })
    ));
}

#[test]
fn ring_order_sum_is_bit_exact() {
    // Segment k is first reduced by member k+1, then k+2, ... ending at k.
    for seed in 0..20 {
        let inputs = random_inputs(seed, 4, 64);
        let out = exchange_in_memory(CollectiveKind::Allreduce, inputs.clone(), ReduceOp::Sum, Precision::Fp32, 64).unwrap();
        let layout = RingLayout::new(CollectiveKind::Allreduce, 4, 64, 64);
        let mut want = vec![0.0f32; 64];
        for k in 0..4 {
            let r = layout.owned_range(k);
            let order: Vec<usize> = (1..=4).map(|j| (k + j) % 4).collect();
            let mut acc: Vec<f32> = inputs[order[0]][r.clone()].to_vec();
            for &m in &order[1..] {
                reduce_elementwise(ReduceOp::Sum, &mut acc, &inputs[m][r.clone()]).unwrap();
            }
            want[r].copy_from_slice(&acc);
        }
        for o in &out.outputs {
            assert_eq!(o, &want);
        }
    }
}

#[test]
fn exhaustive_sizes_match_oracle_and_chunking() {
    for n in [1usize, 2, 3, 4, 5, 8] {
        for len in [1usize, 7, 64, 1000] {
            let inputs = random_inputs((n * 10_000 + len) as u64, n, len);
            let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
            let runs: Vec<_> = [1024, 64 * 1024, len * 4, 4]
                .iter()
                .map(|&cb| exchange_in_memory(CollectiveKind::Allreduce, inputs.clone(), ReduceOp::Sum, Precision::Fp32, cb).unwrap())
                .collect();
            for r in &runs {
                assert_eq!(r.outputs, runs[0].outputs, "n={n} len={len}");
                for o in &r.outputs {
                    assert!(max_relative_error(o, &oracle) <= 1e-6);
                }
                // Each of the 2(n-1) steps moves every segment once across the ring.
                assert_eq!(r.wire_bytes, 2 * (n - 1) * len * 4);
            }
            let again = exchange_in_memory(CollectiveKind::Allreduce, inputs, ReduceOp::Sum, Precision::Fp32, 1024).unwrap();
            assert_eq!(again.outputs, runs[0].outputs);
        }
    }
}

#[test]
fn max_and_min_allreduce() {
    let inputs = random_inputs(9, 5, 333);
    for op in [ReduceOp::Max, ReduceOp::Min] {
        let out = exchange_in_memory(CollectiveKind::Allreduce, inputs.clone(), op, Precision::Fp32, 128).unwrap();
        let want = allreduce_oracle(&inputs, op).unwrap();
        for o in &out.outputs {
            assert_eq!(o, &want);
        }
    }
}

#[test]
fn quantize_examples() {
    let z = quantize_chunk(&[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(z.payload, vec![0, 0, 0]);
    assert_eq!(z.scale, 0.0);
    assert_eq!(dequantize_chunk(&z), vec![0.0; 3]);

    let q = quantize_chunk(&[-1.0, 0.5, 1.0]).unwrap();
    assert_eq!(q.scale, 1.0 / 127.0);
    assert_eq!(q.payload, vec![-127, 64, 127]);
    let d = dequantize_chunk(&q);
    assert!((d[1] - 64.0 / 127.0).abs() < 1e-7);
    assert!((d[1] - 0.5).abs() <= q.scale / 2.0 * (1.0 + f32::EPSILON));

    assert!(matches!(quantize_chunk(&[1.0, f32::NAN]), Err(CollectiveError::NonFinite)));
    assert!(matches!(quantize_chunk(&[f32::INFINITY]), Err(CollectiveError::NonFinite)));

    let v = &random_inputs(4, 1, 1000)[0];
    let q = quantize_chunk(v).unwrap();
    let err = v.iter().zip(dequantize_chunk(&q)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err <= 0.5 / 127.0 + 1e-7, "{err}");
}

#[test]
fn oracle_examples() {
    let one = random_inputs(2, 1, 10);
    assert_eq!(allreduce_oracle(&one, ReduceOp::Sum).unwrap(), one[0]);
    assert_eq!(allreduce_oracle(&vec![vec![1.0; 8]; 4], ReduceOp::Sum).unwrap(), vec![4.0; 8]);
    assert!(allreduce_oracle(&[vec![1.0], vec![]], ReduceOp::Sum).is_err());
}

proptest! {
    #[test]
    fn int8_allreduce_within_bound(seed in any::<u64>(), n in 2usize..=8, len in 1usize..600, chunk in 1usize..512) {
        let inputs = random_inputs(seed, n, len);
        let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
        let out = exchange_in_memory(CollectiveKind::Allreduce, inputs, ReduceOp::Sum, Precision::Int8, chunk * 4).unwrap();
        let bound = n as f64 * out.max_partial_abs as f64 / 127.0;
        for o in &out.outputs {
            prop_assert!(max_abs_error(o, &oracle) <= bound);
        }
        prop_assert_eq!(out.wire_bytes, 2 * (n - 1) * len);
    }

    #[test]
    fn fp16_allreduce_close(seed in any::<u64>(), n in 2usize..=8, len in 1usize..300) {
        let inputs = random_inputs(seed, n, len);
        let oracle = allreduce_oracle(&inputs, ReduceOp::Sum).unwrap();
        let out = exchange_in_memory(CollectiveKind::Allreduce, inputs, ReduceOp::Sum, Precision::Fp16, 256).unwrap();
        let bound = (n * n) as f64 * 2f64.powi(-10);
        for o in &out.outputs {
            prop_assert!(max_abs_error(o, &oracle) <= bound);
        }
    }

    #[test]
    fn allgather_and_broadcast(seed in any::<u64>(), n in 1usize..=6, len in 0usize..200, chunk in 1usize..64) {
        let inputs = random_inputs(seed, n, len);
        let bc = exchange_in_memory(CollectiveKind::Broadcast, inputs.clone(), ReduceOp::Sum, Precision::Fp32, chunk * 4).unwrap();
        for o in &bc.outputs {
            prop_assert_eq!(o, &inputs[0]);
        }
        let ag = exchange_in_memory(CollectiveKind::Allgather, inputs.clone(), ReduceOp::Sum, Precision::Fp32, chunk * 4).unwrap();
        let layout = RingLayout::new(CollectiveKind::Allgather, n, len, chunk);
        let mut want = vec![0.0f32; len];
        for (m, inp) in inputs.iter().enumerate() {
            let r = layout.owned_range(m);
            want[r.clone()].copy_from_slice(&inp[r]);
        }
        for o in &ag.outputs {
            prop_assert_eq!(o, &want);
        }
    }
}

#[test]
fn group_validation() {
    assert!(CommGroup::new(vec![0, 1, 1], 0).is_err());
    assert!(CommGroup::new(vec![0, 2], 1).is_err());
    let g = CommGroup::new(vec![4, 5, 6], 5).unwrap();
    assert_eq!((g.my_index(), g.right(), g.left()), (1, 6, 4));
    assert_eq!(CommGroup::singleton(3).size(), 1);
}

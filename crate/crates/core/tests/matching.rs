use freqdet_core::boxes::{inner_iou, Bbox, BoxSet};
use freqdet_core::head::{average_precision, decode, hungarian, match_cost, CostMatrix, CostWeights};
use freqdet_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum over all injective row → column maps (rows ≤ cols after transposing).
fn exhaustive_min(c: &CostMatrix) -> f64 {
    let c = if c.rows > c.cols { c.transpose() } else { c.clone() };
    fn go(c: &CostMatrix, row: usize, used: u32, acc: f64) -> f64 {
        if row == c.rows {
            return acc;
        }
        (0..c.cols)
            .filter(|j| used & (1 << j) == 0)
            .map(|j| go(c, row + 1, used | (1 << j), acc + c.at(row, j)))
            .fold(f64::INFINITY, f64::min)
    }
    go(&c, 0, 0, 0.0)
}

fn arb_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=7, 1usize..=7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| CostMatrix::new(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hungarian_is_optimal(m in arb_matrix()) {
        let pairs = hungarian(&m).unwrap();
        prop_assert_eq!(pairs.len(), m.rows.min(m.cols));
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(rows.len(), pairs.len());
        prop_assert_eq!(cols.len(), pairs.len());
        let total: f64 = pairs.iter().map(|&(r, c)| m.at(r, c)).sum();
        prop_assert!((total - exhaustive_min(&m)).abs() < 1e-9);
    }

    #[test]
    fn integer_costs_match_exactly(r in 1usize..=7, c in 1usize..=7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = CostMatrix::from_fn(r, c, |_, _| 0.0);
        let m = CostMatrix::new(r, c, m.data.iter().map(|_| rng.gen_range(0..100) as f64).collect()).unwrap();
        let total: f64 = hungarian(&m).unwrap().iter().map(|&(i, j)| m.at(i, j)).sum();
        prop_assert_eq!(total, exhaustive_min(&m));
    }
}

fn random_predictions(rng: &mut ChaCha8Rng, k: usize, q: usize) -> (Tensor<f64>, Tensor<f64>) {
    let logits = Tensor::from_fn((1, k, q, 1), |_, _, _, _| rng.gen_range(-3.0..3.0));
    let boxes = Tensor::from_fn((1, 4, q, 1), |_, j, _, _| if j < 2 { rng.gen_range(0.1..0.9) } else { rng.gen_range(0.05..0.3) });
    (logits, boxes)
}

#[test]
fn match_cost_matches_per_entry_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (logits, boxes) = random_predictions(&mut rng, 3, 10);
    let gt = BoxSet::new(
        (0..4).map(|_| Bbox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), 0.1, 0.2)).collect(),
        vec![0, 2, 1, 2],
    )
    .unwrap();
    let w = CostWeights::default();
    let c = match_cost(&logits, &boxes, 0, &gt, w, 1.25).unwrap();
    for q in 0..10 {
        for g in 0..4 {
            let p = 1.0 / (1.0 + (-logits.at(0, gt.classes[g], q, 0)).exp());
            let pb = Bbox::new(boxes.at(0, 0, q, 0), boxes.at(0, 1, q, 0), boxes.at(0, 2, q, 0), boxes.at(0, 3, q, 0));
            let gb = gt.boxes[g];
            let l1 = (pb.cx - gb.cx).abs() + (pb.cy - gb.cy).abs() + (pb.w - gb.w).abs() + (pb.h - gb.h).abs();
            let expect = 2.0 * (1.0 - p) + 5.0 * l1 + 2.0 * (1.0 - inner_iou(pb, gb, 1.25));
            assert!((c.at(q, g) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn perfect_prediction_dominates_its_row_and_column() {
    let gt = BoxSet::new(vec![Bbox::new(0.3, 0.3, 0.1, 0.1), Bbox::new(0.7, 0.6, 0.2, 0.1)], vec![0, 1]).unwrap();
    let logits = Tensor::from_fn((1, 2, 3, 1), |_, c, q, _| if (q, c) == (1, 1) { 8.0 } else { -2.0 });
    let boxes = Tensor::from_fn((1, 4, 3, 1), |_, j, q, _| match q {
        1 => gt.boxes[1].to_array()[j],
        _ => [0.5, 0.5, 0.3, 0.3][j],
    });
    let c = match_cost(&logits, &boxes, 0, &gt, CostWeights::default(), 1.25).unwrap();
    for q in [0, 2] {
        assert!(c.at(1, 1) < c.at(q, 1));
    }
    assert!(c.at(1, 1) < c.at(1, 0));
}

#[test]
fn decode_is_suppression_free_and_stably_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (logits, boxes) = random_predictions(&mut rng, 3, 64);
        let all = decode(&logits, &boxes, 0, 0.0).unwrap();
        assert_eq!(all.len(), 64);
        // Oracle: best score per query, then a stable sort on descending score.
        let mut oracle: Vec<(usize, f64)> = (0..64)
            .map(|q| {
                let best = (0..3).map(|c| logits.at(0, c, q, 0)).fold(f64::NEG_INFINITY, f64::max);
                (q, 1.0 / (1.0 + (-best).exp()))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (i, (q, s)) in oracle.iter().enumerate() {
            assert!((all.scores[i] - s).abs() < 1e-15);
            assert_eq!(all.boxes[i].cx, boxes.at(0, 0, *q, 0));
        }
        let half = decode(&logits, &boxes, 0, 0.5).unwrap();
        assert_eq!(half.len(), oracle.iter().filter(|o| o.1 >= 0.5).count());
    }
}

fn jittered(gt: &BoxSet, rng: &mut ChaCha8Rng) -> BoxSet {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for (b, &c) in gt.boxes.iter().zip(&gt.classes) {
        for _ in 0..rng.gen_range(0..3) {
            boxes.push(Bbox::new(
                b.cx + rng.gen_range(-0.03..0.03),
                b.cy + rng.gen_range(-0.03..0.03),
                b.w * rng.gen_range(0.7..1.3),
                b.h * rng.gen_range(0.7..1.3),
            ));
            classes.push(if rng.gen_bool(0.8) { c } else { (c + 1) % 3 });
            scores.push(rng.gen_range(0.0..1.0));
        }
    }
    BoxSet::scored(boxes, classes, scores).unwrap()
}

#[test]
fn ap_non_increasing_in_iou_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let gts: Vec<BoxSet> = (0..3)
            .map(|_| {
                let n = rng.gen_range(1..6);
                BoxSet::new(
                    (0..n)
                        .map(|_| Bbox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2)))
                        .collect(),
                    (0..n).map(|_| rng.gen_range(0..3)).collect(),
                )
                .unwrap()
            })
            .collect();
        let dets: Vec<BoxSet> = gts.iter().map(|g| jittered(g, &mut rng)).collect();
        let mut prev = f64::INFINITY;
        for t in 0..10 {
            let ap = average_precision(&dets, &gts, 0.5 + 0.05 * t as f64).unwrap();
            assert!((0.0..=1.0).contains(&ap));
            assert!(ap <= prev + 1e-12, "AP rose from {prev} to {ap}");
            prev = ap;
        }
    }
}

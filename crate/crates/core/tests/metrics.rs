use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavetrunk::metrics::*;
use wavetrunk::ndgrad::Array;

/// Brute-force ranking oracle: fully sort class indices by (logit desc,
/// index asc) and find the label's position.
fn oracle_rank(row: &[f64], label: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == label).unwrap() + 1
}

fn random_case(rng: &mut ChaCha8Rng) -> (Array<f64>, Vec<usize>) {
    let b = rng.gen_range(1..20);
    let c = rng.gen_range(5..12);
    // coarse values force plenty of ties
    let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(0..4) as f64).collect();
    let labels = (0..b).map(|_| rng.gen_range(0..c)).collect();
    (Array::new(vec![b, c], data).unwrap(), labels)
}

#[test]
fn agrees_with_brute_force_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (l, labels) = random_case(&mut rng);
        let c = l.dim(1);
        let ranks: Vec<usize> = l.data().chunks(c).zip(&labels).map(|(r, &y)| oracle_rank(r, y)).collect();
        let n = ranks.len() as f64;
        for k in [1, 3, 5] {
            let expect = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
            assert_eq!(top_k_accuracy(&l, &labels, k).unwrap(), expect);
        }
        let expect: f64 = ranks.iter().map(|&r| if r <= 3 { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / n;
        assert_eq!(map_at_3(&l, &labels).unwrap(), expect);
    }
}

#[test]
fn random_logits_match_expectations() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (b, c) = (100_000, 41);
    let data: Vec<f64> = (0..b * c).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let l = Array::new(vec![b, c], data).unwrap();
    let expect = (1.0 + 0.5 + 1.0 / 3.0) / 41.0;
    assert!((map_at_3(&l, &labels).unwrap() - expect).abs() < 0.005);

    let (b, c) = (1000, 10);
    let data: Vec<f64> = (0..b * c).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let top1 = top_k_accuracy(&Array::new(vec![b, c], data).unwrap(), &labels, 1).unwrap();
    assert!((top1 - 0.1).abs() < 0.03, "{top1}");
}

#[test]
fn one_hot_logits_are_perfect() {
    let labels = [2usize, 0, 4, 1];
    let mut data = vec![0.0; 4 * 5];
    for (i, &y) in labels.iter().enumerate() {
        data[i * 5 + y] = 1.0;
    }
    let l = Array::new(vec![4, 5], data).unwrap();
    assert_eq!(top_k_accuracy(&l, &labels, 1).unwrap(), 1.0);
    assert_eq!(map_at_3(&l, &labels).unwrap(), 1.0);
}

fn case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
    (3usize..8, 1usize..15).prop_flat_map(|(c, b)| {
        (Just(c), prop::collection::vec(-3.0f64..3.0, b * c), prop::collection::vec(0..c, b))
    })
}

proptest! {
    #[test]
    fn rank_metrics_ignore_monotone_transforms((c, data, labels) in case()) {
        let b = labels.len();
        let l = Array::new(vec![b, c], data.clone()).unwrap();
        let t = Array::new(vec![b, c], data.iter().map(|x| x.exp() * 3.0 - 1.0).collect()).unwrap();
        prop_assert_eq!(map_at_3(&l, &labels).unwrap(), map_at_3(&t, &labels).unwrap());
        prop_assert_eq!(top_k_accuracy(&l, &labels, 1).unwrap(), top_k_accuracy(&t, &labels, 1).unwrap());
    }

    #[test]
    fn map_lies_between_bounds((c, data, labels) in case()) {
        let l = Array::new(vec![labels.len(), c], data).unwrap();
        let map = map_at_3(&l, &labels).unwrap();
        let top1 = top_k_accuracy(&l, &labels, 1).unwrap();
        prop_assert!(top1 <= map + 1e-15 && map <= 1.0);
        prop_assert!(map <= top1 + (1.0 - top1) / 2.0 + 1e-15);
        if c >= 5 {
            prop_assert!(top1 <= top_k_accuracy(&l, &labels, 5).unwrap());
        }
    }

    #[test]
    fn concatenation_is_weighted_average((c, d1, l1) in case(), extra in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d2: Vec<f64> = (0..extra * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let l2: Vec<usize> = (0..extra).map(|_| rng.gen_range(0..c)).collect();
        let a = Array::new(vec![l1.len(), c], d1.clone()).unwrap();
        let b = Array::new(vec![extra, c], d2.clone()).unwrap();
        let both = Array::new(vec![l1.len() + extra, c], [d1, d2].concat()).unwrap();
        let labels = [l1.clone(), l2.clone()].concat();
        let (n1, n2) = (l1.len() as f64, extra as f64);
        let avg = (map_at_3(&a, &l1).unwrap() * n1 + map_at_3(&b, &l2).unwrap() * n2) / (n1 + n2);
        prop_assert!((map_at_3(&both, &labels).unwrap() - avg).abs() < 1e-12);
        let avg1 = (top_k_accuracy(&a, &l1, 1).unwrap() * n1 + top_k_accuracy(&b, &l2, 1).unwrap() * n2) / (n1 + n2);
        prop_assert!((top_k_accuracy(&both, &labels, 1).unwrap() - avg1).abs() < 1e-12);
    }
}

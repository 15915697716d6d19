use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regressformer::data::*;
use regressformer::decoding::*;
use regressformer::evaluation::*;
use regressformer::masking::*;
use regressformer::tokenizer::*;

fn decimal() -> impl Strategy<Value = Decimal> {
    (0u32..=3).prop_flat_map(|scale| {
        let bound = 1000 * 10i64.pow(scale);
        (-bound + 1..bound).prop_map(move |m| Decimal::new(m, scale))
    })
}

fn permutation(max_len: usize) -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1..=max_len).prop_flat_map(|n| (Just((0..n).collect::<Vec<_>>()).prop_shuffle(), 0..=n))
}

fn qed_vocab() -> Vocabulary {
    Vocabulary::new(Schema::new(vec![PropertySchema::new("qed", 1, 3)]), ["A", "B", "C", "[Cl]"]).unwrap()
}

proptest! {
    #[test]
    fn numbers_round_trip(d in decimal()) {
        let text = d.to_string();
        let tokens = tokenize_number(&text, PlaceRange { min: -3, max: 2 }).unwrap();
        let back = detokenize_number(&tokens).unwrap();
        prop_assert_eq!(back, d);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn record_lines_round_trip(value in 0u32..10_000, text in prop::collection::vec(0usize..4, 1..12)) {
        let vocab = qed_vocab();
        let symbols = ["A", "B", "C", "[Cl]"];
        let body: String = text.iter().map(|&i| symbols[i]).collect();
        let line = format!("<qed>{}|{body}", Decimal::new(value as i64, 3));
        let seq = parse_line(&line, &vocab).unwrap();
        prop_assert_eq!(seq.text_len(), text.len());
        prop_assert_eq!(render_line(&seq, &vocab).unwrap(), line);
        let again = parse_ids(&seq.ids, &vocab).unwrap();
        prop_assert_eq!(again, seq);
    }

    #[test]
    fn masks_follow_ranks((order, cutoff) in permutation(9)) {
        let o = FactorizationOrder::new(order.clone(), cutoff).unwrap();
        let m = build_attention_masks(&o);
        let rank = o.ranks();
        for i in 0..order.len() {
            prop_assert!(m.content(i, i) && !m.query(i, i));
            for j in 0..order.len() {
                prop_assert_eq!(m.content(i, j), rank[j] <= rank[i]);
                prop_assert_eq!(m.query(i, j), rank[j] < rank[i]);
                // the query stream sees a subset of the content stream
                prop_assert!(!m.query(i, j) || m.content(i, j));
            }
        }
    }

    #[test]
    fn mask_plans_meet_their_budget(len in 1usize..40, frac in 0.05f64..1.0, span in 1usize..8, seed in any::<u64>()) {
        let plan = sample_mask_plan(len, frac, span, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(plan.mask.len(), len);
        let budget = ((frac * len as f64).round() as usize).clamp(1, len);
        prop_assert_eq!(plan.masked_count(), budget);
    }

    #[test]
    fn cgen_targets_are_the_masked_text(len in 1usize..20, frac in 0.1f64..0.9, seed in any::<u64>()) {
        let vocab = qed_vocab();
        let text: Vec<&str> = (0..len).map(|i| ["A", "B", "C"][i % 3]).collect();
        let seq = encode_sequence(&BTreeMap::from([("qed".to_string(), 0.5)]), &text, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_mask_plan(len, frac, 3, &mut rng);
        let order = sample_cgen_order(&seq, &plan, &mut rng).unwrap();
        let offset = seq.text_range().start;
        let expect: HashSet<usize> = plan.masked_positions().map(|p| p + offset).collect();
        let got: HashSet<usize> = order.targets().iter().copied().collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn spearman_ignores_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 3..20), ys_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(ys_seed);
        let ys: Vec<f64> = xs.iter().map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let a = spearman(&xs, &ys);
        let mapped: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0).collect();
        let b = spearman(&mapped, &ys);
        prop_assert_eq!(a.degenerate, b.degenerate);
        prop_assert!((a.value - b.value).abs() < 1e-9);
        prop_assert!(a.value.abs() <= 1.0);
    }

    #[test]
    fn rmse_bounds_mae(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(rmse(&p, &g) + 1e-12 >= mae(&p, &g));
        prop_assert!((rmse(&p, &g) - rmse(&g, &p)).abs() < 1e-12);
        prop_assert!(r2(&g, &g).degenerate || (r2(&g, &g).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_like_a_permutation(xs in prop::collection::vec(0u8..5, 1..25)) {
        let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let r = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn tanimoto_is_a_similarity(a in prop::collection::vec(0usize..4, 1..10), b in prop::collection::vec(0usize..4, 1..10)) {
        let sym = |v: &[usize]| -> Vec<String> { v.iter().map(|i| ["A", "B", "C", "D"][*i].to_string()).collect() };
        let (a, b) = (sym(&a), sym(&b));
        let s = token_tanimoto(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, token_tanimoto(&b, &a));
        prop_assert_eq!(token_tanimoto(&a, &a), 1.0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn normalization_stays_in_unit_range(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let range = NormRange { min: -20.0, max: 30.0 };
        let n = normalize(&xs, range, 3).unwrap();
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        for (x, v) in xs.iter().zip(&n) {
            prop_assert!((v * 1000.0 - (v * 1000.0).round()).abs() < 1e-9);
            if (-20.0..=30.0).contains(x) {
                prop_assert!((denormalize(&[*v], range)[0] - x).abs() <= 0.5e-3 * 50.0 + 1e-9);
            }
        }
    }

    #[test]
    fn beam_covers_all_paths(width in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rand::Rng::random_range(&mut rng, -2.0..0.0)).collect()).collect();
        let expand = |hyps: &[Hypothesis]| {
            Ok(hyps.iter().map(|(p, _)| table[p.last().map_or(3, |&x| x)].iter().copied().enumerate().collect()).collect())
        };
        let hyps = beam_search(2, width, expand).unwrap();
        prop_assert_eq!(hyps.len(), width.min(9));
        for w in hyps.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
        let distinct: HashSet<Vec<usize>> = hyps.iter().map(|h| h.0.clone()).collect();
        prop_assert_eq!(distinct.len(), hyps.len());
    }

    #[test]
    fn jsonl_round_trips(rows in prop::collection::vec((prop::collection::vec(0usize..3, 1..8), 0u32..1000), 1..10)) {
        let data: Vec<Example> = rows
            .iter()
            .map(|(t, y)| Example::new(
                t.iter().map(|i| ["A", "B", "C"][*i].to_string()).collect(),
                BTreeMap::from([("y".to_string(), *y as f64 / 1000.0)]),
            ))
            .collect();
        prop_assert_eq!(parse_jsonl(&to_jsonl(&data), "mem").unwrap(), data.clone());
        prop_assert_eq!(parse_csv(&to_csv(&data).unwrap(), "mem").unwrap(), data);
    }
}

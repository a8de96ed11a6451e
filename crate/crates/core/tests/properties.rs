use proptest::prelude::*;
use rand::Rng;

use sidsearch::codemetrics::{hr_at_k, ico_of, mrr_at_k, RankedList};
use sidsearch::corpus::{BizStats, TokenMatrix};
use sidsearch::decode::{beam_search, rank_within_code, ConvWeights, ScorerQuery, SidTrie};
use sidsearch::fusion::{loss_cons, FusedBatch};
use sidsearch::genmodel::{ScorerConfig, ScorerInput, ScorerParams, UserContext};
use sidsearch::math::{rng_for, ParamSet};
use sidsearch::prune::{curriculum_tokens, distill_loss, select_tokens, CurriculumSchedule};
use sidsearch::quantize::{rq_encode, SemanticId};

fn sid(codes: &[u16]) -> SemanticId {
    SemanticId(codes.to_vec())
}

fn scorer(seed: u64, levels: Vec<usize>) -> ScorerParams {
    let mut rng = rng_for(seed, 1);
    let cfg = ScorerConfig {
        input_dim: 3,
        levels,
        n_categories: 2,
        d_s: 4,
        h_s: 5,
    };
    let mut p = ScorerParams::new(cfg, seed).unwrap();
    for w in p.tensors_mut() {
        w.iter_mut().for_each(|v| *v += rng.random_range(-0.8..0.8));
    }
    p
}

fn tokens(seed: u64, n: usize, dim: usize) -> TokenMatrix {
    let mut rng = rng_for(seed, 2);
    TokenMatrix::new(dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hit_rate_and_mrr_grow_with_k(
        lists in prop::collection::vec((prop::collection::btree_set(0u32..30, 1..12), 0u32..30), 1..8)
    ) {
        let lists: Vec<RankedList> = lists
            .into_iter()
            .enumerate()
            .map(|(i, (ids, t))| RankedList::new(i as u64, ids.into_iter().rev().collect(), t).unwrap())
            .collect();
        for k in 1..12 {
            let (h, m) = (hr_at_k(&lists, k).unwrap(), mrr_at_k(&lists, k).unwrap());
            prop_assert!(m <= h);
            prop_assert!(hr_at_k(&lists, k + 1).unwrap() >= h);
            prop_assert!(mrr_at_k(&lists, k + 1).unwrap() >= m);
        }
    }

    #[test]
    fn ico_ignores_relabeling(codes in prop::collection::vec(0u16..6, 1..40), shift in 1u16..6) {
        let sids: Vec<SemanticId> = codes.iter().map(|&c| sid(&[c, c % 2])).collect();
        let relabeled: Vec<SemanticId> = codes.iter().map(|&c| sid(&[(c + shift) % 6 + 10, 7 - c % 2])).collect();
        prop_assert_eq!(ico_of(&sids).unwrap(), ico_of(&relabeled).unwrap());
    }

    #[test]
    fn consistency_loss_ignores_row_order(seed in 0u64..1000, tau in 0.1f64..1.0) {
        let mut rng = rng_for(seed, 0);
        let mut row = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let f: Vec<Vec<f64>> = (0..6).map(|_| row()).collect();
        let v: Vec<Vec<f64>> = (0..6).map(|_| row()).collect();
        let a = loss_cons(&FusedBatch::new(f.clone(), v.clone(), vec![(0, 1), (2, 3), (4, 5)]).unwrap(), tau).unwrap().0;
        // Reverse the rows and remap the pairs to match.
        let perm = |x: &[Vec<f64>]| x.iter().rev().cloned().collect::<Vec<_>>();
        let b = loss_cons(&FusedBatch::new(perm(&f), perm(&v), vec![(5, 4), (3, 2), (1, 0)]).unwrap(), tau).unwrap().0;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn residual_chain_is_exact(seed in 0u64..1000) {
        let mut rng = rng_for(seed, 0);
        let books: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = rq_encode(&f, &books).unwrap();
        for (l, &c) in q.codes.iter().enumerate() {
            let e = &books[l][c as usize];
            for j in 0..5 {
                prop_assert_eq!(q.residuals[l + 1][j], q.residuals[l][j] - e[j]);
            }
        }
    }

    #[test]
    fn next_code_scores_are_distributions(seed in 0u64..500, prefix in prop::collection::vec(0u16..3, 0..3)) {
        let p = scorer(seed, vec![3, 3, 3]);
        let t = tokens(seed, 4, 3);
        let st = p.prepare(&ScorerInput::image(&t)).unwrap();
        let probs = p.score_next(&st, &prefix).unwrap();
        prop_assert!(probs.iter().all(|&x| x >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_is_sum_of_levels(seed in 0u64..500, codes in prop::collection::vec(0u16..3, 3)) {
        let p = scorer(seed, vec![3, 3, 3]);
        let t = tokens(seed, 4, 3);
        let input = ScorerInput::image(&t);
        let st = p.prepare(&input).unwrap();
        let by_level: f64 = (0..3).map(|l| p.score_next(&st, &codes[..l]).unwrap()[codes[l] as usize].ln()).sum();
        let whole = p.sequence_logprob(&input, &SemanticId(codes)).unwrap();
        prop_assert!((whole - by_level).abs() < 1e-10);
    }

    #[test]
    fn short_term_order_is_irrelevant(seed in 0u64..500, n in 2usize..5) {
        let p = scorer(seed, vec![3, 2]);
        let t = tokens(seed, 3, 3);
        let mut rng = rng_for(seed, 3);
        let short: Vec<SemanticId> = (0..n).map(|_| sid(&[rng.random_range(0..3), rng.random_range(0..2)])).collect();
        let user = UserContext { long_term_sid: None, short_term_sids: short.clone(), scene_id: 1 };
        let mut reversed = user.clone();
        reversed.short_term_sids.reverse();
        let input = |u| ScorerInput { tokens: &t, query_sid: None, user: Some(u) };
        let (a, b) = (p.prepare(&input(&user)).unwrap(), p.prepare(&input(&reversed)).unwrap());
        let (pa, pb) = (p.score_next(&a, &[]).unwrap(), p.score_next(&b, &[]).unwrap());
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_only_emits_trie_members(seed in 0u64..500, n in 1usize..40, beam in 1usize..8) {
        let p = scorer(seed, vec![4, 3, 3]);
        let mut rng = rng_for(seed, 4);
        let mut trie = SidTrie::new(3);
        for item in 0..n as u32 {
            trie.insert(&sid(&[rng.random_range(0..4), rng.random_range(0..3), rng.random_range(0..3)]), item).unwrap();
        }
        let t = tokens(seed, 3, 3);
        let q = ScorerQuery::new(&p, &ScorerInput::image(&t)).unwrap();
        let out = beam_search(&q, &trie, beam).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= beam);
        for (s, lp) in &out {
            prop_assert!(trie.contains(s));
            prop_assert!(*lp <= 0.0);
        }
    }

    #[test]
    fn within_code_ranking_ignores_input_order(
        stats in prop::collection::vec((0u64..50, 0.0f64..100.0, 0u64..10), 1..12)
    ) {
        let biz = |i: u32| {
            let (c, g, o) = stats[i as usize];
            BizStats { clicks_30d: c, gmv_30d: g, orders_30d: o, price: 1.0 }
        };
        let items: Vec<u32> = (0..stats.len() as u32).collect();
        let rev: Vec<u32> = items.iter().rev().copied().collect();
        let w = ConvWeights::default();
        prop_assert_eq!(rank_within_code(&items, biz, &w), rank_within_code(&rev, biz, &w));
    }

    #[test]
    fn curriculum_shrinks_to_the_target(v_max in 1usize..64, frac in 0.0f64..1.0, epochs in 1usize..12) {
        let v_sub = 1 + ((v_max - 1) as f64 * frac) as usize;
        let s = CurriculumSchedule::new(v_max, v_sub, epochs).unwrap();
        let mut prev = v_max;
        for e in 1..=epochs {
            let v = curriculum_tokens(e, &s).unwrap();
            prop_assert!(v <= prev && v >= v_sub);
            prev = v;
        }
        prop_assert_eq!(prev, v_sub);
    }

    #[test]
    fn token_selection_is_a_sorted_subset(seed in 0u64..500, n in 1usize..30, frac in 0.0f64..1.0) {
        let t = tokens(seed, n, 4);
        let v_sub = 1 + ((n - 1) as f64 * frac) as usize;
        let keep = select_tokens(&t, v_sub, seed).unwrap();
        prop_assert_eq!(keep.len(), v_sub);
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(keep.iter().all(|&i| i < n));
    }

    #[test]
    fn distillation_is_nonnegative(seed in 0u64..300) {
        let reference = scorer(seed, vec![3, 2]);
        let student = scorer(seed + 1000, vec![3, 2]);
        let t = tokens(seed, 5, 3);
        let full = ScorerInput::image(&t);
        let small = t.select(&[0, 2]).unwrap();
        let pruned = full.with_tokens(&small);
        prop_assert!(distill_loss(&reference, &student, &full, &pruned).unwrap().0 >= 0.0);
        prop_assert!(distill_loss(&reference, &reference, &full, &full).unwrap().0.abs() < 1e-12);
    }
}

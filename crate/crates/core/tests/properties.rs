mod common;

use proptest::prelude::*;

use pivot_core::pfr::{sample_candidates, FrameScoreBoard};
use pivot_core::ptr::{
    chunk_ranges, chunk_ratios, head_sum, run_ptr, select_in_chunks, top_indices, voting_scores,
    SignificanceScope, SoftVoteScope, Voting,
};
use pivot_core::query::{parse_expansion_response, serialize_expansion};
use pivot_core::scoring::{clip_scores, detection_scores, fuse_scores, temporal_diffusion};
use pivot_core::{ExpandedQuery, PfrConfig, PtrConfig, ScoringConfig};

fn scores_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serialized_queries_parse_back(seed in any::<u64>()) {
        let q = common::random_query(seed);
        let text = serialize_expansion(&q);
        let parsed = parse_expansion_response(&text, true).unwrap();
        prop_assert_eq!(parsed.query, q);
        prop_assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn parser_never_panics(text in "(?s).{0,400}") {
        let _ = parse_expansion_response(&text, false);
        let _ = parse_expansion_response(&text, true);
    }

    #[test]
    fn parser_never_panics_on_near_grammar(
        lines in prop::collection::vec(
            prop_oneof![
                "Key Objects?:[ a-z,;()]{0,30}",
                "Cue Objects?:[ a-z,;()]{0,30}",
                "Rel(ations?)?:[ a-zA-Z,;()]{0,40}",
                "Des(cription)?:[ a-z,;():]{0,40}",
                "Sem(antics)?:[ a-z,;]{0,30}",
                "[-*• ]{0,3}\\*{0,2}[A-Za-z ]{0,12}:?.{0,20}",
            ],
            0..8,
        )
    ) {
        let text = lines.join("\n");
        let _ = parse_expansion_response(&text, false);
        let _ = parse_expansion_response(&text, true);
    }

    #[test]
    fn fuse_is_linear((a, b) in (1usize..40).prop_flat_map(|n| (scores_vec(n), scores_vec(n))), lambda in 0.0f64..=1.0) {
        let f = fuse_scores(&a, &b, lambda).unwrap();
        for i in 0..a.len() {
            let expect = (1.0 - lambda) * a[i] + lambda * b[i];
            prop_assert!((f[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn diffusion_idempotent_and_monotone(
        init in scores_vec(30),
        t in 0usize..30,
        score in 0.0f64..5.0,
        w in 0usize..8,
    ) {
        let mut board = FrameScoreBoard::from_parts(init.clone(), vec![false; 30]).unwrap();
        temporal_diffusion(&mut board, t, score, w).unwrap();
        let once = board.scores().to_vec();
        for (a, b) in init.iter().zip(&once) {
            prop_assert!(b >= a);
        }
        temporal_diffusion(&mut board, t, score, w).unwrap();
        prop_assert_eq!(board.scores(), &once[..]);
    }

    #[test]
    fn scores_are_permutation_equivariant(seed in 0u64..500, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let bundle = common::random_bundle(seed, 24, 8, &["dog", "person", "leash"]);
        let mut query = ExpandedQuery {
            key_objects: vec!["dog".into(), "person".into()],
            cue_objects: vec!["leash".into()],
            ..ExpandedQuery::default()
        };
        query.relations.push(pivot_core::RelationTriplet::new("person", pivot_core::RelationType::Spatial, "dog").unwrap());
        query.relations.push(pivot_core::RelationTriplet::new("leash", pivot_core::RelationType::Time, "dog").unwrap());
        let cfg = ScoringConfig { tau: 10.0, ..ScoringConfig::default() };
        let idx: Vec<usize> = (0..24).step_by(2).collect();
        let mut perm = idx.clone();
        perm.shuffle(&mut common::rng(perm_seed));
        let c1 = clip_scores(&bundle, &idx, &cfg).unwrap();
        let c2 = clip_scores(&bundle, &perm, &cfg).unwrap();
        let d1 = detection_scores(&bundle, &idx, &query, &cfg).unwrap();
        let d2 = detection_scores(&bundle, &perm, &query, &cfg).unwrap();
        for (j, t) in perm.iter().enumerate() {
            let i = idx.iter().position(|x| x == t).unwrap();
            prop_assert!((c1[i] - c2[j]).abs() < 1e-12);
            prop_assert!((d1.scores[i] - d2.scores[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_avoids_visited(
        scores in scores_vec(40),
        visited in prop::collection::vec(any::<bool>(), 40),
        stride in 1usize..5,
        alpha in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(visited.iter().any(|v| !v));
        let board = FrameScoreBoard::from_parts(scores, visited.clone()).unwrap();
        let cfg = PfrConfig { alpha, ..PfrConfig::default() };
        let s = sample_candidates(&board, stride, &cfg, &mut common::rng(seed));
        prop_assert!(!s.selected.is_empty());
        for t in &s.selected {
            prop_assert!(!visited[*t]);
        }
        prop_assert!(s.selected.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn chunk_ranges_partition(k in 1usize..200, w in 1usize..20) {
        prop_assume!(w <= k);
        let r = chunk_ranges(k, w);
        prop_assert_eq!(r.len(), w);
        prop_assert_eq!(r[0].start, 0);
        prop_assert_eq!(r[w - 1].end, k);
        for pair in r.windows(2) {
            prop_assert_eq!(pair[0].end, pair[1].start);
        }
        let max = r.iter().map(|x| x.len()).max().unwrap();
        let min = r.iter().map(|x| x.len()).min().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn ratios_are_scale_invariant(
        a in prop::collection::vec(0.0f64..3.0, 8..64),
        w in 1usize..8,
        exp in -20i32..20,
    ) {
        // powers of two keep the scaling exact in floating point
        let c = 2f64.powi(exp);
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        let r1 = chunk_ratios(&a, w, 0.01, SignificanceScope::Layer).unwrap();
        let r2 = chunk_ratios(&scaled, w, 0.01, SignificanceScope::Layer).unwrap();
        for (x, y) in r1.chunks.iter().zip(&r2.chunks) {
            prop_assert_eq!(x.eta, y.eta);
            prop_assert_eq!(x.rho, y.rho);
            prop_assert_eq!(x.gamma, y.gamma);
        }
        prop_assert_eq!(top_indices(&a, a.len() / 2), top_indices(&scaled, a.len() / 2));
    }

    #[test]
    fn soft_vote_ignores_per_head_shifts(
        heads in prop::collection::vec(prop::collection::vec(0.0f64..4.0, 24), 1..5),
        shifts in prop::collection::vec(-3.0f64..3.0, 5),
        w in 1usize..6,
        budget in 1usize..5,
    ) {
        let shifted: Vec<Vec<f64>> = heads
            .iter()
            .zip(&shifts)
            .map(|(h, s)| h.iter().map(|v| v + s).collect())
            .collect();
        let ranges = chunk_ranges(24, w);
        let budgets = vec![budget; w];
        let s1 = voting_scores(&heads, &ranges, Voting::HeadSoftVote, SoftVoteScope::Chunk);
        let s2 = voting_scores(&shifted, &ranges, Voting::HeadSoftVote, SoftVoteScope::Chunk);
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        // only compare rankings where the vote is not a near-tie
        let mut sorted = s1.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|p| p[1] - p[0] > 1e-7));
        prop_assert_eq!(select_in_chunks(&s1, &ranges, &budgets), select_in_chunks(&s2, &ranges, &budgets));
    }

    #[test]
    fn ptr_output_invariants(seed in any::<u64>(), w in 1usize..10, min_tokens in 0usize..3, scale in 0.1f64..6.0) {
        let t = common::random_attention(seed, [3, 2, 3, 40], scale, None);
        let cfg = PtrConfig { n_chunks: w, min_tokens_per_chunk: min_tokens, ..PtrConfig::default() };
        let sel = run_ptr(&t, &cfg).unwrap();
        prop_assert_eq!(sel.layers.len(), 3);
        for layer in &sel.layers {
            prop_assert!(layer.retained.windows(2).all(|p| p[0] < p[1]));
            prop_assert_eq!(layer.retained_count, layer.retained.len());
            let sum: usize = layer.chunks.iter().map(|c| c.retained).sum();
            prop_assert_eq!(sum, layer.retained_count);
            for c in &layer.chunks {
                prop_assert!((0.0..=1.0).contains(&c.ratio.gamma));
                if c.ratio.gamma == 0.0 && min_tokens > 0 {
                    prop_assert!(c.retained >= 1);
                }
            }
            let a = pivot_core::ptr::aggregate_attention(&t, layer.layer).unwrap();
            for head in &a {
                prop_assert!((head.iter().sum::<f64>() - 3.0).abs() < 1e-3);
            }
            prop_assert_eq!(head_sum(&a).len(), 40);
        }
    }
}

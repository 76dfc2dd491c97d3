use std::collections::BTreeSet;

use ace_core::decode::{constrained_beam_search, PrefixTree};
use ace_core::ids::SemanticIdentifier;
use ace_core::model::{FusionModel, ModelConfig, VocabLayout};
use ace_tensor::Rng;
use proptest::prelude::*;

/// `n` distinct random identifiers over `sizes`.
fn random_set(sizes: &[usize], n: usize, rng: &mut Rng) -> Vec<SemanticIdentifier> {
    let cap: usize = sizes.iter().product();
    let mut seen = BTreeSet::new();
    while seen.len() < n.min(cap) {
        seen.insert(sizes.iter().map(|&s| rng.below(s) as u32).collect::<Vec<_>>());
    }
    let mut ids: Vec<Vec<u32>> = seen.into_iter().collect();
    rng.shuffle(&mut ids);
    ids.into_iter().map(SemanticIdentifier).collect()
}

/// Length of the longest prefix of `seq` shared with any member.
fn shared_prefix(seq: &[usize], members: &[Vec<usize>]) -> usize {
    members.iter().map(|m| m.iter().zip(seq).take_while(|(a, b)| a == b).count()).max().unwrap_or(0)
}

#[test]
fn trie_accepts_members_and_rejects_random_sequences_at_first_divergence() {
    let mut rng = Rng::new(31);
    let sizes = [6, 5, 5, 3];
    let layout = VocabLayout::new(sizes.to_vec()).unwrap();
    let set = random_set(&sizes, 200, &mut rng);
    let tree = PrefixTree::build(&set, &layout).unwrap();
    let seqs: Vec<Vec<usize>> = set.iter().map(|id| layout.to_global(id).unwrap()).collect();
    for (i, s) in seqs.iter().enumerate() {
        assert_eq!(tree.lookup(s), Some(i));
    }
    let members: BTreeSet<&Vec<usize>> = seqs.iter().collect();
    let mut rejected = 0;
    while rejected < 1000 {
        // Mostly in-range tokens so divergence happens at varied depths.
        let s: Vec<usize> = (0..4)
            .map(|p| if rng.bernoulli(0.9) { layout.range(p).start + rng.below(sizes[p]) } else { rng.below(layout.total()) })
            .collect();
        if members.contains(&s) {
            continue;
        }
        rejected += 1;
        assert_eq!(tree.lookup(&s), None);
        assert_eq!(tree.walk(&s), Err(shared_prefix(&s, &seqs)), "{s:?}");
    }
    assert!(tree.node_count() <= 1 + seqs.len() * 4 && tree.node_count() > 4);
}

proptest! {
    #[test]
    fn allowed_next_is_the_brute_force_filter(
        sizes in proptest::collection::vec(1usize..5, 1..5),
        n in 1usize..40,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let layout = VocabLayout::new(sizes.clone()).unwrap();
        let set = random_set(&sizes, n, &mut rng);
        let tree = PrefixTree::build(&set, &layout).unwrap();
        let seqs: Vec<Vec<usize>> = set.iter().map(|id| layout.to_global(id).unwrap()).collect();
        let j = sizes.len();
        prop_assert!(tree.node_count() <= 1 + seqs.len() * j);
        prop_assert!(tree.node_count() > j);
        prop_assert_eq!(tree.leaf_count(), seqs.len());
        for s in &seqs {
            for d in 0..=j {
                let want: BTreeSet<usize> = seqs.iter().filter(|o| o[..d] == s[..d] && d < j).map(|o| o[d]).collect();
                let got = tree.allowed_next(&s[..d]).unwrap();
                prop_assert_eq!(got, want.into_iter().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn constrained_outputs_are_valid_distinct_and_sorted(seed in any::<u64>(), beam in 1usize..12) {
        let mut rng = Rng::new(seed);
        let sizes = vec![3, 3, 4];
        let layout = VocabLayout::new(sizes.clone()).unwrap();
        let set = random_set(&sizes, 1 + rng.below(20), &mut rng);
        let tree = PrefixTree::build(&set, &layout).unwrap();
        let cfg = ModelConfig { d_model: 8, n_heads: 2, ffn_dim: 8, encoder_layers: 2, decoder_layers: 1, query_vocab_size: 16, ..ModelConfig::default() };
        let model: FusionModel<f32> = FusionModel::new(cfg, layout.clone(), &mut rng).unwrap();
        let query: Vec<u32> = (0..1 + rng.below(5)).map(|_| rng.below(16) as u32).collect();
        let hits = constrained_beam_search(&model, &query, &tree, beam).unwrap();
        prop_assert_eq!(hits.len(), beam.min(set.len()));
        let mut seen = BTreeSet::new();
        for h in &hits {
            let id = h.item_id.expect("constrained hit names an item");
            prop_assert_eq!(layout.to_global(&set[id]).unwrap(), h.tokens.clone());
            prop_assert!(seen.insert(id));
        }
        prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(constrained_beam_search(&model, &query, &tree, beam).unwrap(), hits);
    }
}

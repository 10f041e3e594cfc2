//! Property tests for taxonomy structure, hierarchical inference, the query
//! encoder and the query cache.

use std::sync::Arc;

use proptest::prelude::*;

use hiercat::infer::{beam_search, hier_infer, BeamConfig, Prediction, ScoreMap};
use hiercat::model::{DualEncoderModel, ModelConfig};
use hiercat::serving::{CacheKey, QueryCache};
use hiercat::taxonomy::{CategoryPath, NodeId, Taxonomy};

/// Parent choices for nodes 2..=n: `None` makes a root, `Some(k)` attaches
/// to node `1 + k % (id - 1)` when that keeps depth at most 6.
fn arb_tree(max_nodes: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    prop::collection::vec(prop::option::weighted(0.85, any::<usize>()), 0..max_nodes)
}

/// TSV lines of the tree, node `id` named `n<id>`.
fn tree_lines(choices: &[Option<usize>]) -> Vec<String> {
    let mut depth = vec![0usize, 1];
    let mut lines = vec!["1\t\tn1".to_string()];
    for (i, c) in choices.iter().enumerate() {
        let id = i + 2;
        let parent = c.map(|k| 1 + k % (id - 1)).filter(|&p| depth[p] < 6);
        depth.push(parent.map_or(1, |p| depth[p] + 1));
        let parent = parent.map(|p| p.to_string()).unwrap_or_default();
        lines.push(format!("{id}\t{parent}\tn{id}"));
    }
    lines
}

fn tree(choices: &[Option<usize>]) -> Taxonomy {
    Taxonomy::from_tsv(&tree_lines(choices).join("\n")).unwrap()
}

fn raw_for(t: &Taxonomy, values: &[f64]) -> ScoreMap {
    ScoreMap::raw((0..t.len()).map(|i| values[i % values.len()]).collect())
}

fn cosines() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn levels_partition_nodes_by_depth(choices in arb_tree(120)) {
        let t = tree(&choices);
        let total: usize = t.levels().iter().map(Vec::len).sum();
        prop_assert_eq!(total, t.len());
        for idx in 0..t.len() {
            let hits: Vec<usize> = t
                .levels()
                .iter()
                .enumerate()
                .filter(|(_, level)| level.contains(&idx))
                .map(|(d, _)| d + 1)
                .collect();
            prop_assert_eq!(hits, vec![t.node(idx).depth]);
        }
    }

    #[test]
    fn render_parse_round_trip(choices in arb_tree(120)) {
        let t = tree(&choices);
        for idx in 0..t.len() {
            let path = t.path_of_index(idx);
            prop_assert_eq!(t.parse_path(&t.render(&path)).unwrap(), path);
        }
    }

    #[test]
    fn line_order_does_not_matter(choices in arb_tree(60), seed in any::<u64>()) {
        let mut lines = tree_lines(&choices);
        let t = Taxonomy::from_tsv(&lines.join("\n")).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(lines.as_mut_slice(), &mut rng);
        let shuffled = Taxonomy::from_tsv(&lines.join("\n")).unwrap();
        prop_assert_eq!(t.fingerprint(), shuffled.fingerprint());
        prop_assert_eq!(t.nodes(), shuffled.nodes());
    }

    #[test]
    fn every_level_sums_to_one(choices in arb_tree(200), values in cosines(), alpha in 0.0f64..2.0, scale in 0.5f64..32.0) {
        let t = tree(&choices);
        let p = hier_infer(&t, &raw_for(&t, &values), alpha, scale).unwrap();
        for level in t.levels() {
            let s: f64 = level.iter().map(|&i| p.values()[i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "level sum {}", s);
        }
    }

    #[test]
    fn raising_a_child_never_lowers_its_parent(
        choices in arb_tree(80),
        values in cosines(),
        pick in any::<usize>(),
        bump in 0.0f64..2.0,
        alpha in 0.0f64..2.0,
    ) {
        let t = tree(&choices);
        let children: Vec<usize> = (0..t.len()).filter(|&i| t.parent_index(i).is_some()).collect();
        prop_assume!(!children.is_empty());
        let child = children[pick % children.len()];
        let parent = t.parent_index(child).unwrap();
        let raw = raw_for(&t, &values);
        let mut bumped = raw.values().to_vec();
        bumped[child] += bump;
        let before = hier_infer(&t, &raw, alpha, 1.0).unwrap().values()[parent];
        let after = hier_infer(&t, &ScoreMap::raw(bumped), alpha, 1.0).unwrap().values()[parent];
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn shifting_one_depth_changes_nothing(
        choices in arb_tree(120),
        values in cosines(),
        depth_pick in any::<usize>(),
        shift in -3.0f64..3.0,
    ) {
        let t = tree(&choices);
        let depth = 1 + depth_pick % t.max_depth();
        let raw = raw_for(&t, &values);
        let mut shifted = raw.values().to_vec();
        for &i in t.level(depth) {
            shifted[i] += shift;
        }
        let a = hier_infer(&t, &raw, 1.0, 4.0).unwrap();
        let b = hier_infer(&t, &ScoreMap::raw(shifted), 1.0, 4.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let beam = BeamConfig::with_width(3);
        let paths = |m: &ScoreMap| -> Vec<CategoryPath> {
            beam_search(&t, m, &beam).unwrap().into_iter().map(|p: Prediction| p.path).collect()
        };
        prop_assert_eq!(paths(&a), paths(&b));
    }

    #[test]
    fn beam_paths_are_valid_and_ranked(choices in arb_tree(80), values in cosines(), width in 1usize..8, th in 0.0f64..0.6) {
        let t = tree(&choices);
        let p = hier_infer(&t, &raw_for(&t, &values), 1.0, 4.0).unwrap();
        let beam = BeamConfig { width, thresholds: vec![th; 6], alpha: 1.0 };
        let preds = beam_search(&t, &p, &beam).unwrap();
        prop_assert!(!preds.is_empty() && preds.len() <= width);
        for w in preds.windows(2) {
            prop_assert!(w[0].path_score >= w[1].path_score);
        }
        for pred in &preds {
            prop_assert_eq!(t.validate_path(pred.path.ids()).unwrap(), pred.path.clone());
            prop_assert_eq!(pred.per_level_probs.len(), pred.path.depth());
            let product: f64 = pred.per_level_probs.iter().product();
            prop_assert!((product - pred.path_score).abs() <= 1e-12);
            for (d, &id) in pred.path.ids().iter().enumerate().skip(1) {
                prop_assert!(p.get(&t, id).unwrap() >= th, "depth {} below threshold", d + 1);
            }
        }
    }
}

fn small_model(t: &Taxonomy) -> DualEncoderModel {
    let mut c = ModelConfig::default();
    c.dim = 16;
    c.features.trigram_buckets = 4000;
    c.features.word_buckets = 1000;
    c.init_seed = 3;
    DualEncoderModel::new(c, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn score_all_ignores_node_order(seed in any::<u64>(), query in "[a-z ]{1,20}") {
        let mut lines = vec![
            "1\t\tElectronics", "2\t1\tCell Phones", "3\t2\tCases", "4\t\tHome", "5\t4\tSofa", "6\t4\tLamps",
        ];
        let t = Taxonomy::from_tsv(&lines.join("\n")).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(lines.as_mut_slice(), &mut rng);
        let shuffled = Taxonomy::from_tsv(&lines.join("\n")).unwrap();
        let m = small_model(&t);
        let (a, b) = (m.score_all(&t, &query), m.score_all(&shuffled, &query));
        for n in t.nodes() {
            prop_assert_eq!(a.get(&t, n.id), b.get(&shuffled, n.id));
        }
    }

    #[test]
    fn encoding_normalized_text_is_idempotent(text in "\\PC{0,30}") {
        let t = Taxonomy::from_tsv("1\t\tA\n").unwrap();
        let m = small_model(&t);
        let once = hiercat::features::normalize(&text);
        prop_assert_eq!(m.encode_query(&once), m.encode_query(&text));
        prop_assert_eq!(m.encode_query(&hiercat::features::normalize(&once)), m.encode_query(&once));
    }
}

fn tagged(tag: u32) -> Arc<Vec<Prediction>> {
    Arc::new(vec![Prediction {
        path: CategoryPath::from_ids_unchecked(vec![NodeId(tag)]),
        per_level_probs: vec![1.0],
        path_score: 1.0,
    }])
}

#[test]
fn concurrent_cache_never_crosses_keys() {
    let cache = Arc::new(QueryCache::new(32));
    let threads: Vec<_> = (0..8u32)
        .map(|t| {
            let cache = Arc::clone(&cache);
            std::thread::spawn(move || {
                for i in 0..4000u32 {
                    let k = (i * 7 + t * 13) % 97;
                    let version = if k % 2 == 0 { "a" } else { "b" };
                    let key = CacheKey {
                        model_version: version.into(),
                        query: format!("q{k}"),
                        width: (k % 3) as usize,
                    };
                    if let Some(v) = cache.get(&key) {
                        assert_eq!(v.as_slice(), tagged(k).as_slice());
                    } else {
                        cache.insert(key, tagged(k));
                    }
                    assert!(cache.stats().len <= 32);
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let s = cache.stats();
    assert_eq!(s.hits + s.misses, 8 * 4000);
    assert!(s.len <= 32);
}

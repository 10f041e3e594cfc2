//! Serving path end to end: toy training, checkpoint files, bundle scoring
//! against the unbundled model, and the TCP protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use hiercat::infer::BeamConfig;
use hiercat::model::{dot, DualEncoderModel, ModelConfig};
use hiercat::serving::{serve, QueryCache, ServerConfig, ServingBundle};
use hiercat::taxonomy::Taxonomy;
use hiercat::train::{train_categorizer, TrainConfig};
use hiercat::weak::TrainingPair;

const TAXONOMY: &str = "\
1\t\tElectronics
2\t1\tCell Phones
3\t2\tAccessories
4\t3\tCases
5\t2\tSmartphones
6\t\tHome
7\t6\tFurniture
8\t7\tSofa
9\t\tVehicles
10\t9\tBoat
";

fn toy() -> (Taxonomy, DualEncoderModel) {
    let t = Taxonomy::from_tsv(TAXONOMY).unwrap();
    let mut config = ModelConfig::default();
    config.dim = 32;
    config.features.trigram_buckets = 20_000;
    config.features.word_buckets = 5_000;
    let mut model = DualEncoderModel::new(config, &t);
    let pair = |q: &str, p: &str, weight| TrainingPair {
        query: q.into(),
        path: t.parse_path(p).unwrap(),
        weight,
    };
    let pairs = vec![
        pair("iphone case", "Electronics//Cell Phones//Accessories//Cases", 5),
        pair("phone cases", "Electronics//Cell Phones//Accessories//Cases", 4),
        pair("galaxy cover", "Electronics//Cell Phones//Accessories//Cases", 2),
        pair("iphone 12", "Electronics//Cell Phones//Smartphones", 5),
        pair("android phone", "Electronics//Cell Phones//Smartphones", 3),
        pair("grey sofa", "Home//Furniture//Sofa", 4),
        pair("couch", "Home//Furniture//Sofa", 3),
        pair("electric boat", "Vehicles//Boat", 4),
        pair("fishing boat", "Vehicles//Boat", 2),
    ];
    let train = TrainConfig {
        epochs: 40,
        batch_size: 4,
        learning_rate: 0.5,
        momentum: 0.9,
        seed: 1,
    };
    train_categorizer(&mut model, &pairs, &t, &train).unwrap();
    (t, model)
}

#[test]
fn bundle_scores_match_direct_scoring_bit_for_bit() {
    let (t, model) = toy();
    let bundle = ServingBundle::build(&model, t.clone(), BeamConfig::default()).unwrap();
    for i in 0..100 {
        let q = format!("query {i} {}", ["case", "sofa", "boat", "ïphone", "x"][i % 5]);
        let direct = model.score_all(&t, &q);
        let cached = bundle.table().scores(&model.encode_query(&q).vector);
        assert_eq!(direct, cached, "{q}");
        let e = model.encode_query(&q);
        for n in t.nodes() {
            let c = model.encode_category(&t, n.id).unwrap();
            assert_eq!(direct.get(&t, n.id).unwrap(), dot(&e.vector, &c));
        }
    }
}

#[test]
fn checkpoint_file_round_trip_serves_identically() {
    let (t, model) = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save_checkpoint_file(&path).unwrap();
    let loaded = DualEncoderModel::load_checkpoint_file(&path).unwrap();
    assert_eq!(loaded, model);
    let beam = BeamConfig::with_width(3);
    let from_file = ServingBundle::load(&path, t.clone(), beam.clone()).unwrap();
    let in_memory = ServingBundle::build(&model, t, beam).unwrap();
    assert_eq!(from_file.model_version(), in_memory.model_version());
    for q in ["iphone cases", "sofa", "boat trailer", ""] {
        assert_eq!(from_file.categorize_uncached(q), in_memory.categorize_uncached(q));
    }
}

#[test]
fn tcp_service_categorizes_iphone_cases_under_electronics() {
    let (t, model) = toy();
    let bundle = Arc::new(ServingBundle::build(&model, t, BeamConfig::with_width(2)).unwrap());
    let cache = Arc::new(QueryCache::new(16));
    let config = ServerConfig {
        addr: "127.0.0.1:0".parse().unwrap(),
    };
    let handle = serve(Arc::clone(&bundle), Arc::clone(&cache), &config).unwrap();

    let ask_on = |stream: &TcpStream, line: &str| -> serde_json::Value {
        let mut w = stream.try_clone().unwrap();
        writeln!(w, "{line}").unwrap();
        let mut out = String::new();
        BufReader::new(stream.try_clone().unwrap()).read_line(&mut out).unwrap();
        serde_json::from_str(&out).unwrap()
    };
    let a = TcpStream::connect(handle.local_addr()).unwrap();
    let b = TcpStream::connect(handle.local_addr()).unwrap();

    let v = ask_on(&a, r#"{"query": "iphone cases"}"#);
    assert_eq!(v["model_version"], bundle.model_version());
    let top = &v["predictions"][0];
    assert!(top["path"].as_str().unwrap().to_lowercase().starts_with("electronics"), "{v}");
    let terms: Vec<&str> = top["retrieval_terms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["term"].as_str().unwrap())
        .collect();
    assert_eq!(terms.first(), Some(&"cat_l1:1"));
    assert!(terms.len() <= 3);

    assert_eq!(ask_on(&b, "not json"), serde_json::json!({"error": "bad_request"}));
    let again = ask_on(&b, r#"{"query": "IPHONE   cases"}"#);
    assert_eq!(again["cache_hit"], true);
    assert_eq!(again["predictions"], v["predictions"]);
    assert_eq!(ask_on(&a, r#"{"query": "sofa", "top_k": 0}"#)["predictions"], serde_json::json!([]));

    handle.shutdown();
}

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::naive_object_affinity;
use tsgm::encoders::EncoderConfig;
use tsgm::graph::{Detection, TsgmGraph};
use tsgm::gridsim::{build_graph_along, generate_world, random_walk, Heading, Pose, WorldConfig};
use tsgm::io::{graph_to_json, load_graph, save_graph, GraphMeta};

#[derive(Debug, Clone)]
struct Spec {
    n: usize,
    hosts: Vec<usize>,
    image_edges: Vec<(usize, usize)>,
    cross_edges: Vec<(usize, usize)>,
}

fn spec() -> impl Strategy<Value = Spec> {
    (1usize..7, 0usize..7).prop_flat_map(|(n, m)| {
        let hosts = prop::collection::vec(0..n, m);
        let image_edges = prop::collection::vec((0..n, 0..n), 0..12);
        let cross_edges = if m == 0 {
            Just(Vec::new()).boxed()
        } else {
            prop::collection::vec((0..n, 0..m), 0..12).boxed()
        };
        (Just(n), hosts, image_edges, cross_edges).prop_map(|(n, hosts, image_edges, cross_edges)| Spec {
            n,
            hosts,
            image_edges,
            cross_edges,
        })
    })
}

fn build(spec: &Spec) -> TsgmGraph {
    let mut g = TsgmGraph::new(2, 2, 2);
    for i in 0..spec.n {
        g.add_image_node(&[1.0, i as f64]).unwrap();
    }
    for (k, &host) in spec.hosts.iter().enumerate() {
        let det = Detection {
            feature: vec![k as f64, 1.0],
            category: k % 2,
            score: 0.5,
        };
        g.add_object_node(&det, host).unwrap();
    }
    for &(a, b) in &spec.image_edges {
        if a != b {
            g.connect_images(a, b).unwrap();
        }
    }
    for &(i, k) in &spec.cross_edges {
        g.link_object(i, k).unwrap();
    }
    g
}

fn rows(m: &tsgm::tensor::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

proptest! {
    #[test]
    fn object_affinity_matches_the_triple_loop(spec in spec()) {
        let g = build(&spec);
        let expect = naive_object_affinity(&rows(&g.image_affinity()), &rows(&g.cross_affinity()));
        prop_assert_eq!(rows(&g.object_affinity()), expect);
    }

    #[test]
    fn affinities_are_binary_and_image_affinity_is_symmetric(spec in spec()) {
        let g = build(&spec);
        let a = g.image_affinity();
        for i in 0..a.rows() {
            prop_assert_eq!(a[(i, i)], 0.0);
            for j in 0..a.cols() {
                prop_assert_eq!(a[(i, j)], a[(j, i)]);
                prop_assert!(a[(i, j)] == 0.0 || a[(i, j)] == 1.0);
            }
        }
        prop_assert!(g.cross_affinity().data().iter().all(|&x| x == 0.0 || x == 1.0));
        let o = g.object_affinity();
        for i in 0..o.rows() {
            for j in 0..o.cols() {
                prop_assert_eq!(o[(i, j)], o[(j, i)]);
            }
        }
    }

    #[test]
    fn every_object_is_linked_to_its_host(spec in spec()) {
        let g = build(&spec);
        for (k, &host) in spec.hosts.iter().enumerate() {
            prop_assert!(g.cross_edges().contains(&(host, k)));
        }
    }

    #[test]
    fn json_round_trip_is_lossless(spec in spec()) {
        let g = build(&spec);
        let meta = GraphMeta { seed: 1, config: serde_json::json!({}) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        save_graph(&path, &g, meta.clone()).unwrap();
        let (back, _) = load_graph(&path).unwrap();
        prop_assert_eq!(graph_to_json(&back, meta.clone()), graph_to_json(&g, meta));
        prop_assert_eq!(back.object_affinity(), g.object_affinity());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Without observation noise every image node sits on a distinct cell and
    /// every object node on a distinct identity, whatever the walk.
    #[test]
    fn noise_free_walks_never_duplicate_nodes(world_seed in 0u64..50, walk_seed in any::<u64>(), steps in 1usize..200) {
        let enc = EncoderConfig { noise_sigma: 0.0, ..EncoderConfig::default() };
        let world = generate_world(world_seed, &WorldConfig::default(), &enc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(walk_seed);
        let (x, y) = world.free_cells()[0];
        let actions = random_walk(steps, &mut rng);
        let (g, deltas) = build_graph_along(&world, Pose { x, y, heading: Heading::South }, &actions, walk_seed).unwrap();
        prop_assert_eq!(deltas.len(), steps + 1);
        let features: BTreeSet<Vec<u64>> = g.images().iter().map(|n| n.feature.iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert_eq!(features.len(), g.num_images());
        let objects: BTreeSet<Vec<u64>> = g.objects().iter().map(|o| o.feature.iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert_eq!(objects.len(), g.num_objects());
        // consecutive localizations are joined, so the image graph is connected
        let mut seen = BTreeSet::from([0usize]);
        let mut frontier = vec![0usize];
        while let Some(v) = frontier.pop() {
            for w in g.image_neighbors(v).unwrap() {
                if seen.insert(w) {
                    frontier.push(w);
                }
            }
        }
        prop_assert_eq!(seen.len(), g.num_images());
    }
}

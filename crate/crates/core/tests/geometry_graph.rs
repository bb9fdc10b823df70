use proptest::prelude::*;
use ptmtok_core::datasetops::synth::random_backbone;
use ptmtok_core::geometry::{
    dihedral, mat_mul, quaternion_to_rotation, rotation_to_quaternion, transform_protein, transpose, FeatureConfig,
    Mat3,
};
use ptmtok_core::ingest::Protein;
use ptmtok_core::pgraph::{brute_micro_env, build_graph, checksum, GraphConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn protein(seed: u64, n: usize) -> Protein {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_backbone(&mut rng, n);
    let seq: String = (0..n)
        .map(|i| b"ACDEFGHIKLMNPQRSTVWY"[(i * 7 + seed as usize) % 20] as char)
        .collect();
    Protein::new(format!("p{seed}"), seq, coords, "A").unwrap()
}

fn rotation(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    quaternion_to_rotation([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("non-zero", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn features_are_se3_invariant(seed in 0u64..1000, n in 5usize..60, q in quat(), t in prop::array::uniform3(-50.0f64..50.0)) {
        let p = protein(seed, n);
        let moved = transform_protein(&p, &rotation(q), t);
        let (fc, gc) = (FeatureConfig::default(), GraphConfig { k: 8, ..GraphConfig::default() });
        let a = build_graph(&p, &gc, &fc).unwrap();
        let b = build_graph(&moved, &gc, &fc).unwrap();
        prop_assert_eq!(&a.edges, &b.edges);
        for (x, y) in a.node_feat.iter().zip(&b.node_feat) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.edge_feat.iter().zip(&b.edge_feat) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn quaternion_round_trip(q in quat()) {
        let r = rotation(q);
        let back = quaternion_to_rotation(rotation_to_quaternion(&r).unwrap());
        for a in 0..3 {
            for b in 0..3 {
                prop_assert!((r[a][b] - back[a][b]).abs() < 1e-10);
            }
        }
        let rrt = mat_mul(&r, &transpose(&r));
        for a in 0..3 {
            prop_assert!((rrt[a][a] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dihedral_in_range(pts in prop::array::uniform4(prop::array::uniform3(-5.0f64..5.0))) {
        if let Ok(phi) = dihedral(pts[0], pts[1], pts[2], pts[3]) {
            prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&phi));
        }
    }

    #[test]
    fn micro_env_matches_brute_force(
        seed in 0u64..1000,
        n in 3usize..80,
        d_s in 0usize..4,
        d_r in 4.0f64..14.0,
        k in 1usize..12,
        k_hop in 1usize..3,
        conjunction in any::<bool>(),
    ) {
        let p = protein(seed, n);
        let gc = GraphConfig { d_s, d_r, k, k_hop, conjunction };
        let g = build_graph(&p, &gc, &FeatureConfig::default()).unwrap();
        let ca = p.ca_trace();
        for i in 0..n {
            let env = g.micro_env(i, &gc).unwrap();
            prop_assert_eq!(&env.member_nodes, &brute_micro_env(&ca, i, &gc));
            for &e in &env.member_edges {
                let edge = g.edges[e];
                prop_assert!(edge.i == i || edge.j == i);
            }
        }
    }

    #[test]
    fn edges_are_sorted_and_in_range(seed in 0u64..1000, n in 2usize..50) {
        let p = protein(seed, n);
        let g = build_graph(&p, &GraphConfig { k: 6, ..GraphConfig::default() }, &FeatureConfig::default()).unwrap();
        prop_assert!(g.edges.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.edges.iter().all(|e| e.i < n && e.j < n && e.i != e.j));
        prop_assert_eq!(g.edge_feat.len(), g.edges.len() * g.edge_dim);
    }
}

#[test]
fn graph_build_is_deterministic() {
    let p = protein(4, 40);
    let gc = GraphConfig::default();
    let a = build_graph(&p, &gc, &FeatureConfig::default()).unwrap();
    let b = build_graph(&p, &gc, &FeatureConfig::default()).unwrap();
    assert_eq!(checksum(&a.node_feat), checksum(&b.node_feat));
    assert_eq!(checksum(&a.edge_feat), checksum(&b.edge_feat));
    assert_ne!(checksum(&a.node_feat), checksum(&a.edge_feat));
}

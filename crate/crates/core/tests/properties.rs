use ndarray::{s, Array1, Array2};
use nnmf::baselines::{embed_nnmf_first_layer, pmf_predict, Pmf};
use nnmf::data::{parse_canonical, split_indices, Observation, ObservationSet, SplitSpec};
use nnmf::evaluation::rmse;
use nnmf::latent::{build_input, predict, InitSpec, MlpNetwork, ModelDims, Nnmf};
use nnmf::model::Model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn observation_set(max_dim: usize) -> impl Strategy<Value = ObservationSet> {
    (1..max_dim, 1..max_dim).prop_flat_map(|(n, m)| {
        proptest::collection::btree_map((0..n, 0..m), -1e6f64..1e6, 1..=(n * m).min(40)).prop_map(move |cells| {
            let triples = cells
                .into_iter()
                .map(|((r, c), v)| Observation::new(r, c, v))
                .collect();
            ObservationSet::new(n, m, triples).unwrap()
        })
    })
}

fn nnmf_instance(seed: u64, n: usize, m: usize, k: usize) -> Nnmf {
    let dims = ModelDims {
        n_rows: n,
        n_cols: m,
        d: 2,
        d_prime: 3,
        k,
    };
    let mut model = Nnmf::init(dims, &[7, 5, 4, 1], &InitSpec { feature_std: 0.8, seed }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for b in &mut model.net.biases {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    model
}

proptest! {
    #[test]
    fn split_partitions_every_index(
        total in 3usize..400,
        tf in 0.05f64..0.5,
        vf in 0.05f64..0.5,
        seed: u64,
        repeat in 0usize..5,
    ) {
        let spec = SplitSpec { test_fraction: tf, validation_fraction: vf, n_repeats: 5, seed };
        let (n_test, n_val, n_train) = spec.partition_sizes(total);
        match split_indices(total, &spec, repeat) {
            Ok(idx) => {
                prop_assert_eq!(idx.test.len(), n_test);
                prop_assert_eq!(idx.validation.len(), n_val);
                prop_assert_eq!(idx.train.len(), n_train);
                let mut all: Vec<usize> = idx.train.iter().chain(&idx.validation).chain(&idx.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
                for part in [&idx.train, &idx.validation, &idx.test] {
                    prop_assert!(part.windows(2).all(|w| w[0] < w[1]));
                }
                prop_assert_eq!(split_indices(total, &spec, repeat).unwrap(), idx);
            }
            Err(_) => prop_assert!(n_test == 0 || n_val == 0 || n_train == 0),
        }
    }

    #[test]
    fn canonical_text_round_trips(data in observation_set(12)) {
        let text = data.to_canonical_string(&["model = nnmf".to_string()]);
        let back = parse_canonical(&text).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(back.to_canonical_string(&["model = nnmf".to_string()]), text);
    }

    #[test]
    fn rmse_is_permutation_invariant_and_homogeneous(
        pairs in proptest::collection::vec((-100f64..100.0, -100f64..100.0), 1..50),
        c in -10f64..10.0,
        rot in 0usize..50,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let base = rmse(&p, &t).unwrap();
        let k = rot % p.len();
        let (mut pr, mut tr) = (p.clone(), t.clone());
        pr.rotate_left(k);
        tr.rotate_left(k);
        prop_assert!((rmse(&pr, &tr).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        let ps: Vec<f64> = p.iter().map(|x| c * x).collect();
        let ts: Vec<f64> = t.iter().map(|x| c * x).collect();
        prop_assert!((rmse(&ps, &ts).unwrap() - c.abs() * base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn swapping_rows_swaps_predictions(seed: u64, k in 1usize..3, a in 0usize..4, b in 0usize..4, m in 0usize..3) {
        let model = nnmf_instance(seed, 4, 3, k);
        let mut swapped = model.clone();
        let (ra, rb) = (model.state.u.row(a).to_owned(), model.state.u.row(b).to_owned());
        swapped.state.u.row_mut(a).assign(&rb);
        swapped.state.u.row_mut(b).assign(&ra);
        let (pa, pb) = (model.state.u_prime.slice(s![a, .., ..]).to_owned(), model.state.u_prime.slice(s![b, .., ..]).to_owned());
        swapped.state.u_prime.slice_mut(s![a, .., ..]).assign(&pb);
        swapped.state.u_prime.slice_mut(s![b, .., ..]).assign(&pa);
        prop_assert_eq!(swapped.predict(a, m).unwrap(), model.predict(b, m).unwrap());
        prop_assert_eq!(swapped.predict(b, m).unwrap(), model.predict(a, m).unwrap());
    }

    #[test]
    fn swapping_columns_swaps_predictions(seed: u64, a in 0usize..3, b in 0usize..3, n in 0usize..4) {
        let model = nnmf_instance(seed, 4, 3, 2);
        let mut swapped = model.clone();
        let (ra, rb) = (model.state.v.row(a).to_owned(), model.state.v.row(b).to_owned());
        swapped.state.v.row_mut(a).assign(&rb);
        swapped.state.v.row_mut(b).assign(&ra);
        let (pa, pb) = (model.state.v_prime.slice(s![a, .., ..]).to_owned(), model.state.v_prime.slice(s![b, .., ..]).to_owned());
        swapped.state.v_prime.slice_mut(s![a, .., ..]).assign(&pb);
        swapped.state.v_prime.slice_mut(s![b, .., ..]).assign(&pa);
        prop_assert_eq!(swapped.predict(n, a).unwrap(), model.predict(n, b).unwrap());
        prop_assert_eq!(swapped.predict(n, b).unwrap(), model.predict(n, a).unwrap());
    }

    #[test]
    fn predictions_are_finite_and_repeatable(seed: u64, n in 0usize..4, m in 0usize..3) {
        let model = nnmf_instance(seed, 4, 3, 1);
        let p = predict(&model.net, &model.state, n, m).unwrap();
        prop_assert!(p.is_finite());
        prop_assert_eq!(p.to_bits(), predict(&model.net, &model.state, n, m).unwrap().to_bits());
        prop_assert_eq!(p.to_bits(), model.predict_batch(&[Observation::new(n, m, 0.0)])[0].to_bits());
    }

    #[test]
    fn single_column_product_is_exact(
        u in proptest::collection::vec(-10f64..10.0, 4),
        v in proptest::collection::vec(-10f64..10.0, 4),
    ) {
        let up = Array2::from_shape_vec((4, 1), u.clone()).unwrap();
        let vp = Array2::from_shape_vec((4, 1), v.clone()).unwrap();
        let x = build_input(Array1::zeros(2).view(), Array1::zeros(2).view(), up.view(), vp.view()).unwrap();
        for i in 0..4 {
            prop_assert_eq!(x[4 + i], u[i] * v[i]);
        }
    }

    #[test]
    fn linear_network_reduces_to_pmf(seed: u64) {
        let dims = ModelDims { n_rows: 3, n_cols: 4, d: 2, d_prime: 3, k: 1 };
        let mut model = Nnmf::init(dims, &[7, 1], &InitSpec { feature_std: 1.0, seed }).unwrap();
        let mut net = MlpNetwork::zeros(&[7, 1]).unwrap();
        net.weights[0].slice_mut(s![0, 4..]).fill(1.0);
        net.output_activation = model.net.output_activation;
        model.net = net;
        let pmf = Pmf {
            u: model.state.u_prime.index_axis(ndarray::Axis(2), 0).to_owned(),
            v: model.state.v_prime.index_axis(ndarray::Axis(2), 0).to_owned(),
        };
        for n in 0..3 {
            for m in 0..4 {
                let a = model.predict(n, m).unwrap();
                let b = pmf_predict(&pmf, n, m).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
            }
        }
    }
}

/// First-layer pre-activations of NNMF equal the NTN bilinear form over the
/// padded vectors.
fn embedding_max_error(draws: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..5);
        let d_prime = rng.random_range(1..8);
        let hidden = rng.random_range(1..6);
        let dims = ModelDims {
            n_rows: 3,
            n_cols: 3,
            d,
            d_prime,
            k: 1,
        };
        let model = Nnmf::init(dims, &[2 * d + d_prime, hidden, 1], &InitSpec { feature_std: 1.0, seed }).unwrap();
        let w = &model.net.weights[0];
        let emb = embed_nnmf_first_layer(w.view(), d, d_prime, 1).unwrap();
        let (n, m) = (rng.random_range(0..3), rng.random_range(0..3));
        let s = &model.state;
        let x = build_input(
            s.u.row(n),
            s.v.row(m),
            s.u_prime.index_axis(ndarray::Axis(0), n),
            s.v_prime.index_axis(ndarray::Axis(0), m),
        )
        .unwrap();
        let direct = w.dot(&x);
        let ub = emb.pad_row(s.u.row(n), s.u_prime.index_axis(ndarray::Axis(0), n)).unwrap();
        let vb = emb.pad_col(s.v.row(m), s.v_prime.index_axis(ndarray::Axis(0), m)).unwrap();
        let bilinear = emb.bilinear(ub.view(), vb.view());
        for (a, b) in direct.iter().zip(&bilinear) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn ntn_embedding_reproduces_first_layer() {
    let err = embedding_max_error(100);
    assert!(err <= 1e-12, "max abs error {err:e}");
}

use proptest::prelude::*;
use vinlab_core::dataset::{build_dataset, DatasetConfig};
use vinlab_core::gridworld::{generate_map, GridMap, Pos};
use vinlab_core::models::*;
use vinlab_core::render::planner_fields;
use vinlab_core::train::{check_model_gradients, MODEL_GRAD_TOL};
use vinlab_tensor::{ops, Tensor};

fn small_dataset(m: usize, n: usize, seed: u64) -> vinlab_core::dataset::Dataset {
    build_dataset(&DatasetConfig {
        m,
        n,
        n_domains: 2,
        n_traj: 2,
        obstacle_fraction: 0.3,
        seed,
    })
    .unwrap()
}

fn check(config: ModelConfig, seed: u64) {
    let (m, n) = (config.m, config.n);
    let family = config.family;
    let w = ModelWeights::<f64>::init(config, seed).unwrap();
    let err = check_model_gradients(&w, &small_dataset(m, n, seed), 6).unwrap();
    assert!(err < MODEL_GRAD_TOL, "{family} gradient error {err}");
}

#[test]
fn full_model_gradients() {
    check(ModelConfig::new(Family::Vin, 4, 4).with_k(3), 1);
    check(ModelConfig::new(Family::VinUntied, 4, 4).with_k(3), 2);
    check(
        ModelConfig {
            k_high: 2,
            ..ModelConfig::new(Family::Hvin, 8, 8).with_k(4)
        },
        3,
    );
    check(ModelConfig::new(Family::Cnn, 8, 8), 4);
    check(ModelConfig::new(Family::Fcn, 8, 8), 5);
}

#[test]
fn hvin_handles_odd_sizes() {
    check(
        ModelConfig {
            k_high: 2,
            ..ModelConfig::new(Family::Hvin, 7, 5).with_k(3)
        },
        6,
    );
}

fn logits(w: &ModelWeights<f64>, map: &GridMap, p: Pos) -> Vec<f64> {
    w.forward(map, p).unwrap().data().to_vec()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn translation_equivariance_away_from_borders() {
    let k = 3;
    let cfg = ModelConfig {
        fr_hidden: 20,
        ..ModelConfig::new(Family::Vin, 24, 24).with_k(k)
    };
    let mut w = ModelWeights::<f64>::init(cfg, 9).unwrap();
    w.jitter_biases(0.2, 4);
    for (goal, agent, (di, dj)) in [
        ((10, 10), (12, 11), (2, 3)),
        ((11, 9), (9, 9), (3, 4)),
        ((10, 12), (10, 12), (4, 1)),
    ] {
        let a = GridMap::empty(24, 24, Pos::new(goal.0, goal.1)).unwrap();
        let b = GridMap::empty(24, 24, Pos::new(goal.0 + di, goal.1 + dj)).unwrap();
        let la = logits(&w, &a, Pos::new(agent.0, agent.1));
        let lb = logits(&w, &b, Pos::new(agent.0 + di, agent.1 + dj));
        assert_close(&la, &lb, 1e-10);
    }
}

#[test]
fn untied_with_copied_kernels_equals_tied() {
    let map = generate_map(8, 8, 0.3, 5).unwrap();
    for k in [1, 4] {
        let tied = ModelWeights::<f64>::init(ModelConfig::new(Family::Vin, 8, 8).with_k(k), 2).unwrap();
        let mut untied = ModelWeights::<f64>::zeros(ModelConfig::new(Family::VinUntied, 8, 8).with_k(k)).unwrap();
        for name in tied.names().to_vec() {
            let t = tied.get(&name).unwrap().clone();
            if name == "vi_wr" || name == "vi_wv" {
                for it in 0..k {
                    *untied.get_mut(&format!("{name}_{it}")).unwrap() = t.clone();
                }
            } else {
                *untied.get_mut(&name).unwrap() = t;
            }
        }
        for p in map.free_cells() {
            assert_close(&logits(&tied, &map, p), &logits(&untied, &map, p), 1e-12);
        }
    }
}

#[test]
fn hvin_without_high_level_is_a_vin() {
    let map = generate_map(8, 8, 0.3, 8).unwrap();
    let cfg = ModelConfig::new(Family::Hvin, 8, 8).with_k(5);
    let mut hvin = ModelWeights::<f64>::init(cfg.clone(), 3).unwrap();
    for name in hvin.names().to_vec() {
        if name.starts_with("hi_") {
            hvin.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let mut vin = ModelWeights::<f64>::zeros(ModelConfig {
        family: Family::Vin,
        ..cfg
    })
    .unwrap();
    for name in vin.names().to_vec() {
        let src = hvin.get(&name).unwrap();
        let dst = vin.get_mut(&name).unwrap();
        if name == "vi_wr" {
            // keep the reward channel, drop the (now zero) high-level one
            let q = src.shape()[0];
            for c in 0..q {
                dst.data_mut()[c * 9..c * 9 + 9].copy_from_slice(&src.data()[c * 18..c * 18 + 9]);
            }
        } else {
            *dst = src.clone();
        }
    }
    for p in map.free_cells() {
        assert_close(&logits(&hvin, &map, p), &logits(&vin, &map, p), 1e-12);
    }
}

#[test]
fn goal_information_travels_one_cell_per_iteration() {
    // the first iteration only applies the reward, so after K iterations the
    // value is positive exactly within K - 1 moves of the goal
    let goal = Pos::new(3, 4);
    let map = GridMap::empty(12, 12, goal).unwrap();
    for k in 1..=9 {
        let w = oracle_vin_weights::<f64>(12, 12, k, 0.9).unwrap();
        let v = planner_fields(&w, &map).unwrap().value;
        for c in 0..144 {
            let d = map.pos(c).chebyshev(goal);
            let val = v.data()[c];
            if d < k {
                assert!(val > 0.0, "K={k} d={d} value {val}");
            } else {
                assert_eq!(val, 0.0, "K={k} d={d}");
            }
        }
    }
}

#[test]
fn fcn_first_layer_sees_the_whole_map() {
    let (m, n) = (8, 6);
    let cfg = ModelConfig::new(Family::Fcn, m, n);
    let shape = cfg.layout()[0].1.clone();
    assert_eq!(shape[2..], [2 * m - 1, 2 * n - 1]);
    let kernel = Tensor::<f64>::full(&shape, 1.0);
    for (gi, gj) in [(0, 0), (7, 5), (3, 2)] {
        let mut x = Tensor::<f64>::zeros(&[2, m, n]);
        *x.at3_mut(1, gi, gj) = 1.0;
        let y = ops::conv2d_same(&x, &kernel, None).unwrap();
        assert!(
            y.data().iter().all(|&v| v == 1.0),
            "goal at ({gi},{gj}) does not reach every cell"
        );
    }
}

#[test]
fn parameter_counts_follow_layer_shapes() {
    let cnn = ModelWeights::<f32>::zeros(ModelConfig::new(Family::Cnn, 16, 16)).unwrap();
    let convs = [(3, 50), (50, 50), (50, 100), (100, 100), (100, 100)];
    let conv_params: usize = convs.iter().map(|&(i, o)| o * i * 9 + o).sum();
    assert_eq!(cnn.param_count(), conv_params + 8 * 100 * 4 * 4 + 8);
    let vin = ModelWeights::<f32>::zeros(ModelConfig::new(Family::Vin, 8, 8)).unwrap();
    assert_eq!(
        vin.param_count(),
        150 * 2 * 9 + 150 + 150 * 9 + 1 + 10 * 9 + 10 * 9 + 8 * 10 + 8
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_ignores_logit_shift(vals in proptest::collection::vec(-30.0f64..30.0, 8), c in -50.0f64..50.0) {
        let a = action_probs(&Tensor::new(&[8], vals.clone()).unwrap());
        let b = action_probs(&Tensor::new(&[8], vals.iter().map(|v| v + c).collect()).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_vin_matches_exact_vi(gi in 0usize..8, gj in 0usize..8) {
        use vinlab_core::gridworld::{exact_value_iteration, OracleSpec};
        let map = GridMap::empty(8, 8, Pos::new(gi, gj)).unwrap();
        let k = 2 * (8 + 8);
        let w = oracle_vin_weights::<f64>(8, 8, k, 0.9).unwrap();
        let v = planner_fields(&w, &map).unwrap().value;
        let spec = OracleSpec { reward_goal: 1.0, reward_obstacle: 0.0, reward_step: 0.0, gamma: 0.9 };
        let exact = exact_value_iteration(&map, &spec, k).unwrap();
        for (a, b) in v.data().iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

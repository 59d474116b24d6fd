use pcgpt_core::dataset::{generate_trajectory, trajectory_seed, RolloutSpec, TrainingWindow};
use pcgpt_core::model::{ModelConfig, ModelInput, Pcgpt};
use pcgpt_core::training::{train, TrainConfig};
use pcgpt_core::{EditAction, GoalSpec, RewardWeights, Tile, TileProbs};
use pcgpt_tensor::{read_header, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(k: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        context_len: k,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        dropout,
        ..ModelConfig::default()
    }
}

fn windows(n: usize, k: usize, seed: u64) -> Vec<TrainingWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let real = rng.gen_range(1..=k);
            TrainingWindow {
                rtg: (0..k).map(|_| rng.gen_range(-10.0..20.0)).collect(),
                states: (0..k).map(|_| (0..25).map(|_| rng.gen_range(0..5)).collect()).collect(),
                actions: (0..k)
                    .map(|_| EditAction::new(Tile::ALL[rng.gen_range(0..5)], rng.gen_range(0..5), rng.gen_range(0..5)))
                    .collect(),
                real_length: real,
                mask: (0..k).map(|i| i < real).collect(),
            }
        })
        .collect()
}

fn loss(model: &Pcgpt<f64>, ws: &[TrainingWindow]) -> f64 {
    let mut g = Graph::new();
    let l = model
        .window_loss(&mut g, ws, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    g.value(l)[0]
}

#[test]
fn zero_dropout_training_forward_matches_eval() {
    let m = Pcgpt::<f32>::new(small(8, 0.0)).unwrap();
    let input = ModelInput::from_windows(&windows(3, 8, 1)).unwrap();
    let a = m.forward(&input, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = m.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.item, b.item);
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
}

#[test]
fn dropout_changes_training_forward_only() {
    let m = Pcgpt::<f32>::new(small(8, 0.3)).unwrap();
    let input = ModelInput::from_windows(&windows(2, 8, 1)).unwrap();
    let e1 = m.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let e2 = m.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let t1 = m.forward(&input, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(e1.item, e2.item);
    assert_ne!(e1.item, t1.item);
}

#[test]
fn batch_loss_is_mean_of_window_losses() {
    let m = Pcgpt::<f64>::new(small(6, 0.0)).unwrap();
    let ws = windows(5, 6, 3);
    let each: f64 = ws.iter().map(|w| loss(&m, std::slice::from_ref(w))).sum::<f64>() / 5.0;
    assert!((loss(&m, &ws) - each).abs() < 1e-12);
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let m = Pcgpt::<f64>::new(small(6, 0.0)).unwrap();
    let ws = windows(6, 6, 4);
    let mut rev = ws.clone();
    rev.reverse();
    rev.swap(0, 3);
    assert!((loss(&m, &ws) - loss(&m, &rev)).abs() < 1e-12);
}

#[test]
fn one_live_slot_depends_only_on_that_slot() {
    let m = Pcgpt::<f64>::new(small(4, 0.0)).unwrap();
    let mut ws = windows(1, 4, 5);
    ws[0].real_length = 1;
    ws[0].mask = vec![true, false, false, false];
    let before = loss(&m, &ws);
    ws[0].rtg[2] = 999.0;
    ws[0].actions[3] = EditAction::new(Tile::Wall, 4, 4);
    assert_eq!(before, loss(&m, &ws));
    let target = ws[0].actions[0];
    ws[0].actions[0] = EditAction::new(Tile::ALL[(target.item.code() as usize + 1) % 5], target.x, target.y);
    assert_ne!(before, loss(&m, &ws));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Pcgpt::<f32>::new(small(8, 0.1)).unwrap();
    m.save(&path).unwrap();
    let back = Pcgpt::<f32>::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    let input = ModelInput::from_windows(&windows(2, 8, 6)).unwrap();
    let a = m.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = back.forward(&input, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(a.item, b.item);
    assert_eq!(a.y, b.y);
}

#[test]
fn checkpoint_manifest_is_contiguous_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Pcgpt::<f32>::new(small(8, 0.1)).unwrap();
    m.save(&path).unwrap();
    let header = read_header(&mut std::fs::File::open(&path).unwrap()).unwrap();
    let mut offset = 0;
    for (entry, (_, name, t)) in header.params.iter().zip(m.params.iter()) {
        assert_eq!(entry.name, name);
        assert_eq!(entry.shape, t.shape());
        assert_eq!(entry.offset, offset);
        offset += entry.len;
    }
    assert_eq!(offset, m.num_parameters());
    let names: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
    for expected in ["embed.rtg.weight", "embed.state.weight", "embed.action.weight", "embed.time", "head.loc_y.bias"] {
        assert!(names.contains(&expected), "{expected} missing");
    }
}

#[test]
fn modality_weights_do_not_grow_with_context() {
    let a = Pcgpt::<f32>::new(small(4, 0.0)).unwrap();
    let b = Pcgpt::<f32>::new(small(16, 0.0)).unwrap();
    // Only the time table depends on K; everything else is shared over steps.
    assert_eq!(b.num_parameters() - a.num_parameters(), 12 * 16);
}

fn tiny_dataset() -> Vec<pcgpt_core::dataset::Trajectory> {
    let (probs, goal, weights) = (TileProbs::default(), GoalSpec::default(), RewardWeights::default());
    let spec = RolloutSpec {
        width: 5,
        height: 5,
        tile_probs: &probs,
        goal: &goal,
        weights: &weights,
    };
    (0..8)
        .map(|i| generate_trajectory(&spec, trajectory_seed(1, i), 0.3, 20).unwrap())
        .collect()
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = tiny_dataset();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 60,
        batch_size: 8,
        lr_base: 3e-3,
        warmup_steps: 10,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Pcgpt::<f32>::new(small(8, 0.1)).unwrap();
        let log = train(&mut m, &data, &cfg, |_| {}).unwrap();
        (m, log)
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.params, m2.params);
    let head: f64 = log1[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = log1[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "{tail} !< {head}");
    assert!((log1[0].lr - 3e-4).abs() < 1e-12);
    assert!((log1[59].lr - 3e-3).abs() < 1e-12);
}

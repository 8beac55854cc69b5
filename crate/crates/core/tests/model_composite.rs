use std::sync::Arc;

use healvit::grid::{state_manifest, static_manifest, GridField, GridSpec, INPUT_CHANNELS, STATE_CHANNELS};
use healvit::model::{Model, ModelConfig};
use healvit::nn::gradcheck::{check_gradients_with, Stencil};
use healvit::nn::{Tape, Tensor, Var};
use healvit::training::{
    fit_normalization, parse_phases, synth_dataset, train_curriculum, OptimizerConfig, TrainOptions,
};
use healvit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn smallest(depth: usize) -> ModelConfig {
    ModelConfig {
        grid: GridSpec::new(6, 12).unwrap(),
        fine_level: 1,
        window: 1,
        coarse_window: 1,
        latent: 8,
        processor_depth: depth,
        head_dim: 4,
        tie_edge_embeddings: false,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Moves every trainable parameter away from its initialization so that no
/// gradient sits near zero by construction.
fn jitter(model: &mut Model, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        if p.trainable {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn gradient_check<F>(model: &Model, out_len: usize, rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&Model, &mut Tape) -> Result<Var>,
{
    let r = Arc::new((0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    let report = check_gradients_with(
        model.params(),
        |tape: &mut Tape| {
            let y = f(model, tape)?;
            tape.dot_const(y, Arc::clone(&r))
        },
        Stencil::FivePoint,
        1e-3,
        12,
        rng,
    )
    .unwrap();
    assert!(report.checked > 100);
    assert!(
        report.max_rel_error <= 1e-4,
        "{:e} at {:?} {:?}",
        report.max_rel_error,
        report.worst,
        report.worst_values
    );
    report.max_rel_error
}

#[test]
fn encoder_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(smallest(2), seed).unwrap();
        jitter(&mut model, &mut rng);
        let g = model.config().grid.num_nodes();
        let x = random_tensor(&mut rng, g, INPUT_CHANNELS);
        gradient_check(&model, 48 * 8, &mut rng, |m, tape| {
            let x = tape.input(x.clone());
            m.encode(tape, x)
        });
    }
}

#[test]
fn composite_gradients_smallest_config() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(smallest(2), seed).unwrap();
        jitter(&mut model, &mut rng);
        let g = model.config().grid.num_nodes();
        let (p, c, s) = (
            random_tensor(&mut rng, g, STATE_CHANNELS),
            random_tensor(&mut rng, g, STATE_CHANNELS),
            random_tensor(&mut rng, g, 2),
        );
        gradient_check(&model, g * STATE_CHANNELS, &mut rng, |m, tape| {
            let (p, c, s) = (tape.input(p.clone()), tape.input(c.clone()), tape.input(s.clone()));
            m.step(tape, p, c, s)
        });
    }
}

#[test]
fn composite_gradients_level_two() {
    let cfg = ModelConfig {
        grid: GridSpec::new(12, 24).unwrap(),
        fine_level: 2,
        window: 2,
        coarse_window: 1,
        ..smallest(2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::new(cfg, 11).unwrap();
    jitter(&mut model, &mut rng);
    let m = 192;
    let x = random_tensor(&mut rng, m, 8);
    gradient_check(&model, m * 16, &mut rng, |model, tape| {
        let x = tape.input(x.clone());
        model.process(tape, x)
    });
    let g = model.config().grid.num_nodes();
    let x = random_tensor(&mut rng, m, 16);
    gradient_check(&model, g * STATE_CHANNELS, &mut rng, |model, tape| {
        let x = tape.input(x.clone());
        model.decode(tape, x)
    });
}

#[test]
fn zeroed_blocks_reduce_processor_to_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::new(smallest(4), 3).unwrap();
    model.zero_block_outputs();
    let x = random_tensor(&mut rng, 48, 8);
    let mut tape = Tape::new(model.params());
    let xv = tape.input(x);
    let full = model.process(&mut tape, xv).unwrap();
    let down = model.downsample(&mut tape, xv).unwrap();
    assert_eq!(tape.value(down).shape(), &[12, 16]);
    let up = model.upsample(&mut tape, down).unwrap();
    let expected = tape.concat(&[up, xv]).unwrap();
    assert_eq!(tape.value(full).shape(), &[48, 16]);
    assert_eq!(tape.value(full), tape.value(expected));
}

#[test]
fn rescaled_channel_gives_identical_network_input() {
    let cfg = smallest(2);
    let data = synth_dataset(cfg.grid, 6, 2).unwrap();
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    fit_normalization(&mut model, &data).unwrap();
    let before = model.normalize_state(&data.states[3]).unwrap();

    let mut scaled = data.clone();
    for s in &mut scaled.states {
        for v in s.channel_mut(7) {
            *v *= 2.0;
        }
    }
    fit_normalization(&mut model, &scaled).unwrap();
    let after = model.normalize_state(&scaled.states[3]).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn rollout_has_no_hidden_state() {
    let cfg = smallest(2);
    let data = synth_dataset(cfg.grid, 4, 5).unwrap();
    let mut model = Model::new(cfg, 5).unwrap();
    fit_normalization(&mut model, &data).unwrap();
    let (prev, cur) = (&data.states[0], &data.states[1]);
    let two = model.rollout(cur, prev, &data.statics, 2).unwrap();
    let one = model.forward_step(cur, prev, &data.statics).unwrap();
    assert_eq!(two[0], one);
    // The second step sees the prediction without a denormalize round trip.
    let again = model.forward_step(&one, cur, &data.statics).unwrap();
    for (a, b) in two[1].data().iter().zip(again.data()) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
    assert!(two.iter().all(|f| f.data().iter().all(|v| v.is_finite())));
}

#[test]
fn manifest_mismatch_is_rejected() {
    let cfg = smallest(2);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let x = GridField::zeros(cfg.grid, state_manifest());
    let s = GridField::zeros(cfg.grid, static_manifest());
    assert!(model.forward_step(&s, &x, &s).is_err());
    let other = GridField::zeros(GridSpec::new(8, 16).unwrap(), state_manifest());
    assert!(model.forward_step(&other, &other, &s).is_err());
}

#[test]
fn overfits_one_transition() {
    // Fewer grid rows than decoder features, so an exact fit exists.
    let cfg = ModelConfig {
        grid: GridSpec::new(4, 8).unwrap(),
        ..smallest(2)
    };
    let data = synth_dataset(cfg.grid, 3, 9).unwrap();
    let mut model = Model::new(cfg, 9).unwrap();
    fit_normalization(&mut model, &data).unwrap();
    let opts = TrainOptions {
        optimizer: OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let phases = parse_phases("1x3000@cosine:1e-2").unwrap();
    train_curriculum(&mut model, &data, &phases, &opts, |_| {}).unwrap();
    let pred = model
        .forward_step(&data.states[1], &data.states[0], &data.statics)
        .unwrap();
    let p = model.normalize_state(&pred).unwrap();
    let t = model.normalize_state(&data.states[2]).unwrap();
    let err = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-2, "max abs error {err}");
}

//! Finite-difference validation of the composed model's gradients.

use wavevc::compute::{grad_check, GradTape, Tensor};
use wavevc::rng::SplitMix64;
use wavevc::wavenet::{build_training_graph, init_params, ModelConfig, ModelParams};

fn toy_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        layers_per_block: 3,
        kernel_size: 2,
        residual_channels: 8,
        skip_channels: 8,
        classes: 16,
        cond_channels: 4,
    }
}

fn toy_batch(config: &ModelConfig, t_len: usize, seed: u64) -> (Vec<u16>, Tensor) {
    let mut rng = SplitMix64::new(seed);
    let classes = (0..t_len).map(|_| rng.below(config.classes) as u16).collect();
    let cond = Tensor::new(
        vec![config.cond_channels, t_len],
        (0..config.cond_channels * t_len)
            .map(|_| rng.uniform(1.0))
            .collect(),
    )
    .unwrap();
    (classes, cond)
}

fn loss_of(params: &ModelParams, classes: &[u16], cond: &Tensor) -> f64 {
    let mut tape = GradTape::new(params.tensors());
    let (_, loss) = build_training_graph(params, &mut tape, classes, cond, 0, 1.0).unwrap();
    tape.node(loss).data[0]
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let config = toy_config();
    let params = init_params(&config, 1234).unwrap();
    let (classes, cond) = toy_batch(&config, 40, 77);

    let grads = {
        let mut tape = GradTape::new(params.tensors());
        let (_, loss) =
            build_training_graph(&params, &mut tape, &classes, &cond, 0, 1.0).unwrap();
        tape.backward(loss).unwrap()
    };
    let worst = grad_check(
        |probe| {
            let p = params.with_tensors(probe.to_vec())?;
            Ok(loss_of(&p, &classes, &cond))
        },
        params.tensors(),
        &grads.params,
        24,
        1e-5,
        99,
    )
    .unwrap();
    assert!(worst < 1e-4, "max relative error {worst:.3e}");
}

#[test]
fn masked_objective_gradients_also_check_out() {
    let config = toy_config();
    let params = init_params(&config, 4321).unwrap();
    let (classes, cond) = toy_batch(&config, 30, 78);
    let mask = 17;
    let scale = 1.0 / (classes.len() - mask) as f64;

    let grads = {
        let mut tape = GradTape::new(params.tensors());
        let (_, loss) =
            build_training_graph(&params, &mut tape, &classes, &cond, mask, scale).unwrap();
        tape.backward(loss).unwrap()
    };
    let worst = grad_check(
        |probe| {
            let p = params.with_tensors(probe.to_vec())?;
            let mut tape = GradTape::new(p.tensors());
            let (_, loss) =
                build_training_graph(&p, &mut tape, &classes, &cond, mask, scale).unwrap();
            Ok(tape.node(loss).data[0])
        },
        params.tensors(),
        &grads.params,
        16,
        1e-5,
        100,
    )
    .unwrap();
    assert!(worst < 1e-4, "max relative error {worst:.3e}");
}

#[test]
fn checker_flags_a_corrupted_model_gradient() {
    let config = toy_config();
    let params = init_params(&config, 555).unwrap();
    let (classes, cond) = toy_batch(&config, 20, 79);
    let mut grads = {
        let mut tape = GradTape::new(params.tensors());
        let (_, loss) =
            build_training_graph(&params, &mut tape, &classes, &cond, 0, 1.0).unwrap();
        tape.backward(loss).unwrap()
    };
    // corrupt every coordinate of one weight tensor by x2 so random probes
    // land on it
    for g in grads.params[3].as_mut().unwrap().data.iter_mut() {
        *g *= 2.0;
    }
    let mut worst = 0.0f64;
    for seed in 0..40 {
        let w = grad_check(
            |probe| {
                let p = params.with_tensors(probe.to_vec())?;
                Ok(loss_of(&p, &classes, &cond))
            },
            params.tensors(),
            &grads.params,
            4,
            1e-5,
            seed,
        )
        .unwrap();
        worst = worst.max(w);
        if worst > 0.5 {
            break;
        }
    }
    assert!(worst > 0.5, "corruption went undetected: {worst:.3e}");
}

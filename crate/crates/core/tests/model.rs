mod common;

use common::{check_gradients, random_tensor, rng};
use mixhar_core::model::{covariances, BackboneConfig, HarModel, ModelSpec};
use mixhar_core::rng::seeded;
use mixhar_core::tensor::{Mode, ParamStore, Tape, Tensor, Var};
use nalgebra::DMatrix;

fn spec(h: usize, l: usize, c: usize) -> ModelSpec {
    ModelSpec {
        in_channels: h,
        window_len: l,
        num_classes: c,
        backbone: BackboneConfig::default(),
    }
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        in_channels: 2,
        window_len: 14,
        num_classes: 3,
        backbone: BackboneConfig {
            filters: [3, 4, 5],
            kernel_sizes: [3, 3, 3],
            dropout_rate: 0.3,
            fc_hidden: 6,
        },
    }
}

fn slot(store: &ParamStore, name: &str) -> usize {
    (0..store.len()).find(|&i| store.name(i) == name).unwrap()
}

#[test]
fn backbone_shape_chain() {
    let model = HarModel::new(spec(3, 30, 6), true).unwrap();
    assert_eq!(model.feature_shape(), (96, 20));
    let params = model.init_params(4);
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 3, 30], 1.0);
    let mut tape = Tape::new();
    let vars = tape.frozen_params(&params);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &vars, xv, Mode::Eval, &mut seeded(0)).unwrap();
    assert_eq!(tape.value(out.features).shape(), &[2, 96, 20]);
    assert_eq!(tape.value(out.calibrated).shape(), &[2, 96, 20]);
    assert_eq!(tape.value(out.embedding).shape(), &[2, 64]);
    assert_eq!(tape.value(out.logits).shape(), &[2, 6]);
}

#[test]
fn eval_mode_is_repeatable_and_zero_weights_give_zero_features() {
    let model = HarModel::new(spec(3, 30, 4), true).unwrap();
    let params = model.init_params(9);
    let mut r = rng(2);
    let windows: Vec<Vec<f64>> = (0..3).map(|_| random_tensor(&mut r, &[90], 1.0).into_data()).collect();
    let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
    let a = model.predict_probs(&params, &refs, Mode::Eval, &mut seeded(1)).unwrap();
    let b = model.predict_probs(&params, &refs, Mode::Eval, &mut seeded(2)).unwrap();
    assert_eq!(a, b);

    let zero = model.zero_params();
    let mut tape = Tape::new();
    let vars = tape.frozen_params(&zero);
    let x = tape.constant(model.batch_input(refs.iter().copied()).unwrap());
    let f = model.backbone_forward(&mut tape, &vars, x, Mode::Train, &mut seeded(3)).unwrap();
    assert!(tape.value(f).data().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_head_gives_second_layer_bias() {
    let model = HarModel::new(spec(3, 30, 4), false).unwrap();
    let mut params = model.zero_params();
    let b = slot(&params, "fc2.bias");
    params.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
    let mut tape = Tape::new();
    let vars = tape.frozen_params(&params);
    let f = tape.constant(Tensor::zeros(vec![1, 96, 20]));
    let (_, logits) = model.classify(&mut tape, &vars, f).unwrap();
    assert_eq!(tape.value(logits).data(), &[0.5, -1.0, 2.0, 0.0]);
}

#[test]
fn covariance_examples() {
    let f = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let (m_c, _) = covariances(&f).unwrap();
    assert_eq!(m_c.data(), &[2.0, -2.0, -2.0, 2.0]);

    let constant_in_time = Tensor::new(vec![3, 4], vec![1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
    let (m_c, _) = covariances(&constant_in_time).unwrap();
    assert!(m_c.data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn covariances_are_symmetric_psd() {
    let mut r = rng(77);
    for k in 0..1000 {
        let c = 2 + k % 5;
        let t = 2 + (k / 5) % 7;
        let f = random_tensor(&mut r, &[c, t], 3.0);
        let (m_c, m_t) = covariances(&f).unwrap();
        for (m, n) in [(m_c, c), (m_t, t)] {
            let d = m.data();
            for i in 0..n {
                for j in 0..n {
                    assert!((d[i * n + j] - d[j * n + i]).abs() <= 1e-12);
                }
            }
            let eig = DMatrix::from_row_slice(n, n, d).symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-9, "min eigenvalue {min} for {c}x{t}");
        }
    }
}

#[test]
fn zero_calibration_scales_by_a_quarter() {
    let model = HarModel::new(spec(3, 30, 4), true).unwrap();
    let params = model.zero_params();
    let mut r = rng(3);
    let f = random_tensor(&mut r, &[2, 96, 20], 1.0);
    let mut tape = Tape::new();
    let vars = tape.frozen_params(&params);
    let fv = tape.constant(f.clone());
    let out = model.calibration_attention(&mut tape, &vars, fv).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(f.data()) {
        assert_eq!(*a, 0.25 * b);
    }
}

#[test]
fn calibration_contracts_nonzero_entries() {
    let model = HarModel::new(tiny_spec(), true).unwrap();
    for seed in 0..20 {
        let params = model.init_params(seed);
        let mut r = rng(seed);
        let (c, t) = model.feature_shape();
        let f = random_tensor(&mut r, &[1, c, t], 2.0);
        let mut tape = Tape::new();
        let vars = tape.frozen_params(&params);
        let fv = tape.constant(f.clone());
        let out = model.calibration_attention(&mut tape, &vars, fv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(f.data()) {
            assert!(a.abs() < b.abs());
        }
    }
}

#[test]
fn suppressed_channels_do_not_reach_the_logits() {
    let model = HarModel::new(tiny_spec(), true).unwrap();
    let mut params = model.init_params(5);
    let (c, t) = model.feature_shape();
    let mix_w = slot(&params, "calibration.sensor_mix.weight");
    params.get_mut(mix_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mix_b = slot(&params, "calibration.sensor_mix.bias");
    params.get_mut(mix_b).data_mut()[2] = -60.0;
    // the time branch reads every channel, so pin it to a constant as well
    let time_w = slot(&params, "calibration.time_mix.weight");
    params.get_mut(time_w).data_mut().iter_mut().for_each(|v| *v = 0.0);

    let mut r = rng(8);
    let f = random_tensor(&mut r, &[1, c, t], 1.0);
    let mut g = f.clone();
    for j in 0..t {
        g.data_mut()[2 * t + j] += 5.0 * (j as f64 - 3.0);
    }
    let logits = |feat: &Tensor| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = tape.frozen_params(&params);
        let fv = tape.constant(feat.clone());
        let cal = model.calibration_attention(&mut tape, &vars, fv).unwrap();
        let (_, l) = model.classify(&mut tape, &vars, cal).unwrap();
        tape.value(l).data().to_vec()
    };
    let (a, b) = (logits(&f), logits(&g));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

fn model_loss(model: &HarModel, tape: &mut Tape, params: &[Var], input: Var, target: &Tensor, dropout_seed: u64) -> Var {
    let mut drop = seeded(dropout_seed);
    let out = model.forward(tape, params, input, Mode::Train, &mut drop).unwrap();
    let p = tape.softmax(out.logits).unwrap();
    let ce = tape.cross_entropy(p, target).unwrap();
    tape.mean(ce).unwrap()
}

/// Initial parameters with nonzero biases. With zero biases a conv output
/// whose receptive field was fully dropped sits exactly on the ReLU kink, where
/// central differences see half the slope.
fn generic_params(model: &HarModel, seed: u64) -> ParamStore {
    let mut params = model.init_params(seed);
    let mut r = rng(seed ^ 0xb1a5);
    for i in 0..params.len() {
        if params.name(i).ends_with(".bias") {
            let n = params.get(i).numel();
            let noise = random_tensor(&mut r, &[n], 0.1);
            params.get_mut(i).data_mut().copy_from_slice(noise.data());
        }
    }
    params
}

fn soft_targets(seed: u64, n: usize, c: usize) -> Tensor {
    let mut r = rng(seed);
    let raw = random_tensor(&mut r, &[n, c], 1.0);
    let mut data = Vec::new();
    for row in raw.data().chunks(c) {
        let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / z));
    }
    Tensor::new(vec![n, c], data).unwrap()
}

/// Every coordinate of every parameter and of the input, on a tiny model.
#[test]
fn grad_full_model_all_coordinates() {
    for calibration in [true, false] {
        let model = HarModel::new(tiny_spec(), calibration).unwrap();
        for seed in 0..20 {
            let params = generic_params(&model, seed);
            let mut r = rng(1000 + seed);
            let x = random_tensor(&mut r, &[2, 2, 14], 1.0);
            let target = soft_targets(seed, 2, 3);
            let mut inputs = params.values().to_vec();
            inputs.push(x);
            check_gradients(&inputs, None, |tape, vars| {
                let (p, x) = vars.split_at(vars.len() - 1);
                model_loss(&model, tape, p, x[0], &target, seed)
            })
            .unwrap_or_else(|e| panic!("calibration={calibration} seed {seed}: {e}"));
        }
    }
}

/// Sampled coordinates at the default backbone size.
#[test]
fn grad_full_model_default_size() {
    let model = HarModel::new(spec(3, 16, 4), true).unwrap();
    for seed in 0..20 {
        let params = generic_params(&model, seed);
        let mut r = rng(2000 + seed);
        let x = random_tensor(&mut r, &[2, 3, 16], 1.0);
        let target = soft_targets(seed, 2, 4);
        let mut inputs = params.values().to_vec();
        inputs.push(x);
        let coords: Vec<Vec<usize>> = inputs
            .iter()
            .map(|t| (0..3).map(|k| (k * 7919 + seed as usize * 31) % t.numel()).collect())
            .collect();
        check_gradients(&inputs, Some(&coords), |tape, vars| {
            let (p, x) = vars.split_at(vars.len() - 1);
            model_loss(&model, tape, p, x[0], &target, seed)
        })
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn grad_calibration_block() {
    let model = HarModel::new(tiny_spec(), true).unwrap();
    let (c, t) = model.feature_shape();
    for seed in 0..20 {
        let params = model.init_params(seed);
        let mut r = rng(3000 + seed);
        let f = random_tensor(&mut r, &[2, c, t], 1.5);
        let proj = random_tensor(&mut r, &[2 * c * t], 1.0);
        let mut inputs: Vec<Tensor> = params.values()[6..14].to_vec();
        inputs.push(f);
        check_gradients(&inputs, None, |tape, vars| {
            let mut all = tape.frozen_params(&params);
            all[6..14].copy_from_slice(&vars[..8]);
            let out = model.calibration_attention(tape, &all, vars[8]).unwrap();
            let flat = tape.reshape(out, vec![2 * c * t]).unwrap();
            tape.weighted_sum(flat, proj.data().to_vec()).unwrap()
        })
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn batch_input_rejects_wrong_window_size() {
    let model = HarModel::new(spec(3, 30, 4), true).unwrap();
    let short = vec![0.0; 89];
    assert!(model.batch_input([short.as_slice()]).is_err());
    assert!(model.batch_input(std::iter::empty()).is_err());
}

//! Every layer's backward pass against central finite differences in f64.

use eegvae_core::rng::{named_stream, Stream};
use eegvae_nn::gradcheck::relative_error;
use eegvae_nn::layers::*;
use eegvae_nn::Tensor;
use rand::Rng;

fn random(n: usize, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss `Σ y·r` for a fixed random projection `r`.
fn projected(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, r: &[f64]) -> f64 {
    let y = layer.forward(x.clone(), &mut named_stream(9, "dropout"));
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn check(mut layer: Box<dyn Layer<f64>>, shape: [usize; 4]) {
    let mut rng = named_stream(1, "layer-check");
    let x = Tensor::from_vec(shape, random(shape.iter().product(), &mut rng));
    let y = layer.forward(x.clone(), &mut named_stream(9, "dropout"));
    let r = random(y.data.len(), &mut rng);
    let dx = layer.backward(Tensor::from_vec(y.shape, r.clone()));
    assert_eq!(dx.shape, x.shape);
    let grads: Vec<Vec<f64>> = layer.params_mut().iter().map(|p| p.grad.clone()).collect();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..x.data.len()).step_by(1 + x.data.len() / 40) {
        let mut xp = x.clone();
        xp.data[i] += h;
        let up = projected(layer.as_mut(), &xp, &r);
        xp.data[i] -= 2.0 * h;
        let down = projected(layer.as_mut(), &xp, &r);
        worst = worst.max(relative_error(dx.data[i], (up - down) / (2.0 * h)));
    }
    for (pi, g) in grads.iter().enumerate() {
        for i in (0..g.len()).step_by(1 + g.len() / 20) {
            let orig = layer.params_mut()[pi].value[i];
            layer.params_mut()[pi].value[i] = orig + h;
            let up = projected(layer.as_mut(), &x, &r);
            layer.params_mut()[pi].value[i] = orig - h;
            let down = projected(layer.as_mut(), &x, &r);
            layer.params_mut()[pi].value[i] = orig;
            worst = worst.max(relative_error(g[i], (up - down) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn conv1d_same_padding_even_kernel() {
    let mut rng = named_stream(2, "init");
    check(Box::new(Conv1d::<f64>::new(2, 3, 6, 1, true, &mut rng)), [2, 2, 3, 11]);
}

#[test]
fn conv1d_odd_kernel_and_groups() {
    let mut rng = named_stream(3, "init");
    check(Box::new(Conv1d::<f64>::new(4, 4, 5, 4, false, &mut rng)), [2, 4, 1, 9]);
    check(Box::new(Conv1d::<f64>::new(4, 6, 3, 2, true, &mut rng)), [1, 4, 2, 7]);
}

#[test]
fn spatial_conv_and_deconv() {
    let mut rng = named_stream(4, "init");
    check(Box::new(SpatialConv::<f64>::new(2, 3, 5, &mut rng)), [2, 2, 5, 8]);
    check(Box::new(SpatialDeconv::<f64>::new(2, 3, 5, &mut rng)), [2, 6, 1, 8]);
}

#[test]
fn batch_norm_training_mode() {
    let mut bn = BatchNorm::<f64>::new(3);
    bn.gamma.value = vec![1.5, -0.7, 0.3];
    bn.beta.value = vec![0.1, 0.2, -0.3];
    check(Box::new(bn), [3, 3, 2, 5]);
}

#[test]
fn activations_pooling_and_resampling() {
    check(Box::new(Act::<f64>::new(Activation::Leaky(0.01))), [2, 2, 2, 6]);
    check(Box::new(Act::<f64>::new(Activation::Elu)), [2, 2, 2, 6]);
    check(Box::new(AvgPool::<f64>::new(3)), [2, 2, 2, 10]);
    check(Box::new(Upsample::<f64>::new(3, 10)), [2, 2, 1, 3]);
}

#[test]
fn dense_and_dropout() {
    let mut rng = named_stream(5, "init");
    check(Box::new(Dense::<f64>::new(12, 5, &mut rng)), [4, 3, 1, 4]);
    check(Box::new(Dropout::<f64>::new(0.3)), [4, 2, 1, 8]);
}

#[test]
fn conv1d_matches_direct_convolution() {
    let mut rng = named_stream(6, "init");
    let conv = Conv1d::<f64>::new(1, 1, 4, 1, false, &mut rng);
    let x: Vec<f64> = (0..7).map(|i| i as f64 + 1.0).collect();
    let y = conv.infer(Tensor::from_vec([1, 1, 1, 7], x.clone()));
    let w = &conv.weight.value;
    for t in 0..7 {
        let want: f64 = (0..4)
            .filter_map(|k| {
                let j = t as isize + k as isize - 1;
                (0..7).contains(&j).then(|| w[k] * x[j as usize])
            })
            .sum();
        assert!((y.data[t] - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_inference_uses_running_statistics() {
    let mut bn = BatchNorm::<f64>::new(1);
    bn.running_mean = vec![2.0];
    bn.running_var = vec![4.0 - 1e-5];
    let y = bn.infer(Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]));
    assert!((y.data[0]).abs() < 1e-12 && (y.data[1] - 2.0).abs() < 1e-9);
}

#[test]
fn dropout_is_identity_at_inference() {
    let d = Dropout::<f64>::new(0.5);
    let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(d.infer(x.clone()), x);
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Network, Slot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORWARD_SEED: u64 = 0x5eed;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares backpropagated parameter gradients against central finite
/// differences and returns the largest relative error.
///
/// Every forward pass runs in train mode with the same dropout seed on a
/// private copy of `net`, so stochastic layers see identical masks.
/// A network without trainable parameters yields 0.
pub fn check_gradients<F>(net: &Network<f64>, input: &Tensor<f64>, loss_fn: F, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::arg(format!("finite-difference step {eps} must be positive")));
    }
    let mut work = net.clone();
    let eval = |n: &mut Network<f64>| -> Result<f64> {
        let (y, _) = n.forward(input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(FORWARD_SEED))?;
        Ok(loss_fn(&y)?.0)
    };

    let (y, mut tape) = work.clone().forward(input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(FORWARD_SEED))?;
    let (_, dy) = loss_fn(&y)?;
    let grads = tape.backward(&work, &dy)?;

    let mut worst = 0.0f64;
    for pi in 0..work.params().len() {
        let Some(analytic) = grads.params[pi].clone() else {
            continue;
        };
        for j in 0..analytic.len() {
            let orig = work.params()[pi].value.data()[j];
            work.params_mut()[pi].value.data_mut()[j] = orig + eps;
            let hi = eval(&mut work)?;
            work.params_mut()[pi].value.data_mut()[j] = orig - eps;
            let lo = eval(&mut work)?;
            work.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        // running statistics drift with every train-mode pass; restore them
        work.params_mut()
            .iter_mut()
            .zip(net.params())
            .filter(|(p, _)| !p.kind.trainable())
            .for_each(|(p, o)| p.value = o.value.clone());
    }
    Ok(worst)
}

/// Eval-mode check of the gradient arriving at an intermediate slot (and at
/// the input when `slot == 0`) against finite differences of the output
/// functional `loss_fn`.
pub fn check_slot_gradients<F>(
    net: &Network<f64>,
    input: &Tensor<f64>,
    slot: Slot,
    loss_fn: F,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::arg(format!("finite-difference step {eps} must be positive")));
    }
    let (y, mut tape) = net.forward_eval(input)?;
    let base = tape.value(slot).clone();
    let (_, dy) = loss_fn(&y)?;
    let grads = tape.backward_retaining(net, &dy, &[slot])?;
    let analytic = match slot {
        0 => grads.input.clone(),
        s => grads
            .slot(s)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape())),
    };
    let mut worst = 0.0f64;
    for j in 0..base.len() {
        let mut hi = base.clone();
        hi.data_mut()[j] += eps;
        let mut lo = base.clone();
        lo.data_mut()[j] -= eps;
        let fh = loss_fn(&net.forward_eval_with(input, slot, &hi)?.0)?.0;
        let fl = loss_fn(&net.forward_eval_with(input, slot, &lo)?.0)?.0;
        worst = worst.max(relative_error(analytic.data()[j], (fh - fl) / (2.0 * eps)));
    }
    Ok(worst)
}

/// A small network exercising one layer type, with a random input and a
/// fixed quadratic probe loss.
pub struct LayerProbe {
    pub layer: &'static str,
    pub net: Network<f64>,
    pub input: Tensor<f64>,
    weights: Vec<f64>,
}

impl LayerProbe {
    /// `Σ rᵢ yᵢ + ¼ Σ yᵢ²` with fixed random `r`.
    pub fn loss(&self, y: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        if y.len() != self.weights.len() {
            return Err(Error::arg("probe output size changed"));
        }
        let value = y
            .data()
            .iter()
            .zip(&self.weights)
            .map(|(&v, &r)| r * v + 0.25 * v * v)
            .sum();
        let grad = y
            .data()
            .iter()
            .zip(&self.weights)
            .map(|(&v, &r)| r + 0.5 * v)
            .collect();
        Ok((value, Tensor::from_vec(y.shape(), grad)))
    }

    pub fn max_relative_error(&self, eps: f64) -> Result<f64> {
        check_gradients(&self.net, &self.input, |y| self.loss(y), eps)
    }
}

/// One probe per layer type, all on 4×4 inputs, seeded.
pub fn layer_probes(seed: u64) -> Result<Vec<LayerProbe>> {
    use super::{Activation, GraphBuilder, LayerSpec};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |i, o, k, s, p, bias| LayerSpec::Conv2d {
        in_ch: i,
        out_ch: o,
        kernel: k,
        stride: s,
        padding: p,
        bias,
    };
    let act = |kind| LayerSpec::Activation { kind };
    let mut graphs: Vec<(&'static str, GraphBuilder)> = Vec::new();

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    b.then("conv", conv(2, 3, 3, 1, 1, true), 0)?;
    graphs.push(("conv2d", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    b.then("conv", conv(2, 2, 2, 2, 0, true), 0)?;
    graphs.push(("conv2d_strided", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    b.then(
        "up",
        LayerSpec::ConvTranspose2d {
            in_ch: 2,
            out_ch: 2,
            kernel: 2,
            stride: 2,
            padding: 0,
            bias: true,
        },
        0,
    )?;
    graphs.push(("conv_transpose2d", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let c = b.then("conv", conv(2, 2, 3, 1, 1, true), 0)?;
    b.then("pool", LayerSpec::MaxPool2d { window: 2 }, c)?;
    graphs.push(("max_pool2d", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let c = b.then("conv", conv(2, 2, 3, 1, 1, false), 0)?;
    b.then("bn", LayerSpec::batch_norm(2), c)?;
    graphs.push(("batch_norm_spatial", b));

    let mut b = GraphBuilder::new(&[1, 4, 4]);
    let f = b.then("flat", LayerSpec::Flatten, 0)?;
    let n = b.then("bn", LayerSpec::batch_norm(16), f)?;
    b.then("fc", LayerSpec::Dense { inputs: 16, outputs: 5 }, n)?;
    graphs.push(("batch_norm_dense", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let c = b.then("conv", conv(2, 2, 3, 1, 1, true), 0)?;
    b.then("drop", LayerSpec::Dropout { rate: 0.3 }, c)?;
    graphs.push(("dropout", b));

    let mut b = GraphBuilder::new(&[1, 4, 4]);
    let f = b.then("flat", LayerSpec::Flatten, 0)?;
    b.then("fc", LayerSpec::Dense { inputs: 16, outputs: 4 }, f)?;
    graphs.push(("dense", b));

    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
    ] {
        let mut b = GraphBuilder::new(&[2, 4, 4]);
        let c = b.then("conv", conv(2, 2, 3, 1, 1, true), 0)?;
        b.then(name, act(kind), c)?;
        graphs.push((name, b));
    }

    let mut b = GraphBuilder::new(&[1, 4, 4]);
    let f = b.then("flat", LayerSpec::Flatten, 0)?;
    let d = b.then("fc", LayerSpec::Dense { inputs: 16, outputs: 4 }, f)?;
    b.then("softmax", act(Activation::Softmax), d)?;
    graphs.push(("softmax", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let l = b.then("left", conv(2, 2, 3, 1, 1, true), 0)?;
    let r = b.then("right", conv(2, 1, 1, 1, 0, true), 0)?;
    let cat = b.add("cat", LayerSpec::Concat, &[l, r])?;
    b.then("mix", conv(3, 2, 3, 1, 1, true), cat)?;
    graphs.push(("concat", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let c = b.then("conv", conv(2, 3, 3, 1, 1, true), 0)?;
    let g = b.then("gap", LayerSpec::GlobalAvgPool, c)?;
    b.then("fc", LayerSpec::Dense { inputs: 3, outputs: 2 }, g)?;
    graphs.push(("global_avg_pool", b));

    let mut b = GraphBuilder::new(&[2, 4, 4]);
    let c = b.then("conv", conv(2, 2, 3, 1, 1, true), 0)?;
    b.then("up", LayerSpec::Upsample { factor: 2 }, c)?;
    graphs.push(("upsample", b));

    let batch = 3;
    let mut probes = Vec::with_capacity(graphs.len());
    for (layer, builder) in graphs {
        let arch = builder.finish();
        let mut net = Network::<f64>::new(arch, &mut rng)?;
        // move gammas/betas away from their trivial initial values
        for p in net.params_mut() {
            if matches!(p.kind, super::ParamKind::Gamma | super::ParamKind::Beta | super::ParamKind::Bias) {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(net.input_shape());
        let len: usize = shape.iter().product();
        let input = Tensor::from_vec(&shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out_len = batch * net.output_shape().iter().product::<usize>();
        let weights = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        probes.push(LayerProbe {
            layer,
            net,
            input,
            weights,
        });
    }
    Ok(probes)
}

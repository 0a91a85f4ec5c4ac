use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, LayerSpec, Network, Slot};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Real, Tensor};

/// Non-negative class-activation map scaled so its maximum is 1 (or all 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cam {
    pub map: Image,
}

impl Cam {
    pub fn is_zero(&self) -> bool {
        self.map.data().iter().all(|&v| v == 0.0)
    }
}

/// Slot holding the class scores: the input of a trailing softmax, or the
/// network output otherwise.
pub fn score_slot<T: Real>(model: &Network<T>) -> Slot {
    let arch = model.architecture();
    match arch.nodes.last() {
        Some(n)
            if matches!(
                n.spec,
                LayerSpec::Activation {
                    kind: Activation::Softmax
                }
            ) =>
        {
            n.inputs[0]
        }
        _ => arch.output_slot(),
    }
}

/// Output slot of the last conv layer. A ReLU applied directly to the conv
/// counts as part of the layer, so the rectified map is returned then.
pub fn cam_slot<T: Real>(model: &Network<T>) -> Result<Slot> {
    let conv = model
        .last_conv_slot()
        .ok_or_else(|| Error::Integration("model has no convolutional layer".into()))?;
    let next = model.architecture().nodes.get(conv);
    Ok(match next {
        Some(n)
            if n.inputs == [conv]
                && matches!(
                    n.spec,
                    LayerSpec::Activation {
                        kind: Activation::Relu
                    }
                ) =>
        {
            conv + 1
        }
        _ => conv,
    })
}

/// Activations of the last conv layer and the gradient of the target
/// class score with respect to them, both `[C, h, w]` flattened.
pub fn conv_activation_gradient<T: Real>(
    model: &Network<T>,
    input: &Tensor<T>,
    target_class: usize,
) -> Result<(Vec<usize>, Tensor<T>, Tensor<T>)> {
    let conv = cam_slot(model)?;
    let score = score_slot(model);
    let (_, mut tape) = model.forward_eval(input)?;
    let scores = tape.value(score);
    if scores.batch() != 1 || scores.item_len() <= target_class {
        return Err(Error::arg(format!(
            "class {target_class} is outside the score vector of shape {:?}",
            scores.shape()
        )));
    }
    let mut seed = Tensor::zeros(scores.shape());
    seed.data_mut()[target_class] = T::one();
    let act = tape.value(conv).clone();
    let grads = tape.backward_from(model, score, &seed, &[conv])?;
    let grad = grads
        .slot(conv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(act.shape()));
    Ok((act.shape()[1..].to_vec(), act, grad))
}

/// ReLU of the gradient-weighted channel sum at conv resolution, unscaled.
pub fn raw_cam<T: Real>(shape: &[usize], act: &Tensor<T>, grad: &Tensor<T>) -> Vec<f64> {
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let a = act.to_f64_vec();
    let g = grad.to_f64_vec();
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let alpha = g[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (v, &x) in cam.iter_mut().zip(&a[k * hw..(k + 1) * hw]) {
            *v += alpha * x;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    cam
}

fn normalize(map: Image) -> Image {
    let max = map.max();
    if max > 0.0 {
        map.map(|v| v / max)
    } else {
        map.map(|_| 0.0)
    }
}

/// Grad-CAM for `target_class`, bilinearly resized to the image size and
/// max-normalised.
pub fn gradcam(model: &Network<f32>, image: &Image, target_class: usize) -> Result<Cam> {
    let want = model.input_shape();
    if [1, image.height(), image.width()] != want {
        return Err(Error::arg(format!(
            "image is {}x{}, model expects {want:?}",
            image.width(),
            image.height()
        )));
    }
    let (shape, act, grad) = conv_activation_gradient(model, &image.to_tensor(), target_class)?;
    let cam = raw_cam(&shape, &act, &grad);
    let small = Image::from_vec(shape[2], shape[1], cam.iter().map(|&v| v as f32).collect())?;
    let full = if small.dims() == image.dims() {
        small
    } else {
        small.resize(image.width(), image.height()).map(|v| v.max(0.0))
    };
    Ok(Cam { map: normalize(full) })
}

//! Frozen feature extraction, Gram statistics and the appearance losses.

use crate::autodiff::{gram_matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A frozen network exposing tagged intermediate responses.
///
/// Implementations receive images in [0, 1] RGB and apply whatever
/// standardization their weights expect.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Tap tags in network order.
    fn taps(&self) -> Vec<String>;

    /// Records the forward pass on `tape` and returns one node per requested
    /// layer, in request order.
    fn record(&self, tape: &mut Tape<T>, input: NodeId, layers: &[String]) -> Result<Vec<NodeId>>;

    /// Hash of the frozen parameters.
    fn fingerprint(&self) -> String;

    fn check_layers(&self, layers: &[String]) -> Result<()> {
        let taps = self.taps();
        if let Some(bad) = layers.iter().find(|l| !taps.contains(l)) {
            return Err(Error::Config(format!(
                "extractor `{}` has no tap `{bad}` (taps: {})",
                self.name(),
                taps.join(", ")
            )));
        }
        Ok(())
    }
}

/// Response of `layer` to `img`, shape (C_l, H_l, W_l).
pub fn extract_features<T: Scalar>(
    e: &dyn FeatureExtractor<T>,
    img: &ImagePlane<T>,
    layer: &str,
) -> Result<Tensor<T>> {
    let layers = [layer.to_string()];
    e.check_layers(&layers)?;
    let mut tape = Tape::new();
    let x = tape.leaf(img.tensor().clone());
    let ids = e.record(&mut tape, x, &layers)?;
    Ok(tape.value(ids[0]).clone())
}

/// Gram matrix of a feature map tagged with its layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    pub layer: String,
    /// Shape (1, C, C).
    pub matrix: Tensor<T>,
}

/// `G[a][b] = sum_{h,w} F[a][h][w] F[b][h][w] / (H W)`, returned as (1, C, C).
pub fn gram<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.channels == 0 || s.plane() == 0 {
        return Err(Error::Contract(format!("cannot take the Gram matrix of {s}")));
    }
    Ok(gram_matrix(features))
}

/// Mean squared difference over all pixels and channels.
pub fn loss_key<T: Scalar>(pred: &ImagePlane<T>, target: &ImagePlane<T>) -> Result<T> {
    Ok(loss_key_with_grad(pred.tensor(), target.tensor())?.0)
}

/// Key loss and its gradient with respect to `pred`.
pub fn loss_key_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.expect_shape(target.shape())?;
    let n = T::of_usize(pred.len());
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let value = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
    let grad = diff.scale(T::lit(2.0) / n);
    Ok((value, grad))
}

/// Cached Gram matrices of one style reference over a fixed layer set.
#[derive(Clone, Debug)]
pub struct StyleTarget<T> {
    pub grams: Vec<GramMatrix<T>>,
}

impl<T: Scalar> StyleTarget<T> {
    pub fn new(e: &dyn FeatureExtractor<T>, style_ref: &ImagePlane<T>, layers: &[String]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("style loss needs at least one layer".into()));
        }
        e.check_layers(layers)?;
        let mut tape = Tape::new();
        let x = tape.leaf(style_ref.tensor().clone());
        let ids = e.record(&mut tape, x, layers)?;
        let grams = layers
            .iter()
            .zip(ids)
            .map(|(l, id)| GramMatrix {
                layer: l.clone(),
                matrix: gram_matrix(tape.value(id)),
            })
            .collect();
        Ok(StyleTarget { grams })
    }

    pub fn layers(&self) -> Vec<String> {
        self.grams.iter().map(|g| g.layer.clone()).collect()
    }
}

/// Style loss against a cached target and its gradient w.r.t. `pred`.
pub fn loss_vgg_with_grad<T: Scalar>(
    e: &dyn FeatureExtractor<T>,
    pred: &Tensor<T>,
    target: &StyleTarget<T>,
) -> Result<(T, Tensor<T>)> {
    let layers = target.layers();
    let mut tape = Tape::new();
    let x = tape.leaf(pred.clone());
    let ids = e.record(&mut tape, x, &layers)?;
    let weight = T::one() / T::of_usize(layers.len());
    let mut terms = Vec::with_capacity(ids.len());
    for (id, g) in ids.into_iter().zip(&target.grams) {
        let gp = tape.gram(id);
        if tape.value(gp).shape() != g.matrix.shape() {
            return Err(Error::Dimension(format!(
                "layer {} Gram is {}, target is {}",
                g.layer,
                tape.value(gp).shape(),
                g.matrix.shape()
            )));
        }
        let l = tape.mse_const(gp, &g.matrix);
        terms.push((l, weight));
    }
    let total = tape.weighted_sum(&terms);
    let value = tape.value(total).item();
    let grads = tape.backward(total, Tensor::scalar(T::one()));
    let grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(pred.shape()));
    Ok((value, grad))
}

/// Style loss against a cached target, without the gradient.
pub fn loss_vgg_value<T: Scalar>(e: &dyn FeatureExtractor<T>, pred: &Tensor<T>, target: &StyleTarget<T>) -> Result<T> {
    let layers = target.layers();
    let mut tape = Tape::new();
    let x = tape.leaf(pred.clone());
    let ids = e.record(&mut tape, x, &layers)?;
    let mut total = T::zero();
    for (id, g) in ids.into_iter().zip(&target.grams) {
        let gp = gram_matrix(tape.value(id));
        let d = gp.zip_map(&g.matrix, |a, b| a - b)?;
        total += d.data().iter().map(|&v| v * v).sum::<T>() / T::of_usize(d.len());
    }
    Ok(total / T::of_usize(layers.len()))
}

/// Mean over `layers` of the mean squared Gram difference between `pred`
/// and `style_ref`.
pub fn loss_vgg<T: Scalar>(
    e: &dyn FeatureExtractor<T>,
    pred: &ImagePlane<T>,
    style_ref: &ImagePlane<T>,
    layers: &[String],
) -> Result<T> {
    let target = StyleTarget::new(e, style_ref, layers)?;
    Ok(loss_vgg_with_grad(e, pred.tensor(), &target)?.0)
}

/// Shape of a (C, H, W) feature map for documentation and checks.
pub fn feature_shape<T: Scalar>(e: &dyn FeatureExtractor<T>, layer: &str, height: usize, width: usize) -> Result<Shape> {
    let probe = ImagePlane::constant(3, height, width, T::zero())?;
    Ok(extract_features(e, &probe, layer)?.shape())
}

//! Explicit layer lists with a recorded forward pass and a matching backward
//! pass. Residual layers nest a body whose output is added to its input.

use crate::tensor::{
    activation, activation_backward, batchnorm, batchnorm_backward, conv2d, conv2d_backward, conv2d_backward_input,
    deconv2d, deconv2d_backward, deconv2d_backward_input, Activation, BnCache, BnMode, BnParams, ConvParams, Scalar,
    Tensor4, TensorError,
};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind<T = f32> {
    Conv(ConvParams<T>),
    Deconv(ConvParams<T>),
    BatchNorm(BnParams<T>),
    Act(Activation),
    /// `y = x + body(x)`.
    Residual(Vec<Layer<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(name: impl Into<String>, kind: LayerKind<T>) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        let kind = match &self.kind {
            LayerKind::Conv(p) => LayerKind::Conv(p.cast()),
            LayerKind::Deconv(p) => LayerKind::Deconv(p.cast()),
            LayerKind::BatchNorm(p) => LayerKind::BatchNorm(p.cast()),
            LayerKind::Act(a) => LayerKind::Act(*a),
            LayerKind::Residual(body) => LayerKind::Residual(body.iter().map(Layer::cast).collect()),
        };
        Layer {
            name: self.name.clone(),
            kind,
        }
    }
}

/// A named tensor of model state, borrowed from the model.
#[derive(Debug)]
pub struct StateEntry<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a [T],
    /// Trainable parameters receive gradients; buffers (running statistics) do not.
    pub trainable: bool,
}

enum Record<T> {
    Conv { input: Tensor4<T> },
    Deconv { input: Tensor4<T> },
    BatchNorm { cache: BnCache<T> },
    Act { input: Tensor4<T>, output: Tensor4<T> },
    Residual { tape: Tape<T> },
}

/// Intermediate values recorded by [`Sequential::forward_recorded`].
pub struct Tape<T = f32> {
    records: Vec<Record<T>>,
}

/// Output, tape and batch-norm updates of a recorded forward pass.
pub type Recorded<T> = (Tensor4<T>, Tape<T>, BnUpdates<T>);

/// New running statistics for every batch-norm layer, in traversal order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnUpdates<T = f32>(pub Vec<(Vec<T>, Vec<T>)>);

/// Ordered layer graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

fn dims4(t: &Tensor4<impl Scalar>) -> Vec<usize> {
    t.shape().dims().to_vec()
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Forward pass without recording (batch norm in infer mode).
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        infer_layers(&self.layers, x)
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward_recorded(&self, x: &Tensor4<T>, mode: BnMode) -> Result<Recorded<T>, TensorError> {
        let mut updates = BnUpdates::default();
        let (y, tape) = forward_layers(&self.layers, x, mode, &mut updates)?;
        Ok((y, tape, updates))
    }

    /// Backpropagates `upstream` through a recorded pass.
    ///
    /// Returns the input gradient and, when `want_params`, one gradient per
    /// trainable parameter in [`Sequential::state`] order (empty otherwise).
    pub fn backward(
        &self,
        tape: &Tape<T>,
        upstream: &Tensor4<T>,
        want_params: bool,
    ) -> Result<(Tensor4<T>, Vec<Vec<T>>), TensorError> {
        let mut grads = Vec::new();
        let d = backward_layers(&self.layers, tape, upstream, want_params, &mut grads)?;
        if want_params {
            // Layers were visited last-to-first, each pushing its gradients in reverse.
            grads.reverse();
        }
        Ok((d, grads))
    }

    /// Every named state tensor, trainable parameters and buffers interleaved
    /// in traversal order.
    pub fn state(&self) -> Vec<StateEntry<'_, T>> {
        let mut out = Vec::new();
        collect_state(&self.layers, &mut out);
        out
    }

    /// Mutable views of the trainable parameters, in [`Sequential::state`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    /// Mutable views of every state tensor, in [`Sequential::state`] order.
    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        collect_state_mut(&mut self.layers, &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.state()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.values.len())
            .sum()
    }

    /// Sign pattern of every (leaky) ReLU input in a recorded pass. Finite
    /// differences are only meaningful between points with equal patterns.
    pub fn kink_pattern(&self, tape: &Tape<T>) -> Vec<bool> {
        let mut out = Vec::new();
        collect_kinks(&self.layers, tape, &mut out);
        out
    }

    /// Forward pass with every (leaky) ReLU following `pattern`, as returned
    /// by [`Sequential::kink_pattern`], instead of the sign of its own input.
    /// This is smooth in the input and parameters and agrees with the network,
    /// gradient included, wherever the sign pattern equals `pattern`.
    pub fn forward_with_pattern(
        &self,
        x: &Tensor4<T>,
        mode: BnMode,
        pattern: &[bool],
    ) -> Result<Tensor4<T>, TensorError> {
        let mut rest = pattern;
        let y = pattern_layers(&self.layers, x, mode, &mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::config(
                "forward_with_pattern",
                "pattern is longer than the activations",
            ));
        }
        Ok(y)
    }

    pub fn apply_bn_updates(&mut self, updates: &BnUpdates<T>) -> Result<(), TensorError> {
        let mut bns = Vec::new();
        collect_bn_mut(&mut self.layers, &mut bns);
        if bns.len() != updates.0.len() {
            return Err(TensorError::shape(
                "apply_bn_updates",
                format!("{} batch-norm layers", bns.len()),
                format!("{} updates", updates.0.len()),
            ));
        }
        for (bn, (mean, var)) in bns.into_iter().zip(&updates.0) {
            bn.running_mean.clone_from(mean);
            bn.running_var.clone_from(var);
        }
        Ok(())
    }
}

fn collect_kinks<T: Scalar>(layers: &[Layer<T>], tape: &Tape<T>, out: &mut Vec<bool>) {
    for (layer, record) in layers.iter().zip(&tape.records) {
        match (&layer.kind, record) {
            (LayerKind::Act(Activation::Relu | Activation::LeakyRelu(_)), Record::Act { input, .. }) => {
                out.extend(input.data().iter().map(|v| *v > T::zero()));
            }
            (LayerKind::Residual(body), Record::Residual { tape }) => collect_kinks(body, tape, out),
            _ => {}
        }
    }
}

fn pattern_layers<T: Scalar>(
    layers: &[Layer<T>],
    x: &Tensor4<T>,
    mode: BnMode,
    rest: &mut &[bool],
) -> Result<Tensor4<T>, TensorError> {
    let mut cur = x.clone();
    for layer in layers {
        cur = match &layer.kind {
            LayerKind::Conv(p) => conv2d(&cur, p)?,
            LayerKind::Deconv(p) => deconv2d(&cur, p)?,
            LayerKind::BatchNorm(p) => batchnorm(&cur, p, mode)?.output,
            LayerKind::Act(a @ (Activation::Relu | Activation::LeakyRelu(_))) => {
                if rest.len() < cur.len() {
                    return Err(TensorError::config(
                        "forward_with_pattern",
                        "pattern is shorter than the activations",
                    ));
                }
                let (mask, tail) = rest.split_at(cur.len());
                *rest = tail;
                let off = match a {
                    Activation::LeakyRelu(slope) => T::cast_from(*slope),
                    _ => T::zero(),
                };
                let data = cur
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &on)| if on { v } else { v * off })
                    .collect();
                Tensor4::from_vec(cur.shape(), data)?
            }
            LayerKind::Act(a) => activation(&cur, *a),
            LayerKind::Residual(body) => cur.add(&pattern_layers(body, &cur, mode, rest)?)?,
        };
    }
    Ok(cur)
}

fn infer_layers<T: Scalar>(layers: &[Layer<T>], x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let mut cur = x.clone();
    for layer in layers {
        cur = match &layer.kind {
            LayerKind::Conv(p) => conv2d(&cur, p)?,
            LayerKind::Deconv(p) => deconv2d(&cur, p)?,
            LayerKind::BatchNorm(p) => batchnorm(&cur, p, BnMode::Infer)?.output,
            LayerKind::Act(a) => activation(&cur, *a),
            LayerKind::Residual(body) => cur.add(&infer_layers(body, &cur)?)?,
        };
    }
    Ok(cur)
}

fn forward_layers<T: Scalar>(
    layers: &[Layer<T>],
    x: &Tensor4<T>,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
) -> Result<(Tensor4<T>, Tape<T>), TensorError> {
    let mut records = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (next, record) = match &layer.kind {
            LayerKind::Conv(p) => (conv2d(&cur, p)?, Record::Conv { input: cur }),
            LayerKind::Deconv(p) => (deconv2d(&cur, p)?, Record::Deconv { input: cur }),
            LayerKind::BatchNorm(p) => {
                let fwd = batchnorm(&cur, p, mode)?;
                let running = fwd
                    .running
                    .unwrap_or_else(|| (p.running_mean.clone(), p.running_var.clone()));
                updates.0.push(running);
                (fwd.output, Record::BatchNorm { cache: fwd.cache })
            }
            LayerKind::Act(a) => {
                let y = activation(&cur, *a);
                (y.clone(), Record::Act { input: cur, output: y })
            }
            LayerKind::Residual(body) => {
                let (inner, tape) = forward_layers(body, &cur, mode, updates)?;
                (cur.add(&inner)?, Record::Residual { tape })
            }
        };
        records.push(record);
        cur = next;
    }
    Ok((cur, Tape { records }))
}

fn backward_layers<T: Scalar>(
    layers: &[Layer<T>],
    tape: &Tape<T>,
    upstream: &Tensor4<T>,
    want_params: bool,
    grads: &mut Vec<Vec<T>>,
) -> Result<Tensor4<T>, TensorError> {
    if tape.records.len() != layers.len() {
        return Err(TensorError::config("backward", "tape does not match the layer list"));
    }
    let mut d = upstream.clone();
    for (layer, record) in layers.iter().zip(&tape.records).rev() {
        d = match (&layer.kind, record) {
            (LayerKind::Conv(p), Record::Conv { input }) => {
                if want_params {
                    let g = conv2d_backward(input, p, &d)?;
                    grads.push(g.d_bias);
                    grads.push(g.d_weight.into_vec());
                    g.d_input
                } else {
                    conv2d_backward_input(input, p, &d)?
                }
            }
            (LayerKind::Deconv(p), Record::Deconv { input }) => {
                if want_params {
                    let g = deconv2d_backward(input, p, &d)?;
                    grads.push(g.d_bias);
                    grads.push(g.d_weight.into_vec());
                    g.d_input
                } else {
                    deconv2d_backward_input(input, p, &d)?
                }
            }
            (LayerKind::BatchNorm(p), Record::BatchNorm { cache }) => {
                let g = batchnorm_backward(cache, p, &d)?;
                if want_params {
                    grads.push(g.d_beta);
                    grads.push(g.d_gamma);
                }
                g.d_input
            }
            (LayerKind::Act(a), Record::Act { input, output }) => activation_backward(input, output, *a, &d)?,
            (LayerKind::Residual(body), Record::Residual { tape }) => {
                let inner = backward_layers(body, tape, &d, want_params, grads)?;
                d.add(&inner)?
            }
            _ => {
                return Err(TensorError::config(
                    "backward",
                    format!("tape record does not match layer {}", layer.name),
                ))
            }
        };
    }
    Ok(d)
}

fn collect_state<'a, T: Scalar>(layers: &'a [Layer<T>], out: &mut Vec<StateEntry<'a, T>>) {
    for layer in layers {
        let n = &layer.name;
        match &layer.kind {
            LayerKind::Conv(p) | LayerKind::Deconv(p) => {
                out.push(StateEntry {
                    name: format!("{n}.weight"),
                    dims: dims4(&p.weight),
                    values: p.weight.data(),
                    trainable: true,
                });
                out.push(StateEntry {
                    name: format!("{n}.bias"),
                    dims: vec![p.bias.len()],
                    values: &p.bias,
                    trainable: true,
                });
            }
            LayerKind::BatchNorm(p) => {
                let c = p.channels();
                for (suffix, values, trainable) in [
                    ("gamma", &p.gamma, true),
                    ("beta", &p.beta, true),
                    ("running_mean", &p.running_mean, false),
                    ("running_var", &p.running_var, false),
                ] {
                    out.push(StateEntry {
                        name: format!("{n}.{suffix}"),
                        dims: vec![c],
                        values,
                        trainable,
                    });
                }
            }
            LayerKind::Act(_) => {}
            LayerKind::Residual(body) => collect_state(body, out),
        }
    }
}

fn collect_params_mut<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut [T]>) {
    for layer in layers {
        match &mut layer.kind {
            LayerKind::Conv(p) | LayerKind::Deconv(p) => {
                out.push(p.weight.data_mut());
                out.push(&mut p.bias);
            }
            LayerKind::BatchNorm(p) => {
                out.push(&mut p.gamma);
                out.push(&mut p.beta);
            }
            LayerKind::Act(_) => {}
            LayerKind::Residual(body) => collect_params_mut(body, out),
        }
    }
}

fn collect_state_mut<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut [T]>) {
    for layer in layers {
        match &mut layer.kind {
            LayerKind::Conv(p) | LayerKind::Deconv(p) => {
                out.push(p.weight.data_mut());
                out.push(&mut p.bias);
            }
            LayerKind::BatchNorm(p) => {
                out.push(&mut p.gamma);
                out.push(&mut p.beta);
                out.push(&mut p.running_mean);
                out.push(&mut p.running_var);
            }
            LayerKind::Act(_) => {}
            LayerKind::Residual(body) => collect_state_mut(body, out),
        }
    }
}

fn collect_bn_mut<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BnParams<T>>) {
    for layer in layers {
        match &mut layer.kind {
            LayerKind::BatchNorm(p) => out.push(p),
            LayerKind::Residual(body) => collect_bn_mut(body, out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, Probes, DEFAULT_STEP};
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> Sequential<f64> {
        let mut conv = |o, i, k, stride, pad| {
            ConvParams::new(
                Tensor4::from_fn(Shape4::new(o, i, k, k), |_| rng.random_range(-0.5..0.5)),
                (0..o).map(|_| rng.random_range(-0.1..0.1)).collect(),
                stride,
                pad,
            )
            .unwrap()
        };
        let head = conv(3, 2, 3, 1, 1);
        let r1 = conv(3, 3, 3, 1, 1);
        let r2 = conv(3, 3, 3, 1, 1);
        Sequential::new(vec![
            Layer::new("head", LayerKind::Conv(head)),
            Layer::new(
                "res",
                LayerKind::Residual(vec![
                    Layer::new("res.a", LayerKind::Conv(r1)),
                    Layer::new("res.bn", LayerKind::BatchNorm(BnParams::new(3))),
                    Layer::new("res.act", LayerKind::Act(Activation::Tanh)),
                    Layer::new("res.b", LayerKind::Conv(r2)),
                ]),
            ),
            Layer::new("out", LayerKind::Act(Activation::Sigmoid)),
        ])
    }

    #[test]
    fn recorded_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = small_net(&mut rng);
        let x = Tensor4::from_fn(Shape4::new(2, 2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let (y, tape, _) = net.forward_recorded(&x, BnMode::Train).unwrap();
        let up = Tensor4::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
        let (dx, grads) = net.backward(&tape, &up, true).unwrap();

        let mut args = vec![x.data().to_vec()];
        let mut analytic = vec![dx.into_vec()];
        for (e, g) in net.state().iter().filter(|e| e.trainable).zip(grads) {
            args.push(e.values.to_vec());
            analytic.push(g);
        }
        let err = grad_check("sequential", &args, &analytic, DEFAULT_STEP, &Probes::All, |a| {
            let mut n = net.clone();
            for (dst, src) in n.params_mut().into_iter().zip(&a[1..]) {
                dst.copy_from_slice(src);
            }
            let x = Tensor4::from_vec(x.shape(), a[0].clone())?;
            let (y, _, _) = n.forward_recorded(&x, BnMode::Train)?;
            Ok(y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn state_names_and_bn_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = small_net(&mut rng);
        let names: Vec<_> = net.state().into_iter().map(|e| e.name).collect();
        assert_eq!(names[0], "head.weight");
        assert!(names.contains(&"res.bn.running_var".to_string()));
        assert_eq!(net.num_params(), (3 * 2 * 9 + 3) + 2 * (27 * 3 + 3) + 6);

        let x = Tensor4::from_fn(Shape4::new(2, 2, 4, 4), |i| (i % 7) as f64);
        let (_, _, updates) = net.forward_recorded(&x, BnMode::Train).unwrap();
        net.apply_bn_updates(&updates).unwrap();
        let rm = net
            .state()
            .into_iter()
            .find(|e| e.name == "res.bn.running_mean")
            .unwrap();
        assert_ne!(rm.values, &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn infer_matches_recorded_infer_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = small_net(&mut rng);
        let x = Tensor4::from_fn(Shape4::new(1, 2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let a = net.infer(&x).unwrap();
        let (b, _, _) = net.forward_recorded(&x, BnMode::Infer).unwrap();
        assert_eq!(a, b);
    }
}

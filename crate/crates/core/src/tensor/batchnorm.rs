use super::{Scalar, Shape4, Tensor4, TensorError};

/// Per-channel batch-normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the newest batch in the running-statistics average.
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BnParams<T> {
    /// Identity-initialized parameters: `gamma = 1`, `beta = 0`, unit running variance.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::cast_from(0.1),
            epsilon: T::cast_from(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> BnParams<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::cast_from(x.as_f64())).collect::<Vec<U>>();
        BnParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            momentum: U::cast_from(self.momentum.as_f64()),
            epsilon: U::cast_from(self.epsilon.as_f64()),
        }
    }

    fn check(&self, input: Shape4) -> Result<(), TensorError> {
        let c = self.channels();
        if input.channels != c || self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(TensorError::shape(
                "batchnorm",
                format!("input with {c} channels"),
                format!("input {input}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    pub mode: BnMode,
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnForward<T = f32> {
    pub output: Tensor4<T>,
    pub cache: BnCache<T>,
    /// Updated `(running_mean, running_var)` in train mode; `None` in infer mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads<T = f32> {
    pub d_input: Tensor4<T>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

fn for_each_plane<T: Scalar>(shape: Shape4, c: usize, data: &[T], mut f: impl FnMut(&[T])) {
    let plane = shape.plane();
    for n in 0..shape.batch {
        let start = (n * shape.channels + c) * plane;
        f(&data[start..start + plane]);
    }
}

/// Batch normalization. Statistics are reduced serially in
/// `(batch, row, column)` order so results do not depend on threading.
pub fn batchnorm<T: Scalar>(
    input: &Tensor4<T>,
    params: &BnParams<T>,
    mode: BnMode,
) -> Result<BnForward<T>, TensorError> {
    let s = input.shape();
    params.check(s)?;
    let count = s.batch * s.plane();
    if mode == BnMode::Train && count < 2 {
        return Err(TensorError::config(
            "batchnorm",
            format!("train mode needs at least 2 values per channel, got {count}"),
        ));
    }
    let channels = s.channels;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    match mode {
        BnMode::Train => {
            let inv_count = T::one() / T::cast_from(count as f64);
            for c in 0..channels {
                let mut acc = T::zero();
                for_each_plane(s, c, input.data(), |p| acc = acc + p.iter().copied().sum::<T>());
                let m = acc * inv_count;
                let mut sq = T::zero();
                for_each_plane(s, c, input.data(), |p| {
                    sq = sq + p.iter().map(|&v| (v - m) * (v - m)).sum::<T>()
                });
                mean[c] = m;
                var[c] = sq * inv_count;
            }
        }
        BnMode::Infer => {
            mean.copy_from_slice(&params.running_mean);
            var.copy_from_slice(&params.running_var);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + params.epsilon).sqrt()).collect();

    let plane = s.plane();
    let mut normalized = Tensor4::zeros(s);
    let mut output = Tensor4::zeros(s);
    for n in 0..s.batch {
        for c in 0..channels {
            let start = (n * channels + c) * plane;
            let range = start..start + plane;
            for ((xh, y), &x) in normalized.data_mut()[range.clone()]
                .iter_mut()
                .zip(&mut output.data_mut()[range.clone()])
                .zip(&input.data()[range])
            {
                *xh = (x - mean[c]) * inv_std[c];
                *y = params.gamma[c] * *xh + params.beta[c];
            }
        }
    }

    let running = (mode == BnMode::Train).then(|| {
        let m = params.momentum;
        let keep = T::one() - m;
        let unbias = T::cast_from(count as f64 / (count - 1) as f64);
        let rm = params
            .running_mean
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| keep * r + m * b)
            .collect();
        let rv = params
            .running_var
            .iter()
            .zip(&var)
            .map(|(&r, &b)| keep * r + m * b * unbias)
            .collect();
        (rm, rv)
    });

    Ok(BnForward {
        output,
        cache: BnCache {
            mode,
            normalized,
            inv_std,
        },
        running,
    })
}

/// Gradients of [`batchnorm`]. In train mode the gradient flows through the
/// batch statistics as well.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    params: &BnParams<T>,
    upstream: &Tensor4<T>,
) -> Result<BnGrads<T>, TensorError> {
    let s = cache.normalized.shape();
    params.check(s)?;
    if upstream.shape() != s {
        return Err(TensorError::shape("batchnorm_backward", s, upstream.shape()));
    }
    let channels = s.channels;
    let plane = s.plane();
    let mut d_gamma = vec![T::zero(); channels];
    let mut d_beta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut dg, mut db) = (T::zero(), T::zero());
        for n in 0..s.batch {
            let start = (n * channels + c) * plane;
            let dy = &upstream.data()[start..start + plane];
            let xh = &cache.normalized.data()[start..start + plane];
            for (&g, &h) in dy.iter().zip(xh) {
                dg = dg + g * h;
                db = db + g;
            }
        }
        d_gamma[c] = dg;
        d_beta[c] = db;
    }

    let mut d_input = Tensor4::zeros(s);
    let inv_count = T::one() / T::cast_from((s.batch * plane) as f64);
    for n in 0..s.batch {
        for c in 0..channels {
            let start = (n * channels + c) * plane;
            let scale = params.gamma[c] * cache.inv_std[c];
            let dy = &upstream.data()[start..start + plane];
            let xh = &cache.normalized.data()[start..start + plane];
            let dx = &mut d_input.data_mut()[start..start + plane];
            match cache.mode {
                BnMode::Infer => {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d = scale * g;
                    }
                }
                BnMode::Train => {
                    let mean_dy = d_beta[c] * inv_count;
                    let mean_dy_xh = d_gamma[c] * inv_count;
                    for ((d, &g), &h) in dx.iter_mut().zip(dy).zip(xh) {
                        *d = scale * (g - mean_dy - h * mean_dy_xh);
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        d_input,
        d_gamma,
        d_beta,
    })
}

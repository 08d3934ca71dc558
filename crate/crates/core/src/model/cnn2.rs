use crate::params::{LayoutEntry, ModelLayout};
use crate::scalar::Scalar;

use super::{argmax, loss_and_dlogits, Loss, ModelError, ModelKind, ModelSpec};

/// conv(k) → ReLU → maxpool(2) → conv(k) → ReLU → maxpool(2) → dense →
/// ReLU → dense. Valid convolutions with stride 1, pooling floors odd sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn2Shape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

/// Spatial sizes after each stage.
#[derive(Debug, Clone, Copy)]
struct Dims {
    h1: usize,
    w1: usize,
    p1h: usize,
    p1w: usize,
    h2: usize,
    w2: usize,
    p2h: usize,
    p2w: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

struct Forward<T> {
    z1: Vec<T>,
    p1: Vec<T>,
    p1_idx: Vec<usize>,
    z2: Vec<T>,
    p2: Vec<T>,
    p2_idx: Vec<usize>,
    z3: Vec<T>,
    a3: Vec<T>,
    logits: Vec<T>,
}

impl Cnn2Shape {
    pub(crate) fn from_spec(spec: &ModelSpec) -> Result<Self, ModelError> {
        debug_assert_eq!(spec.kind, ModelKind::Cnn2);
        let (in_channels, height, width) = match spec.input_shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(ModelError::InvalidSpec(
                    "cnn2 input_shape must be [height, width] or [channels, height, width]"
                        .into(),
                ))
            }
        };
        let [c1, c2] = spec.channels.as_slice() else {
            return Err(ModelError::InvalidSpec(
                "cnn2 needs exactly two channel counts".into(),
            ));
        };
        let hidden = match spec.hidden_sizes.as_slice() {
            [] => 64,
            [h] => *h,
            _ => {
                return Err(ModelError::InvalidSpec(
                    "cnn2 takes at most one hidden size".into(),
                ))
            }
        };
        if *c1 == 0 || *c2 == 0 || hidden == 0 || spec.kernel_size == 0 {
            return Err(ModelError::InvalidSpec(
                "channels, kernel_size and hidden size must be positive".into(),
            ));
        }
        let shape = Self {
            in_channels,
            height,
            width,
            c1: *c1,
            c2: *c2,
            kernel: spec.kernel_size,
            hidden,
            num_classes: spec.num_classes,
        };
        shape.dims()?;
        Ok(shape)
    }

    fn dims(&self) -> Result<Dims, ModelError> {
        let k = self.kernel;
        let too_small = || {
            ModelError::InvalidSpec(format!(
                "input {}x{} is too small for two {k}x{k} convolutions with pooling",
                self.height, self.width
            ))
        };
        let conv = |n: usize| n.checked_sub(k - 1).filter(|&m| m >= 2).ok_or_else(too_small);
        let h1 = conv(self.height)?;
        let w1 = conv(self.width)?;
        let (p1h, p1w) = (h1 / 2, w1 / 2);
        let h2 = conv(p1h)?;
        let w2 = conv(p1w)?;
        Ok(Dims {
            h1,
            w1,
            p1h,
            p1w,
            h2,
            w2,
            p2h: h2 / 2,
            p2w: w2 / 2,
        })
    }

    fn flat_len(&self) -> usize {
        let d = self.dims().expect("validated at construction");
        self.c2 * d.p2h * d.p2w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn entries(&self) -> Vec<(&'static str, Vec<usize>)> {
        let k = self.kernel;
        vec![
            ("conv1.weight", vec![self.c1, self.in_channels, k, k]),
            ("conv1.bias", vec![self.c1]),
            ("conv2.weight", vec![self.c2, self.c1, k, k]),
            ("conv2.bias", vec![self.c2]),
            ("fc1.weight", vec![self.hidden, self.flat_len()]),
            ("fc1.bias", vec![self.hidden]),
            ("fc2.weight", vec![self.num_classes, self.hidden]),
            ("fc2.bias", vec![self.num_classes]),
        ]
    }

    pub(crate) fn layout(&self) -> ModelLayout {
        ModelLayout::new(
            self.entries()
                .into_iter()
                .map(|(name, shape)| LayoutEntry {
                    name: name.to_string(),
                    shape: shape.into_iter().map(|d| d as u32).collect(),
                })
                .collect(),
        )
        .expect("cnn2 layout is valid")
    }

    pub(crate) fn fans(&self) -> Vec<(usize, usize)> {
        let kk = self.kernel * self.kernel;
        let conv1 = (self.in_channels * kk, self.c1 * kk);
        let conv2 = (self.c1 * kk, self.c2 * kk);
        let fc1 = (self.flat_len(), self.hidden);
        let fc2 = (self.hidden, self.num_classes);
        vec![conv1, conv1, conv2, conv2, fc1, fc1, fc2, fc2]
    }

    fn offsets(&self) -> Offsets {
        let mut cursor = 0;
        let mut next = |len: usize| {
            let at = cursor;
            cursor += len;
            at
        };
        let lens: Vec<usize> = self
            .entries()
            .iter()
            .map(|(_, s)| s.iter().product())
            .collect();
        Offsets {
            conv1_w: next(lens[0]),
            conv1_b: next(lens[1]),
            conv2_w: next(lens[2]),
            conv2_b: next(lens[3]),
            fc1_w: next(lens[4]),
            fc1_b: next(lens[5]),
            fc2_w: next(lens[6]),
            fc2_b: next(lens[7]),
        }
    }

    /// Valid convolution of `input` `[cin, h, w]` into `[cout, oh, ow]`.
    #[allow(clippy::too_many_arguments)]
    fn conv<T: Scalar>(
        input: &[T],
        cin: usize,
        h: usize,
        w: usize,
        weight: &[T],
        bias: &[T],
        cout: usize,
        k: usize,
    ) -> Vec<T> {
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = vec![T::zero(); cout * oh * ow];
        for o in 0..cout {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..cin {
                let chan = &input[c * h * w..(c + 1) * h * w];
                let kern = &weight[(o * cin + c) * k * k..(o * cin + c + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = kern[ki * k + kj];
                        for y in 0..oh {
                            let src = &chan[(y + ki) * w + kj..(y + ki) * w + kj + ow];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// ReLU then 2x2 max pooling; returns pooled values and the flat index
    /// of each winner in the input plane stack.
    fn relu_pool<T: Scalar>(z: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * ph * pw);
        let mut idx = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let mut best = ch * h * w + (2 * y) * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if z[i] > z[best] {
                            best = i;
                        }
                    }
                    out.push(z[best].max(T::zero()));
                    idx.push(best);
                }
            }
        }
        (out, idx)
    }

    fn dense<T: Scalar>(input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        let n_in = input.len();
        bias.iter()
            .enumerate()
            .map(|(o, &b)| {
                weight[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(input)
                    .fold(b, |acc, (w, x)| acc + *w * *x)
            })
            .collect()
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Forward<T> {
        let d = self.dims().expect("validated at construction");
        let o = self.offsets();
        let k = self.kernel;
        let z1 = Self::conv(
            x,
            self.in_channels,
            self.height,
            self.width,
            &params[o.conv1_w..o.conv1_b],
            &params[o.conv1_b..o.conv2_w],
            self.c1,
            k,
        );
        let (p1, p1_idx) = Self::relu_pool(&z1, self.c1, d.h1, d.w1);
        let z2 = Self::conv(
            &p1,
            self.c1,
            d.p1h,
            d.p1w,
            &params[o.conv2_w..o.conv2_b],
            &params[o.conv2_b..o.fc1_w],
            self.c2,
            k,
        );
        let (p2, p2_idx) = Self::relu_pool(&z2, self.c2, d.h2, d.w2);
        let z3 = Self::dense(&p2, &params[o.fc1_w..o.fc1_b], &params[o.fc1_b..o.fc2_w]);
        let a3: Vec<T> = z3.iter().map(|&v| v.max(T::zero())).collect();
        let logits = Self::dense(&a3, &params[o.fc2_w..o.fc2_b], &params[o.fc2_b..]);
        Forward {
            z1,
            p1,
            p1_idx,
            z2,
            p2,
            p2_idx,
            z3,
            a3,
            logits,
        }
    }

    pub(crate) fn logits<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        self.forward(params, x).logits
    }

    /// Backpropagates `dz` `[cout, oh, ow]` through a valid convolution,
    /// accumulating weight/bias gradients and optionally the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn conv_backward<T: Scalar>(
        input: &[T],
        cin: usize,
        h: usize,
        w: usize,
        weight: &[T],
        dz: &[T],
        cout: usize,
        k: usize,
        grad_w: &mut [T],
        grad_b: &mut [T],
        mut grad_input: Option<&mut [T]>,
    ) {
        let (oh, ow) = (h - k + 1, w - k + 1);
        for o in 0..cout {
            let dplane = &dz[o * oh * ow..(o + 1) * oh * ow];
            grad_b[o] = grad_b[o] + dplane.iter().copied().sum();
            for c in 0..cin {
                let chan = &input[c * h * w..(c + 1) * h * w];
                let kbase = (o * cin + c) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weight[kbase + ki * k + kj];
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let row = (y + ki) * w + kj;
                            let src = &chan[row..row + ow];
                            let dr = &dplane[y * ow..(y + 1) * ow];
                            for (s, g) in src.iter().zip(dr) {
                                acc = acc + *s * *g;
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let dst = &mut gi[c * h * w + row..c * h * w + row + ow];
                                for (di, g) in dst.iter_mut().zip(dr) {
                                    *di = *di + wv * *g;
                                }
                            }
                        }
                        grad_w[kbase + ki * k + kj] = grad_w[kbase + ki * k + kj] + acc;
                    }
                }
            }
        }
    }

    pub(crate) fn accumulate_grad<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        label: usize,
        loss: Loss,
        grad: &mut [T],
    ) -> (T, usize) {
        let d = self.dims().expect("validated at construction");
        let o = self.offsets();
        let k = self.kernel;
        let f = self.forward(params, x);
        let predicted = argmax(&f.logits);
        let (value, dlogits) = loss_and_dlogits(&f.logits, label, loss);

        // fc2
        let hidden = self.hidden;
        let mut da3 = vec![T::zero(); hidden];
        for (c, &g) in dlogits.iter().enumerate() {
            grad[o.fc2_b + c] = grad[o.fc2_b + c] + g;
            for (j, d) in da3.iter_mut().enumerate() {
                let wi = o.fc2_w + c * hidden + j;
                grad[wi] = grad[wi] + g * f.a3[j];
                *d = *d + g * params[wi];
            }
        }
        // fc1
        let flat = f.p2.len();
        let mut dp2 = vec![T::zero(); flat];
        for j in 0..hidden {
            if f.z3[j] <= T::zero() {
                continue;
            }
            let g = da3[j];
            grad[o.fc1_b + j] = grad[o.fc1_b + j] + g;
            let row = o.fc1_w + j * flat;
            for i in 0..flat {
                grad[row + i] = grad[row + i] + g * f.p2[i];
                dp2[i] = dp2[i] + g * params[row + i];
            }
        }
        // pool2 + relu2
        let mut dz2 = vec![T::zero(); f.z2.len()];
        for (g, &i) in dp2.iter().zip(&f.p2_idx) {
            if f.z2[i] > T::zero() {
                dz2[i] = dz2[i] + *g;
            }
        }
        // conv2
        let mut dp1 = vec![T::zero(); f.p1.len()];
        {
            let (head, tail) = grad.split_at_mut(o.conv2_b);
            Self::conv_backward(
                &f.p1,
                self.c1,
                d.p1h,
                d.p1w,
                &params[o.conv2_w..o.conv2_b],
                &dz2,
                self.c2,
                k,
                &mut head[o.conv2_w..],
                &mut tail[..self.c2],
                Some(&mut dp1),
            );
        }
        // pool1 + relu1
        let mut dz1 = vec![T::zero(); f.z1.len()];
        for (g, &i) in dp1.iter().zip(&f.p1_idx) {
            if f.z1[i] > T::zero() {
                dz1[i] = dz1[i] + *g;
            }
        }
        // conv1
        let (head, tail) = grad.split_at_mut(o.conv1_b);
        Self::conv_backward(
            x,
            self.in_channels,
            self.height,
            self.width,
            &params[o.conv1_w..o.conv1_b],
            &dz1,
            self.c1,
            k,
            &mut head[o.conv1_w..],
            &mut tail[..self.c1],
            None,
        );
        (value, predicted)
    }
}

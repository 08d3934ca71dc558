use crate::params::{LayoutEntry, ModelLayout};
use crate::scalar::Scalar;

use super::{argmax, loss_and_dlogits, Loss, ModelError};

/// Fully connected layers with ReLU between them and no activation on the
/// output. With no hidden layers this is multinomial logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    names: Vec<String>,
    /// Input width, hidden widths, then class count.
    sizes: Vec<usize>,
}

impl DenseStack {
    pub fn new(
        prefix: &str,
        input: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self, ModelError> {
        if hidden.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "hidden sizes must be positive".into(),
            ));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let layers = sizes.len() - 1;
        let names = if layers == 1 {
            vec![prefix.to_string()]
        } else {
            (0..layers).map(|i| format!("{prefix}{i}")).collect()
        };
        Ok(Self { names, sizes })
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub(crate) fn layout(&self) -> ModelLayout {
        let mut entries = Vec::new();
        for (name, w) in self.names.iter().zip(self.sizes.windows(2)) {
            entries.push(LayoutEntry {
                name: format!("{name}.weight"),
                shape: vec![w[1] as u32, w[0] as u32],
            });
            entries.push(LayoutEntry {
                name: format!("{name}.bias"),
                shape: vec![w[1] as u32],
            });
        }
        ModelLayout::new(entries).expect("dense layout is valid")
    }

    pub(crate) fn fans(&self) -> Vec<(usize, usize)> {
        self.sizes
            .windows(2)
            .flat_map(|w| [(w[0], w[1]), (w[0], w[1])])
            .collect()
    }

    /// Offsets of `(weight, bias)` for every layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.sizes.len() - 1);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            let weight = offset;
            offset += w[0] * w[1];
            out.push((weight, offset));
            offset += w[1];
        }
        out
    }

    /// Returns pre-activations of every layer; the last entry is the logits.
    fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<Vec<T>> {
        let offsets = self.offsets();
        let layers = offsets.len();
        let mut pre = Vec::with_capacity(layers);
        let mut input: Vec<T> = x.to_vec();
        for (l, (w, b)) in offsets.into_iter().enumerate() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &params[w + o * n_in..w + (o + 1) * n_in];
                let mut acc = params[b + o];
                for (wi, xi) in row.iter().zip(&input) {
                    acc = acc + *wi * *xi;
                }
                z.push(acc);
            }
            if l + 1 < layers {
                input = z.iter().map(|&v| v.max(T::zero())).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub(crate) fn logits<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        self.forward(params, x).pop().expect("at least one layer")
    }

    pub(crate) fn accumulate_grad<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        label: usize,
        loss: Loss,
        grad: &mut [T],
    ) -> (T, usize) {
        let pre = self.forward(params, x);
        let logits = pre.last().expect("at least one layer");
        let predicted = argmax(logits);
        let (value, mut delta) = loss_and_dlogits(logits, label, loss);
        let offsets = self.offsets();
        for l in (0..offsets.len()).rev() {
            let (w, b) = offsets[l];
            let n_in = self.sizes[l];
            let activation: Vec<T> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(T::zero())).collect()
            };
            let mut back = vec![T::zero(); n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                grad[b + o] = grad[b + o] + d;
                let row = w + o * n_in;
                let grow = &mut grad[row..row + n_in];
                for (g, a) in grow.iter_mut().zip(&activation) {
                    *g = *g + d * *a;
                }
                if l > 0 {
                    let prow = &params[row..row + n_in];
                    for (bk, wi) in back.iter_mut().zip(prow) {
                        *bk = *bk + d * *wi;
                    }
                }
            }
            if l > 0 {
                for (bk, z) in back.iter_mut().zip(&pre[l - 1]) {
                    if *z <= T::zero() {
                        *bk = T::zero();
                    }
                }
                delta = back;
            }
        }
        (value, predicted)
    }
}

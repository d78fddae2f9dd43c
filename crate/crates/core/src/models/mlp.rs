//! Small fully connected network with ReLU between layers and a linear
//! output, used as the encoder head, the compliance head and the fusion
//! network.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{TensorList, TensorListMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: Array2::zeros((n_out, n_in)), b: Array1::zeros(n_out) }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / n_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n_out, n_in), || rng.random_range(-bound..bound));
        Self { w, b: Array1::zeros(n_out) }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = self.w.row(o);
            *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs to every layer; `inputs[0]` is the network input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        Self { layers: dims.windows(2).map(|d| Dense::init(d[0], d[1], rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.n_in(), l.n_out())).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].n_in()];
        d.extend(self.layers.iter().map(Dense::n_out));
        d
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.apply(&h);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        MlpCache { inputs, output: h }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).output
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let g = &mut grad.layers[i];
            for (o, &dy) in d.iter().enumerate() {
                g.b[o] += dy;
                if dy != 0.0 {
                    g.w.row_mut(o).iter_mut().zip(x).for_each(|(gw, xv)| *gw += dy * xv);
                }
            }
            let mut dx = vec![0.0; layer.n_in()];
            for (o, &dy) in d.iter().enumerate() {
                if dy != 0.0 {
                    dx.iter_mut().zip(layer.w.row(o)).for_each(|(a, w)| *a += dy * w);
                }
            }
            if i > 0 {
                // x is a ReLU output of the previous layer.
                dx.iter_mut().zip(x).for_each(|(a, xv)| {
                    if *xv <= 0.0 {
                        *a = 0.0
                    }
                });
            }
            d = dx;
        }
        d
    }

    pub fn tensors(&self) -> TensorList<'_> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.w"), l.w.as_slice().expect("standard layout")));
            out.push((format!("{i}.b"), l.b.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> TensorListMut<'_> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{i}.w"), l.w.as_slice_mut().expect("standard layout")));
            out.push((format!("{i}.b"), l.b.as_slice_mut().expect("standard layout")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(m: &Mlp, x: &[f64]) -> f64 {
        m.predict(x).iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::init(&[5, 7, 6, 3], &mut rng);
        for l in &mut m.layers {
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = m.forward(&x);
        let d_out: Vec<f64> = cache.output.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let mut grad = m.zeros_like();
        let dx = m.backward(&cache, &d_out, &mut grad);
        let h = 1e-6;
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            let len = m.tensors()[t].1.len();
            for k in 0..len {
                let orig = m.tensors()[t].1[k];
                m.tensors_mut()[t].1[k] = orig + h;
                let up = loss(&m, &x);
                m.tensors_mut()[t].1[k] = orig - h;
                let down = loss(&m, &x);
                m.tensors_mut()[t].1[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad.tensors()[t].1[k];
                assert!((numeric - analytic).abs() < 1e-6 * (1.0 + analytic.abs()), "{name}[{k}]");
            }
        }
        for k in 0..5 {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let numeric = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!((numeric - dx[k]).abs() < 1e-6 * (1.0 + dx[k].abs()));
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = Mlp::init(&[4, 3, 2], &mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        assert_eq!(m.predict(&[1.0, 2.0, 3.0, 4.0]), vec![0.0, 0.0]);
        assert_eq!(m.dims(), vec![4, 3, 2]);
    }
}

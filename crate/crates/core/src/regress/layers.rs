//! Dense and graph-convolution stacks with hand-written reverse passes, and
//! the Adam update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `y = W x + b`, `W` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Dense {
        Dense { w: glorot(rng, output, input, input, output), b: DVector::zeros(output) }
    }

    pub fn zeros_like(&self) -> Dense {
        Dense { w: DMatrix::zeros(self.w.nrows(), self.w.ncols()), b: DVector::zeros(self.b.len()) }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.b
    }

    /// Accumulates parameter gradients into `grad`; returns `∂L/∂x`.
    pub fn backward(&self, x: &DVector<f64>, dy: &DVector<f64>, grad: &mut Dense) -> DVector<f64> {
        grad.w.ger(1.0, dy, x, 1.0);
        grad.b += dy;
        self.w.tr_mul(dy)
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), self.b.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// Rectifier between layers, identity on the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayerStack {
    pub layers: Vec<Dense>,
}

/// Inputs of every layer, kept for the reverse pass.
pub struct DenseTape {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
}

impl DenseLayerStack {
    /// `widths` lists the input width followed by every layer's output width.
    pub fn new(rng: &mut ChaCha8Rng, widths: &[usize]) -> DenseLayerStack {
        DenseLayerStack { layers: widths.windows(2).map(|w| Dense::new(rng, w[0], w[1])).collect() }
    }

    pub fn zeros_like(&self) -> DenseLayerStack {
        DenseLayerStack { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("dense stack without layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return Err(Error::Shape(format!(
                    "dense layers do not chain: {} outputs into {} inputs",
                    pair[0].w.nrows(),
                    pair[1].w.ncols()
                )));
            }
        }
        if self.layers.iter().any(|l| l.b.len() != l.w.nrows()) {
            return Err(Error::Shape("dense bias length differs from output width".into()));
        }
        check_finite(self.slices())
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_taped(x).0
    }

    pub fn forward_taped(&self, x: &DVector<f64>) -> (DVector<f64>, DenseTape) {
        let mut tape = DenseTape { inputs: Vec::new(), pre: Vec::new() };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            tape.inputs.push(h);
            h = if i == last { z.clone() } else { z.map(relu) };
            tape.pre.push(z);
        }
        (h, tape)
    }

    pub fn backward(&self, tape: &DenseTape, dy: &DVector<f64>, grad: &mut DenseLayerStack) -> DVector<f64> {
        let mut d = dy.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i != last {
                d.zip_apply(&tape.pre[i], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            d = self.layers[i].backward(&tape.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Dense::slices).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Dense::slices_mut).collect()
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected edge list over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::identity(n, n);
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(Error::Shape(format!("edge ({i}, {j}) invalid for {n} nodes")));
        }
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let inv_sqrt: Vec<f64> = a.row_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| a[(i, j)] * inv_sqrt[i] * inv_sqrt[j]))
}

/// `H_{l+1} = relu(Â H_l W_l)` over node-feature matrices (`nodes × channels`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConvStack {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub a_hat: DMatrix<f64>,
    pub weights: Vec<DMatrix<f64>>,
}

pub struct GraphTape {
    /// `Â H_l` for every layer.
    propagated: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl GraphConvStack {
    pub const LAYERS: usize = 4;

    pub fn new(rng: &mut ChaCha8Rng, n_nodes: usize, edges: Vec<(usize, usize)>, widths: &[usize]) -> Result<Self> {
        if widths.len() != Self::LAYERS + 1 {
            return Err(Error::InvalidConfig(format!(
                "a graph-convolution stack has {} layers, got {} widths",
                Self::LAYERS,
                widths.len()
            )));
        }
        let a_hat = normalized_adjacency(n_nodes, &edges)?;
        let weights = widths.windows(2).map(|w| glorot(rng, w[0], w[1], w[0], w[1])).collect();
        Ok(GraphConvStack { n_nodes, edges, a_hat, weights })
    }

    pub fn zeros_like(&self) -> GraphConvStack {
        GraphConvStack {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            ..self.clone()
        }
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != Self::LAYERS {
            return Err(Error::Shape(format!("graph stack has {} layers, expected {}", self.weights.len(), Self::LAYERS)));
        }
        if self.a_hat != normalized_adjacency(self.n_nodes, &self.edges)? {
            return Err(Error::Malformed("stored adjacency does not match the edge list".into()));
        }
        for pair in self.weights.windows(2) {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::Shape("graph layers do not chain".into()));
            }
        }
        check_finite(self.slices())
    }

    pub fn forward(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_taped(h).0
    }

    pub fn forward_taped(&self, h0: &DMatrix<f64>) -> (DMatrix<f64>, GraphTape) {
        let mut tape = GraphTape { propagated: Vec::new(), pre: Vec::new() };
        let mut h = h0.clone();
        for w in &self.weights {
            let p = &self.a_hat * &h;
            let z = &p * w;
            h = z.map(relu);
            tape.propagated.push(p);
            tape.pre.push(z);
        }
        (h, tape)
    }

    pub fn backward(&self, tape: &GraphTape, dy: &DMatrix<f64>, grad: &mut GraphConvStack) -> DMatrix<f64> {
        let mut d = dy.clone();
        for l in (0..self.weights.len()).rev() {
            d.zip_apply(&tape.pre[l], |g, z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            grad.weights[l] += tape.propagated[l].tr_mul(&d);
            // Â is symmetric
            d = &self.a_hat * (&d * self.weights[l].transpose());
        }
        d
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights.iter().map(|w| w.as_slice()).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights.iter_mut().map(|w| w.as_mut_slice()).collect()
    }
}

fn check_finite(slices: Vec<&[f64]>) -> Result<()> {
    if slices.iter().all(|s| s.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NumericInput("network weights must be finite".into()))
    }
}

/// Adaptive moment estimation over a flat list of parameter slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), shapes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for i in 0..p.len() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn path(n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|i| (i - 1, i)).collect()
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        let cycle: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let a = normalized_adjacency(6, &cycle).unwrap();
        for r in a.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degree_root_vector_is_the_unit_eigenvector() {
        // on a path Â·1 is not 1 (row sums exceed one next to the ends),
        // but D̃^{1/2}·1 is an eigenvector with eigenvalue 1
        let a = normalized_adjacency(5, &path(5)).unwrap();
        let sums: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
        assert!(sums.iter().any(|s| *s > 1.0 + 1e-3));
        let deg = DVector::from_vec(vec![2.0f64, 3.0, 3.0, 3.0, 2.0]).map(f64::sqrt);
        assert!((&a * &deg - &deg).amax() < 1e-14);
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn graph_conv_matches_per_edge_accumulation() {
        let edges = vec![(0, 1), (1, 2), (1, 3), (3, 4)];
        let g = GraphConvStack::new(&mut rng(), 5, edges.clone(), &[2, 4, 3, 3, 2]).unwrap();
        let x = DMatrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.7 + j as f64 * 0.3 - 0.1);
        let mut deg = [1.0f64; 5];
        for (i, j) in &edges {
            deg[*i] += 1.0;
            deg[*j] += 1.0;
        }
        let mut h = x.clone();
        for w in &g.weights {
            let hw = &h * w;
            let mut out = DMatrix::zeros(5, w.ncols());
            for i in 0..5 {
                for c in 0..w.ncols() {
                    out[(i, c)] += hw[(i, c)] / deg[i];
                }
            }
            for (i, j) in &edges {
                for c in 0..w.ncols() {
                    out[(*i, c)] += hw[(*j, c)] / (deg[*i] * deg[*j]).sqrt();
                    out[(*j, c)] += hw[(*i, c)] / (deg[*i] * deg[*j]).sqrt();
                }
            }
            h = out.map(relu);
        }
        assert!((g.forward(&x) - h).amax() < 1e-12);
    }

    #[test]
    fn first_layer_is_local() {
        let edges = path(6);
        let g = GraphConvStack::new(&mut rng(), 6, edges, &[2, 8, 8, 8, 4]).unwrap();
        let x = DMatrix::from_fn(6, 2, |i, j| 1.0 + 0.3 * i as f64 - 0.2 * j as f64);
        let mut zeroed = x.clone();
        zeroed.row_mut(3).fill(0.0);
        let layer1 = |h: &DMatrix<f64>| (&g.a_hat * h * &g.weights[0]).map(relu);
        let diff = layer1(&x) - layer1(&zeroed);
        for i in 0..6 {
            let changed = diff.row(i).amax() > 0.0;
            if changed {
                assert!((2..=4).contains(&i), "node {i} changed");
            }
        }
    }

    #[test]
    fn dense_matches_matrix_oracle() {
        let s = DenseLayerStack::new(&mut rng(), &[3, 5, 2]);
        let x = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let (l0, l1) = (&s.layers[0], &s.layers[1]);
        let mut h = vec![0.0; 5];
        for i in 0..5 {
            let mut z = l0.b[i];
            for j in 0..3 {
                z += l0.w[(i, j)] * x[j];
            }
            h[i] = z.max(0.0);
        }
        for o in 0..2 {
            let mut y = l1.b[o];
            for i in 0..5 {
                y += l1.w[(o, i)] * h[i];
            }
            assert!((s.forward(&x)[o] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_passes_match_finite_differences() {
        let s = DenseLayerStack::new(&mut rng(), &[3, 6, 4, 2]);
        let g = GraphConvStack::new(&mut rng(), 4, path(4), &[2, 5, 5, 5, 3]).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.9, 1.1]);
        let h = DMatrix::from_fn(4, 2, |i, j| 0.5 + 0.4 * i as f64 - 0.7 * j as f64);
        let cy = DVector::from_vec(vec![0.7, -1.3]);
        let cg = DMatrix::from_fn(4, 3, |i, j| 1.0 - 0.3 * (i + 2 * j) as f64);
        let dense_loss = |s: &DenseLayerStack| s.forward(&x).dot(&cy);
        let graph_loss = |g: &GraphConvStack| g.forward(&h).component_mul(&cg).sum();

        let (_, tape) = s.forward_taped(&x);
        let mut gs = s.zeros_like();
        s.backward(&tape, &cy, &mut gs);
        let (_, gtape) = g.forward_taped(&h);
        let mut gg = g.zeros_like();
        g.backward(&gtape, &cg, &mut gg);

        let check = |analytic: f64, plus: f64, minus: f64, eps: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "{analytic} vs {fd}");
        };
        let eps = 1e-6;
        for (k, slice) in gs.slices().iter().enumerate() {
            for i in 0..slice.len() {
                let (mut a, mut b) = (s.clone(), s.clone());
                a.slices_mut()[k][i] += eps;
                b.slices_mut()[k][i] -= eps;
                check(slice[i], dense_loss(&a), dense_loss(&b), eps);
            }
        }
        for (k, slice) in gg.slices().iter().enumerate() {
            for i in 0..slice.len() {
                let (mut a, mut b) = (g.clone(), g.clone());
                a.slices_mut()[k][i] += eps;
                b.slices_mut()[k][i] -= eps;
                check(slice[i], graph_loss(&a), graph_loss(&b), eps);
            }
        }
    }

    #[test]
    fn adam_with_zero_rate_is_a_no_op() {
        let mut s = DenseLayerStack::new(&mut rng(), &[2, 3]);
        let before = s.clone();
        let grads = s.zeros_like().layers.iter().map(|l| l.w.add_scalar(1.0)).collect::<Vec<_>>();
        let shapes: Vec<usize> = s.slices().iter().map(|x| x.len()).collect();
        let mut adam = Adam::new(0.0, (0.9, 0.999), &shapes);
        let g = vec![grads[0].as_slice(), &[1.0, 1.0, 1.0][..]];
        adam.step(s.slices_mut(), g);
        assert_eq!(s, before);
    }
}

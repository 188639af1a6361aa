//! Random smooth expression graphs and a finite-difference gradient check.

use rand::Rng;
use wideprior::autodiff::{Graph, NodeId, ParamStore};
use wideprior::linalg::Matrix;

pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// A random composition of smooth operations over two 3×3 parameters and a
/// 1×3 row, reduced to a scalar.
pub fn random_graph<R: Rng>(rng: &mut R) -> (Graph<f64>, ParamStore<f64>) {
    let n = 3;
    let mut store = ParamStore::new();
    store.insert_matrix("a", uniform_matrix(rng, n, n)).unwrap();
    store.insert_matrix("b", uniform_matrix(rng, n, n)).unwrap();
    store.insert_matrix("v", uniform_matrix(rng, 1, n)).unwrap();
    let mut g = Graph::new();
    let mut pool: Vec<(NodeId, (usize, usize))> = vec![
        (g.param("a"), (n, n)),
        (g.param("b"), (n, n)),
        (g.param("v"), (1, n)),
    ];
    let c = g.constant(uniform_matrix(rng, n, n));
    pool.push((c, (n, n)));
    let mut last = pool[rng.random_range(0..3)];
    let depth = rng.random_range(3..9);
    for _ in 0..depth {
        let (x, sx) = last;
        let (y, sy) = pool[rng.random_range(0..pool.len())];
        let next = match rng.random_range(0..15) {
            0 => (g.tanh(x), sx),
            1 => (g.sigmoid(x), sx),
            2 => (g.softplus(x), sx),
            3 => (g.square(x), sx),
            4 => (g.neg(x), sx),
            5 => (g.scale(x, rng.random_range(-2.0..2.0)), sx),
            6 => {
                let t = g.tanh(x);
                (g.exp(t), sx)
            }
            7 => {
                let s = g.softplus(x);
                let p = g.add_const(s, 0.5);
                match rng.random_range(0..3) {
                    0 => (g.log(p), sx),
                    1 => (g.sqrt(p), sx),
                    _ => (g.powf(p, 1.5), sx),
                }
            }
            8 => (g.add(x, y), (sx.0.max(sy.0), n)),
            9 => (g.sub(y, x), (sx.0.max(sy.0), n)),
            10 => (g.mul(x, y), (sx.0.max(sy.0), n)),
            11 => {
                let s = g.softplus(y);
                let d = g.add_const(s, 0.5);
                (g.div(x, d), (sx.0.max(sy.0), n))
            }
            12 => {
                if sy.0 == n {
                    (g.matmul(x, y), (sx.0, n))
                } else {
                    let t = g.transpose(y);
                    let xt = g.matmul(x, t);
                    (g.mul(x, xt), sx)
                }
            }
            13 if sx == (n, n) => {
                let xt = g.transpose(x);
                let xx = g.matmul(x, xt);
                let spd = g.add_identity(xx, 0.5);
                (g.sqrt_spd(spd, 30, n), (n, n))
            }
            _ => (g.symmetrize_or_self(x, sx, n), sx),
        };
        pool.push(next);
        last = next;
    }
    let (x, sx) = last;
    let w = g.constant(uniform_matrix(rng, sx.0, sx.1));
    let weighted = g.mul(x, w);
    let out = g.sum(weighted);
    g.set_output(out);
    (g, store)
}

trait SymmetrizeOrSelf {
    fn symmetrize_or_self(&mut self, x: NodeId, shape: (usize, usize), n: usize) -> NodeId;
}

impl SymmetrizeOrSelf for Graph<f64> {
    fn symmetrize_or_self(&mut self, x: NodeId, shape: (usize, usize), n: usize) -> NodeId {
        if shape == (n, n) {
            self.symmetrize(x)
        } else {
            self.tanh(x)
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn gradient_error(g: &Graph<f64>, store: &ParamStore<f64>) -> f64 {
    let mut store = store.clone();
    let mut graph = g.clone();
    let f0 = graph.forward(&store).unwrap();
    graph.backward(&mut store).unwrap();
    let analytic = store.flat_grads();
    let x0 = store.flat_values();
    let h = 1e-5;
    let eval = |x: &[f64]| {
        let mut s = store.clone();
        s.set_flat(x).unwrap();
        g.clone().forward(&s).unwrap()
    };
    let fd: Vec<f64> = (0..x0.len())
        .map(|i| {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            (eval(&xp) - eval(&xm)) / (2.0 * h)
        })
        .collect();
    let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
    // FD roundoff scales with |f|. Gradients below 1e-4·(1 + |f|), including
    // graphs that cancel to a parameter-free output, are compared absolutely.
    let floor = 1e-4 * (1.0 + f0.abs());
    norm(&diff) / norm(&fd).max(norm(&analytic)).max(floor)
}


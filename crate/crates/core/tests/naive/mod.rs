//! Direct-loop references for the vectorised kernels, and sweeps that
//! compare the two over every small shape. Shared with the acceptance run.

use psumnet_core::mmdg::{compute_bone, compute_velocity};
use psumnet_core::nn::{Builder, Forward, ParamStore};
use psumnet_core::ops::Conv2dSpec;
use psumnet_core::skeleton::build_adjacency;
use psumnet_core::strb::{AttentionMaps, Samg, SamgOptions, Squash};
use psumnet_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest deviation seen by a sweep, and how many cases it ran.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sweep {
    pub cases: usize,
    pub max_diff: f64,
}

impl Sweep {
    fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        self.cases += 1;
        self.max_diff = self.max_diff.max(a.max_abs_diff(b).unwrap());
    }
}

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
    let (b, cin, t, n) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, kt, kn) = (w.dim(0), w.dim(2), w.dim(3));
    let span = spec.dilation_t * (kt - 1) + 1;
    let t_out = (t + 2 * spec.pad_t - span) / spec.stride_t + 1;
    let n_out = n - kn + 1;
    let mut out = Tensor::zeros(&[b, cout, t_out, n_out]);
    for bi in 0..b {
        for co in 0..cout {
            for to in 0..t_out {
                for no in 0..n_out {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for a in 0..kt {
                            let tp = (to * spec.stride_t + a * spec.dilation_t) as isize - spec.pad_t as isize;
                            if tp < 0 || tp >= t as isize {
                                continue;
                            }
                            for k in 0..kn {
                                acc += w.get(&[co, ci, a, k]) * x.get(&[bi, ci, tp as usize, no + k]);
                            }
                        }
                    }
                    out.set(&[bi, co, to, no], acc);
                }
            }
        }
    }
    out
}

pub fn conv2d_sweep() -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sweep = Sweep::default();
    for t in 1..=6 {
        for n in 1..=4 {
            for kt in 1..=3 {
                for kn in 1..=n.min(2) {
                    for stride in 1..=2 {
                        for dil in 1..=2 {
                            for pad in 0..=2 {
                                let spec = Conv2dSpec::new(stride, dil, pad);
                                if spec.out_len(t, kt).is_err() {
                                    continue;
                                }
                                let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
                                let x = random(&[b, cin, t, n], &mut rng);
                                let w = random(&[cout, cin, kt, kn], &mut rng);
                                let mut tape = Tape::new();
                                let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                                let y = tape.conv2d(xv, wv, spec).unwrap();
                                sweep.add(tape.value(y), &naive_conv(&x, &w, spec));
                            }
                        }
                    }
                }
            }
        }
    }
    sweep
}

pub fn naive_bone(x: &Tensor<f64>, parent: &[usize], axis: usize) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let mut out = x.clone();
    let total = x.numel();
    for flat in 0..total {
        let mut idx = vec![0; shape.len()];
        let mut r = flat;
        for d in (0..shape.len()).rev() {
            idx[d] = r % shape[d];
            r /= shape[d];
        }
        let mut pidx = idx.clone();
        pidx[axis] = parent[idx[axis]];
        out.set(&idx, x.get(&idx) - x.get(&pidx));
    }
    out
}

pub fn naive_velocity(x: &Tensor<f64>, axis: usize) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for flat in 0..x.numel() {
        let mut idx = vec![0; shape.len()];
        let mut r = flat;
        for d in (0..shape.len()).rev() {
            idx[d] = r % shape[d];
            r /= shape[d];
        }
        if idx[axis] + 1 < shape[axis] {
            let mut next = idx.clone();
            next[axis] += 1;
            out.set(&idx, x.get(&next) - x.get(&idx));
        }
    }
    out
}

/// Every shape with extents in 1..=lim over `dims` axes.
fn shapes(dims: usize, lim: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|s| {
                (1..=lim).map(move |e| {
                    let mut s = s.clone();
                    s.push(e);
                    s
                })
            })
            .collect();
    }
    out
}

/// Bone and velocity sweeps over every 3-D shape with extents up to 6.
pub fn modality_sweeps() -> (Sweep, Sweep) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut bone, mut vel) = (Sweep::default(), Sweep::default());
    for shape in shapes(3, 6) {
        let x = random(&shape, &mut rng);
        for axis in 0..3 {
            let n = shape[axis];
            // a random rooted tree: each joint points at an earlier one
            let parent: Vec<usize> = (0..n).map(|j| if j == 0 { 0 } else { rng.random_range(0..j) }).collect();
            bone.add(&compute_bone(&x, &parent, axis).unwrap(), &naive_bone(&x, &parent, axis));
            if n >= 2 {
                vel.add(&compute_velocity(&x, axis).unwrap(), &naive_velocity(&x, axis));
            }
        }
    }
    (bone, vel)
}

pub fn naive_adjacency(n: usize, edges: &[(usize, usize)]) -> Tensor<f64> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
    }
    for &(i, j) in edges {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        a[i][j] / (deg[i].sqrt() * deg[j].sqrt())
    })
}

/// All parent arrays where each joint hangs from an earlier one.
fn trees(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for j in 1..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..j).map(move |q| {
                    let mut p = p.clone();
                    p.push(q);
                    p
                })
            })
            .collect();
    }
    out
}

/// Every tree on up to 6 joints, then random forests.
pub fn adjacency_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    for n in 1..=6 {
        for parent in trees(n) {
            let edges: Vec<(usize, usize)> = (1..n).map(|j| (j, parent[j])).collect();
            let got: Tensor<f64> = build_adjacency(n, &edges, false).unwrap();
            sweep.add(&got, &naive_adjacency(n, &edges));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..=6 {
        for _ in 0..20 {
            let mut edges = Vec::new();
            for j in 1..n {
                if rng.random_bool(0.6) {
                    edges.push((j, rng.random_range(0..j)));
                }
            }
            let got: Tensor<f64> = build_adjacency(n, &edges, true).unwrap();
            sweep.add(&got, &naive_adjacency(n, &edges));
        }
    }
    sweep
}

fn tanh_or(squash: Option<&Tensor<f64>>, d: &[f64]) -> Vec<f64> {
    match squash {
        None => d.iter().map(|v| v.tanh()).collect(),
        Some(w) => {
            let cr = d.len();
            (0..cr).map(|o| (0..cr).map(|i| w.get(&[o, i]) * d[i]).sum()).collect()
        }
    }
}

/// Attention map generator written as loops over the definition.
pub fn naive_samg(samg: &Samg, store: &ParamStore<f64>, x: &Tensor<f64>, adj: &Tensor<f64>) -> Tensor<f64> {
    let (b, cin, t, n) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let val = |id: usize| store.value(id);
    let embed = |w: usize, bias: Option<usize>, bi: usize, co: usize, ti: usize, j: usize| -> f64 {
        let mut s = bias.map_or(0.0, |bb| val(bb).data()[co]);
        for ci in 0..cin {
            s += val(w).get(&[co, ci]) * x.get(&[bi, ci, ti, j]);
        }
        s
    };
    let cr = samg.phi.cout;
    let cout = samg.theta.cout;
    let maps = samg.expand.cout;
    let alpha = val(samg.alpha).data()[0];
    let mut out = Tensor::zeros(&[b, cout, t, n]);
    for bi in 0..b {
        let pooled = |pw: &psumnet_core::nn::Pointwise| -> Vec<Vec<f64>> {
            (0..cr)
                .map(|r| {
                    (0..n)
                        .map(|j| (0..t).map(|ti| embed(pw.weight, pw.bias, bi, r, ti, j)).sum::<f64>() / t as f64)
                        .collect()
                })
                .collect()
        };
        let (p, q) = (pooled(&samg.phi), pooled(&samg.psi));
        // m[map][i][j]
        let mut m = vec![vec![vec![0.0; n]; n]; maps];
        for i in 0..n {
            for j in 0..n {
                let d: Vec<f64> = (0..cr).map(|r| p[r][i] - q[r][j]).collect();
                let s = tanh_or(samg.squash.as_ref().map(|sq| val(sq.weight)), &d);
                for (k, row) in m.iter_mut().enumerate() {
                    row[i][j] = (0..cr).map(|r| val(samg.expand.weight).get(&[k, r]) * s[r]).sum();
                }
            }
        }
        for c in 0..cout {
            let map = if maps == 1 { 0 } else { c };
            for ti in 0..t {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        let h = alpha * m[map][i][j] + adj.get(&[i, j]);
                        acc += h * embed(samg.theta.weight, samg.theta.bias, bi, c, ti, j);
                    }
                    out.set(&[bi, c, ti, i], acc);
                }
            }
        }
    }
    out
}

pub fn samg_sweep() -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sweep = Sweep::default();
    let variants = [
        SamgOptions::default(),
        SamgOptions {
            squash: Squash::Pointwise,
            ..SamgOptions::default()
        },
        SamgOptions {
            maps: AttentionMaps::Shared,
            reduction: 2,
            min_reduced: 1,
            ..SamgOptions::default()
        },
    ];
    for options in variants {
        for n in 1..=6 {
            for t in [1, 3, 6] {
                let (cin, cout) = (rng.random_range(1..=6), rng.random_range(1..=6));
                let mut store = ParamStore::new();
                let samg = Samg::build(&mut Builder::new(&mut store, &mut rng, "s"), cin, cout, options).unwrap();
                *store.value_mut(samg.alpha) = Tensor::full(&[1], rng.random_range(0.2..1.5));
                // nonzero biases so they are exercised
                for id in [samg.phi.bias, samg.psi.bias, samg.theta.bias].into_iter().flatten() {
                    let len = store.value(id).numel();
                    *store.value_mut(id) = random(&[len], &mut rng);
                }
                let adj = random(&[n, n], &mut rng);
                let x = random(&[2, cin, t, n], &mut rng);
                let mut tape = Tape::new();
                let mut f = Forward::new(&mut tape, &store, false, false);
                let xv = f.tape.constant(x.clone());
                let y = samg.forward(&mut f, xv, &adj).unwrap();
                sweep.add(f.tape.value(y), &naive_samg(&samg, &store, &x, &adj));
            }
        }
    }
    sweep
}

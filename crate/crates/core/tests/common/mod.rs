//! Test-side oracles written with plain loops over `Vec`s, independent of the
//! vectorized library code they check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgm::mixer::{Ablation, MixInputs, MixerDims, MixerParams};
use tsgm::params::ParamStore;
use tsgm::tensor::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((x - b[(r, c)]).abs());
        }
    }
    worst
}

fn weights(store: &ParamStore, name: &str) -> Rows {
    let id = store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    rows_of(store.get(id))
}

/// Row vector times matrix.
fn vecmat(x: &[f64], w: &Rows) -> Vec<f64> {
    assert_eq!(x.len(), w.len());
    let mut out = vec![0.0; w[0].len()];
    for (i, xi) in x.iter().enumerate() {
        for (j, wij) in w[i].iter().enumerate() {
            out[j] += xi * wij;
        }
    }
    out
}

fn mlp(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = vecmat(x, &weights(store, &format!("{name}.w1"))).into_iter().map(f64::tanh).collect();
    vecmat(&h, &weights(store, &format!("{name}.w2")))
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `B(e) f` with `B(e) = Σ_j e_j V_j` and `V_j[r][c] = gate[c][j·d + r]`.
fn gated(gate: &Rows, e: &[f64], f: &[f64]) -> Vec<f64> {
    let d = f.len();
    let mut out = vec![0.0; d];
    for (j, ej) in e.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                out[r] += ej * gate[c][j * d + r] * f[c];
            }
        }
    }
    out
}

/// `A_c^T (A_im + I) A_c` by explicit triple loop.
pub fn naive_object_affinity(a_im: &Rows, a_c: &Rows) -> Rows {
    let n = a_im.len();
    let m = if n == 0 { 0 } else { a_c[0].len() };
    let mut out = vec![vec![0.0; m]; m];
    for k in 0..m {
        for j in 0..m {
            for v in 0..n {
                for u in 0..n {
                    let link = a_im[v][u] + if u == v { 1.0 } else { 0.0 };
                    out[k][j] += a_c[v][k] * link * a_c[u][j];
                }
            }
        }
    }
    out
}

/// Loop-by-loop evaluation of the whole mixer.
pub fn naive_mix(store: &ParamStore, params: &MixerParams, inputs: &MixInputs, ablation: Ablation) -> (Rows, Rows) {
    let mut hi = rows_of(&inputs.images);
    let mut ho = rows_of(&inputs.objects);
    if ablation == Ablation::NoUpdate {
        return (hi, ho);
    }
    let a_im = rows_of(&inputs.a_im);
    let a_c = rows_of(&inputs.a_c);
    let a_ob = naive_object_affinity(&a_im, &a_c);
    let g = &inputs.goal;
    let (n, m) = (hi.len(), ho.len());
    let d = params.dims.hidden;
    let updates_images = matches!(ablation, Ablation::None | Ablation::VisualOnly);
    let updates_objects = matches!(ablation, Ablation::None | Ablation::ObjectOnly);

    for l in 0..params.dims.layers {
        let name = |s: &str| format!("mixer.l{l}.{s}");
        let proj_i = weights(store, &name("proj_i"));
        let proj_o = weights(store, &name("proj_o"));
        let gate_i = weights(store, &name("gate_i"));
        let gate_o = weights(store, &name("gate_o"));
        let pi: Rows = hi.iter().map(|h| vecmat(h, &proj_i)).collect();
        let po: Rows = ho.iter().map(|h| vecmat(h, &proj_o)).collect();

        let mut mi_hat = vec![vec![0.0; d]; n];
        for v in 0..n {
            for w in 0..n {
                if a_im[v][w] != 0.0 {
                    let f = mlp(store, &name("f_i"), &cat(&hi[w], g));
                    let msg = gated(&gate_i, &cat(&pi[v], &pi[w]), &f);
                    add(&mut mi_hat[v], &msg.iter().map(|x| a_im[v][w] * x).collect::<Vec<_>>());
                }
            }
        }
        let mut mo_hat = vec![vec![0.0; d]; m];
        for k in 0..m {
            for j in 0..m {
                if a_ob[k][j] != 0.0 {
                    let f = mlp(store, &name("f_o"), &cat(&ho[j], g));
                    let msg = gated(&gate_o, &cat(&po[k], &po[j]), &f);
                    add(&mut mo_hat[k], &msg.iter().map(|x| a_ob[k][j] * x).collect::<Vec<_>>());
                }
            }
        }

        let mut mi = mi_hat.clone();
        for v in 0..n {
            let mut acc = vec![0.0; d];
            for k in 0..m {
                if a_c[v][k] != 0.0 {
                    let f = mlp(store, &name("cross_in_i"), &cat(&mo_hat[k], g));
                    let msg = gated(&gate_i, &cat(&pi[v], &po[k]), &f);
                    add(&mut acc, &msg.iter().map(|x| a_c[v][k] * x).collect::<Vec<_>>());
                }
            }
            add(&mut mi[v], &mlp(store, &name("cross_out_i"), &acc));
        }
        let mut mo = mo_hat.clone();
        for k in 0..m {
            let mut acc = vec![0.0; d];
            for v in 0..n {
                if a_c[v][k] != 0.0 {
                    let f = mlp(store, &name("cross_in_o"), &cat(&mi_hat[v], g));
                    let msg = gated(&gate_o, &cat(&po[k], &pi[v]), &f);
                    add(&mut acc, &msg.iter().map(|x| a_c[v][k] * x).collect::<Vec<_>>());
                }
            }
            add(&mut mo[k], &mlp(store, &name("cross_out_o"), &acc));
        }

        if updates_images {
            for v in 0..n {
                let mut acc = vec![0.0; d];
                for k in 0..m {
                    add(&mut acc, &mo[k].iter().map(|x| a_c[v][k] * x).collect::<Vec<_>>());
                }
                add(&mut hi[v], &mlp(store, &name("update_i"), &acc));
            }
        }
        if updates_objects {
            for k in 0..m {
                let mut acc = vec![0.0; d];
                for v in 0..n {
                    add(&mut acc, &mi[v].iter().map(|x| a_c[v][k] * x).collect::<Vec<_>>());
                }
                add(&mut ho[k], &mlp(store, &name("update_o"), &acc));
            }
        }
    }
    (hi, ho)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Symmetric 0/1 image affinity with a zero diagonal.
pub fn random_image_affinity(n: usize, density: f64, rng: &mut impl Rng) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            if rng.random_bool(density) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

pub fn random_cross_affinity(n: usize, m: usize, density: f64, rng: &mut impl Rng) -> Matrix {
    let mut a = Matrix::zeros(n, m);
    for i in 0..n {
        for k in 0..m {
            if rng.random_bool(density) {
                a[(i, k)] = 1.0;
            }
        }
    }
    a
}

pub fn small_dims(layers: usize) -> MixerDims {
    MixerDims {
        image: 4,
        object: 3,
        hidden: 3,
        edge: 2,
        layers,
    }
}

pub fn random_mixer(seed: u64, dims: MixerDims) -> (ParamStore, MixerParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MixerParams::init(&mut store, dims, &mut rng).unwrap();
    // the vertex updates start at zero; draw every tensor so that no path is trivially silent
    randomize(&mut store, &mut rng);
    (store, params)
}

pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.8..0.8));
    }
}

pub fn random_inputs(n: usize, m: usize, dims: &MixerDims, rng: &mut impl Rng) -> MixInputs {
    MixInputs {
        images: random_matrix(n, dims.image, rng),
        objects: random_matrix(m, dims.object, rng),
        a_im: random_image_affinity(n, 0.5, rng),
        a_c: random_cross_affinity(n, m, 0.5, rng),
        goal: (0..dims.image).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Applies a row permutation: `out[i] = m[perm[i]]`.
pub fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..m.cols() {
            out[(i, c)] = m[(p, c)];
        }
    }
    out
}

/// `out[i][j] = m[pr[i]][pc[j]]`.
pub fn permute_both(m: &Matrix, pr: &[usize], pc: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &r) in pr.iter().enumerate() {
        for (j, &c) in pc.iter().enumerate() {
            out[(i, j)] = m[(r, c)];
        }
    }
    out
}

pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

//! Cross graph mixer.
//!
//! `L` rounds of message passing over the image graph (`A_im`), the object
//! graph (`A_ob`) and the image-object affinity (`A_c`):
//!
//! ```text
//! self:   m̂i_v = Σ_w A_im[v,w] B_i(e_vw) f_i(hi_w || g)
//!         m̂o_k = Σ_j A_ob[k,j] B_o(e_kj) f_o(ho_j || g)
//! cross:  mi_v = m̂i_v + f'_i(Σ_k A_c[v,k] B_i(e_vk) f''_i(m̂o_k || g))
//!         mo_k = mo_k^ + f'_o(Σ_v A_c[v,k] B_o(e_kv) f''_o(m̂i_v || g))
//! update: hi_v <- hi_v + g_i(Σ_k A_c[v,k] mo_k)
//!         ho_k <- ho_k + g_o(Σ_v A_c[v,k] mi_v)
//! ```
//!
//! Image states are initialized with the image features, object states with
//! `feature || one-hot(category) || score`, and `g` is the goal image feature.
//! The residual updates keep the state widths, so the contextual memories have
//! the widths of the inputs.
//!
//! Every two-layer map is `W2 tanh(W1 x)` without biases, so a zero input
//! yields a zero output. The edge gate maps the endpoint projections
//! `e = [W_dst h_dst ; W_src h_src]` (length `2p`) to a `d x d` matrix
//! `B(e) = Σ_j e_j V_j`. The tensor `V` is stored as a `d x 2p·d` matrix with
//! `V_j[r, c]` at `(c, j·d + r)`, which turns the gated sum over all edges into
//! dense products and one per-row contraction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TsgmError};
use crate::graph::TsgmGraph;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Which update directions run; mirrors the "update rules" ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Full cross update in both directions.
    #[default]
    None,
    /// Mixer skipped; memories are the raw node inputs.
    NoUpdate,
    /// Only image nodes are updated (from their objects).
    VisualOnly,
    /// Only object nodes are updated (from their images).
    ObjectOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoUpdate, Ablation::VisualOnly, Ablation::ObjectOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoUpdate => "no-update",
            Ablation::VisualOnly => "visual-only",
            Ablation::ObjectOnly => "object-only",
        }
    }

    fn updates_images(self) -> bool {
        matches!(self, Ablation::None | Ablation::VisualOnly)
    }

    fn updates_objects(self) -> bool {
        matches!(self, Ablation::None | Ablation::ObjectOnly)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = TsgmError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| TsgmError::invalid(format!("unknown ablation `{s}` (none|no-update|visual-only|object-only)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerDims {
    /// Image feature width `D`.
    pub image: usize,
    /// Object input width (`D_o + categories + 1`).
    pub object: usize,
    /// Hidden message width `d`.
    pub hidden: usize,
    /// Edge projection width `p`.
    pub edge: usize,
    /// Number of rounds `L`.
    pub layers: usize,
}

/// Two-layer map `x -> W2 tanh(W1 x)`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl Mlp {
    fn init(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            w1: store.insert_uniform(format!("{name}.w1"), input, hidden, 1.0, rng),
            w2: store.insert_uniform(format!("{name}.w2"), hidden, output, 1.0, rng),
        }
    }

    /// An MLP whose output layer starts at zero, so it initially maps everything to zero.
    fn init_silent(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            w1: store.insert_uniform(format!("{name}.w1"), input, hidden, 1.0, rng),
            w2: store.insert_zeros(format!("{name}.w2"), hidden, output),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.w1));
        let h = tape.tanh(h);
        tape.matmul(h, p.var(self.w2))
    }
}

#[derive(Debug, Clone)]
pub struct MixerLayer {
    pub f_i: Mlp,
    pub f_o: Mlp,
    /// `W_i`: D x p.
    pub proj_i: ParamId,
    /// `W_o`: object width x p.
    pub proj_o: ParamId,
    /// `v_i`: d x 2p·d.
    pub gate_i: ParamId,
    /// `v_o`: d x 2p·d.
    pub gate_o: ParamId,
    pub cross_out_i: Mlp,
    pub cross_in_i: Mlp,
    pub cross_out_o: Mlp,
    pub cross_in_o: Mlp,
    pub update_i: Mlp,
    pub update_o: Mlp,
}

/// Parameter layout of the mixer inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MixerParams {
    pub dims: MixerDims,
    pub layers: Vec<MixerLayer>,
}

impl MixerParams {
    pub fn init(store: &mut ParamStore, dims: MixerDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.layers == 0 {
            return Err(TsgmError::validation("model.layers", "must be >= 1"));
        }
        if dims.hidden == 0 || dims.edge == 0 || dims.image == 0 || dims.object == 0 {
            return Err(TsgmError::validation("model", "mixer widths must be positive"));
        }
        let (d, p, di, dobj) = (dims.hidden, dims.edge, dims.image, dims.object);
        let layers = (0..dims.layers)
            .map(|l| {
                let n = |s: &str| format!("mixer.l{l}.{s}");
                MixerLayer {
                    f_i: Mlp::init(store, &n("f_i"), di + di, d, d, rng),
                    f_o: Mlp::init(store, &n("f_o"), dobj + di, d, d, rng),
                    proj_i: store.insert_uniform(n("proj_i"), di, p, 1.0, rng),
                    proj_o: store.insert_uniform(n("proj_o"), dobj, p, 1.0, rng),
                    gate_i: store.insert_uniform(n("gate_i"), d, 2 * p * d, 1.0, rng),
                    gate_o: store.insert_uniform(n("gate_o"), d, 2 * p * d, 1.0, rng),
                    cross_out_i: Mlp::init(store, &n("cross_out_i"), d, d, d, rng),
                    cross_in_i: Mlp::init(store, &n("cross_in_i"), d + di, d, d, rng),
                    cross_out_o: Mlp::init(store, &n("cross_out_o"), d, d, d, rng),
                    cross_in_o: Mlp::init(store, &n("cross_in_o"), d + di, d, d, rng),
                    // The vertex updates start silent: at initialization the mixer is the
                    // identity, and the raw place and object features reach the readout
                    // undisturbed until training finds messages worth adding.
                    update_i: Mlp::init_silent(store, &n("update_i"), d, d, di, rng),
                    update_o: Mlp::init_silent(store, &n("update_o"), d, d, dobj, rng),
                }
            })
            .collect();
        Ok(MixerParams { dims, layers })
    }
}

/// Contextual memories: one row per image node and per object node.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedMemory {
    pub image: Matrix,
    pub object: Matrix,
}

/// Dense inputs of one mixer evaluation.
#[derive(Debug, Clone)]
pub struct MixInputs {
    /// N x D image states.
    pub images: Matrix,
    /// M x object-width object states.
    pub objects: Matrix,
    /// N x N.
    pub a_im: Matrix,
    /// N x M.
    pub a_c: Matrix,
    /// Goal image feature, length D.
    pub goal: Vec<f64>,
}

impl MixInputs {
    pub fn from_graph(graph: &TsgmGraph, goal: &[f64]) -> Self {
        MixInputs {
            images: graph.image_features(),
            objects: graph.object_inputs(),
            a_im: graph.image_affinity(),
            a_c: graph.cross_affinity(),
            goal: goal.to_vec(),
        }
    }

    fn check(&self, dims: &MixerDims) -> Result<()> {
        let (n, m) = (self.images.rows(), self.objects.rows());
        let checks = [
            (self.images.cols() == dims.image, "image state width"),
            (self.objects.cols() == dims.object, "object state width"),
            (self.a_im.shape() == (n, n), "A_im shape"),
            (self.a_c.shape() == (n, m), "A_c shape"),
            (self.goal.len() == dims.image, "goal feature width"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(TsgmError::invalid(format!("mixer input mismatch: {what}")));
            }
        }
        Ok(())
    }
}

/// `A_c^T (A_im + I) A_c`.
pub fn object_affinity_from(a_im: &Matrix, a_c: &Matrix) -> Matrix {
    let mut a = a_im.clone();
    for i in 0..a.rows() {
        a[(i, i)] += 1.0;
    }
    a_c.transpose().matmul(&a).matmul(a_c)
}

/// Gated aggregation `out_v = Σ_w A[v,w] B([p_dst_v ; p_src_w]) f_w` for all
/// rows `v` at once. `a` is R x S, `p_dst` R x p, `p_src` S x p, `f` S x d.
pub(crate) fn gated_aggregate(tape: &mut Tape, a: Var, p_dst: Var, p_src: Var, f: Var, gate: Var) -> Var {
    let p = tape.shape(p_dst).1;
    let d = tape.shape(f).1;
    let k_dst = tape.slice_cols(gate, 0, p * d);
    let k_src = tape.slice_cols(gate, p * d, p * d);
    let fk = tape.matmul(f, k_dst);
    let agg = tape.matmul(a, fk);
    let t1 = tape.row_contract(p_dst, agg);
    let fk2 = tape.matmul(f, k_src);
    let per_src = tape.row_contract(p_src, fk2);
    let t2 = tape.matmul(a, per_src);
    tape.add(t1, t2)
}

/// Graph operands of one mixer pass, already on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GraphVars {
    pub a_im: Var,
    pub a_ob: Var,
    pub a_c: Var,
    pub a_ct: Var,
    pub goal: Var,
    pub n: usize,
    pub m: usize,
}

impl GraphVars {
    pub fn new(tape: &mut Tape, a_im: &Matrix, a_c: &Matrix, goal: &[f64]) -> Self {
        let a_ob = object_affinity_from(a_im, a_c);
        GraphVars {
            n: a_im.rows(),
            m: a_c.cols(),
            a_im: tape.constant(a_im.clone()),
            a_ob: tape.constant(a_ob),
            a_ct: tape.constant(a_c.transpose()),
            a_c: tape.constant(a_c.clone()),
            goal: tape.constant(Matrix::row_vector(goal)),
        }
    }
}

/// Which side of the bipartite memory a self update runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Object,
}

pub(crate) fn self_update_t(tape: &mut Tape, p: &BoundParams, layer: &MixerLayer, side: Side, h: Var, a: Var, goal: Var) -> Var {
    let rows = tape.shape(h).0;
    let g = tape.repeat_rows(goal, rows);
    let hg = tape.concat_cols(&[h, g]);
    let (f, proj, gate) = match side {
        Side::Image => (layer.f_i, layer.proj_i, layer.gate_i),
        Side::Object => (layer.f_o, layer.proj_o, layer.gate_o),
    };
    let fw = f.forward(tape, p, hg);
    let ph = tape.matmul(h, p.var(proj));
    gated_aggregate(tape, a, ph, ph, fw, p.var(gate))
}

/// Returns `(mi, mo)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cross_update_t(
    tape: &mut Tape,
    p: &BoundParams,
    layer: &MixerLayer,
    gv: &GraphVars,
    hi: Var,
    ho: Var,
    mi_hat: Var,
    mo_hat: Var,
) -> (Var, Var) {
    let pi = tape.matmul(hi, p.var(layer.proj_i));
    let po = tape.matmul(ho, p.var(layer.proj_o));
    let g_m = tape.repeat_rows(gv.goal, gv.m);
    let g_n = tape.repeat_rows(gv.goal, gv.n);

    let from_objects = tape.concat_cols(&[mo_hat, g_m]);
    let from_objects = layer.cross_in_i.forward(tape, p, from_objects);
    let agg_i = gated_aggregate(tape, gv.a_c, pi, po, from_objects, p.var(layer.gate_i));
    let cross_i = layer.cross_out_i.forward(tape, p, agg_i);
    let mi = tape.add(mi_hat, cross_i);

    let from_images = tape.concat_cols(&[mi_hat, g_n]);
    let from_images = layer.cross_in_o.forward(tape, p, from_images);
    let agg_o = gated_aggregate(tape, gv.a_ct, po, pi, from_images, p.var(layer.gate_o));
    let cross_o = layer.cross_out_o.forward(tape, p, agg_o);
    let mo = tape.add(mo_hat, cross_o);
    (mi, mo)
}

/// Returns the next `(hi, ho)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn vertex_update_t(
    tape: &mut Tape,
    p: &BoundParams,
    layer: &MixerLayer,
    gv: &GraphVars,
    hi: Var,
    ho: Var,
    mi: Var,
    mo: Var,
    ablation: Ablation,
) -> (Var, Var) {
    let hi_next = if ablation.updates_images() {
        let from_objects = tape.matmul(gv.a_c, mo);
        let delta = layer.update_i.forward(tape, p, from_objects);
        tape.add(hi, delta)
    } else {
        hi
    };
    let ho_next = if ablation.updates_objects() {
        let from_images = tape.matmul(gv.a_ct, mi);
        let delta = layer.update_o.forward(tape, p, from_images);
        tape.add(ho, delta)
    } else {
        ho
    };
    (hi_next, ho_next)
}

/// Full `L`-round pass on a tape. Returns `(mi, mo)`.
pub(crate) fn mix_t(
    tape: &mut Tape,
    p: &BoundParams,
    params: &MixerParams,
    gv: &GraphVars,
    images: Var,
    objects: Var,
    ablation: Ablation,
) -> (Var, Var) {
    if ablation == Ablation::NoUpdate {
        return (images, objects);
    }
    let (mut hi, mut ho) = (images, objects);
    for layer in &params.layers {
        let mi_hat = self_update_t(tape, p, layer, Side::Image, hi, gv.a_im, gv.goal);
        let mo_hat = self_update_t(tape, p, layer, Side::Object, ho, gv.a_ob, gv.goal);
        let (mi, mo) = cross_update_t(tape, p, layer, gv, hi, ho, mi_hat, mo_hat);
        (hi, ho) = vertex_update_t(tape, p, layer, gv, hi, ho, mi, mo, ablation);
    }
    (hi, ho)
}

fn layer_of(params: &MixerParams, layer: usize) -> Result<&MixerLayer> {
    params
        .layers
        .get(layer)
        .ok_or_else(|| TsgmError::invalid(format!("mixer has no layer {layer}")))
}

/// Explicit `d x d` edge gate for one edge. `w_dst`/`w_src` are the endpoint
/// projections (`width x p`), `gate` the `d x 2p·d` tensor.
pub fn edge_gate(h_dst: &[f64], h_src: &[f64], w_dst: &Matrix, w_src: &Matrix, gate: &Matrix) -> Result<Matrix> {
    let p = w_dst.cols();
    let d = gate.rows();
    if h_dst.len() != w_dst.rows() || h_src.len() != w_src.rows() || w_src.cols() != p || gate.cols() != 2 * p * d {
        return Err(TsgmError::invalid("edge gate shape mismatch"));
    }
    let e_dst = Matrix::row_vector(h_dst).matmul(w_dst);
    let e_src = Matrix::row_vector(h_src).matmul(w_src);
    let e: Vec<f64> = e_dst.data().iter().chain(e_src.data()).copied().collect();
    let mut b = Matrix::zeros(d, d);
    for (j, ej) in e.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                b[(r, c)] += ej * gate[(c, j * d + r)];
            }
        }
    }
    Ok(b)
}

/// Self-update messages of one side at `layer`.
pub fn self_update(store: &ParamStore, params: &MixerParams, layer: usize, side: Side, h: &Matrix, a: &Matrix, goal: &[f64]) -> Result<Matrix> {
    let l = layer_of(params, layer)?;
    let width = match side {
        Side::Image => params.dims.image,
        Side::Object => params.dims.object,
    };
    if h.cols() != width || a.shape() != (h.rows(), h.rows()) || goal.len() != params.dims.image {
        return Err(TsgmError::invalid("self update shape mismatch"));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let hv = tape.constant(h.clone());
    let av = tape.constant(a.clone());
    let gv = tape.constant(Matrix::row_vector(goal));
    let out = self_update_t(&mut tape, &p, l, side, hv, av, gv);
    Ok(tape.value(out).clone())
}

/// Cross-updated messages `(mi, mo)` from the self-update messages.
#[allow(clippy::too_many_arguments)]
pub fn cross_update(
    store: &ParamStore,
    params: &MixerParams,
    layer: usize,
    hi: &Matrix,
    ho: &Matrix,
    mi_hat: &Matrix,
    mo_hat: &Matrix,
    a_c: &Matrix,
    goal: &[f64],
) -> Result<(Matrix, Matrix)> {
    let l = layer_of(params, layer)?;
    let (n, m, d) = (hi.rows(), ho.rows(), params.dims.hidden);
    if mi_hat.shape() != (n, d) || mo_hat.shape() != (m, d) || a_c.shape() != (n, m) {
        return Err(TsgmError::invalid("cross update shape mismatch"));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let gv = GraphVars::new(&mut tape, &Matrix::zeros(n, n), a_c, goal);
    let (hv, ov) = (tape.constant(hi.clone()), tape.constant(ho.clone()));
    let (miv, mov) = (tape.constant(mi_hat.clone()), tape.constant(mo_hat.clone()));
    let (mi, mo) = cross_update_t(&mut tape, &p, l, &gv, hv, ov, miv, mov);
    Ok((tape.value(mi).clone(), tape.value(mo).clone()))
}

/// Residual vertex update `(hi, ho) -> (hi', ho')`.
#[allow(clippy::too_many_arguments)]
pub fn vertex_update(
    store: &ParamStore,
    params: &MixerParams,
    layer: usize,
    hi: &Matrix,
    ho: &Matrix,
    mi: &Matrix,
    mo: &Matrix,
    a_c: &Matrix,
    ablation: Ablation,
) -> Result<(Matrix, Matrix)> {
    let l = layer_of(params, layer)?;
    let (n, m, d) = (hi.rows(), ho.rows(), params.dims.hidden);
    if mi.shape() != (n, d) || mo.shape() != (m, d) || a_c.shape() != (n, m) {
        return Err(TsgmError::invalid("vertex update shape mismatch"));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let gv = GraphVars::new(&mut tape, &Matrix::zeros(n, n), a_c, &vec![0.0; params.dims.image]);
    let (hv, ov) = (tape.constant(hi.clone()), tape.constant(ho.clone()));
    let (miv, mov) = (tape.constant(mi.clone()), tape.constant(mo.clone()));
    let (h1, h2) = vertex_update_t(&mut tape, &p, l, &gv, hv, ov, miv, mov, ablation);
    Ok((tape.value(h1).clone(), tape.value(h2).clone()))
}

/// Runs the mixer on explicit inputs.
pub fn mix_inputs(store: &ParamStore, params: &MixerParams, inputs: &MixInputs, ablation: Ablation) -> Result<MixedMemory> {
    inputs.check(&params.dims)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let gv = GraphVars::new(&mut tape, &inputs.a_im, &inputs.a_c, &inputs.goal);
    let x = tape.constant(inputs.images.clone());
    let z = tape.constant(inputs.objects.clone());
    let (mi, mo) = mix_t(&mut tape, &p, params, &gv, x, z, ablation);
    let out = MixedMemory {
        image: tape.value(mi).clone(),
        object: tape.value(mo).clone(),
    };
    if !out.image.is_finite() || !out.object.is_finite() {
        return Err(TsgmError::Numerical("mixer produced non-finite memory".into()));
    }
    Ok(out)
}

/// Runs the mixer on a graph snapshot; `A_ob` is derived from the graph.
pub fn mix(store: &ParamStore, params: &MixerParams, graph: &TsgmGraph, goal: &[f64], ablation: Ablation) -> Result<MixedMemory> {
    mix_inputs(store, params, &MixInputs::from_graph(graph, goal), ablation)
}

//! Memory attention readout and the recurrent action policy.
//!
//! Four scaled dot-product readouts (current and goal feature, each over the
//! image and the object memory) feed a gated recurrent cell together with an
//! embedding of the previous action. The hidden state drives the action
//! logits, a value baseline, and the progress / goal-sensor heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Result, TsgmError};
use crate::mixer::MixedMemory;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| TsgmError::invalid(format!("action index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stop => "stop",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = TsgmError;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| TsgmError::invalid(format!("unknown action `{s}`")))
    }
}

/// Embedding row used before the first action.
const NO_ACTION: usize = Action::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub image: usize,
    pub object: usize,
    pub attention: usize,
    pub hidden: usize,
    pub action_embed: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Head {
            w: store.insert_uniform(format!("{name}.w"), input, output, gain, rng),
            b: store.insert_zeros(format!("{name}.b"), 1, output),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        tape.add(y, p.var(self.b))
    }
}

/// Parameter layout of the readout and the policy inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub attn_image: AttentionParams,
    pub attn_object: AttentionParams,
    /// Input-to-gates weights, `(4·attention + action_embed) x 3·hidden`, gate order z, r, n.
    pub gru_wx: ParamId,
    pub gru_wh: ParamId,
    pub gru_b: ParamId,
    /// `5 x action_embed`; the last row is the "no previous action" slot.
    pub action_embed: ParamId,
    pub action_head: Head,
    pub value_head: Head,
    pub progress_head: Head,
    pub goal_head: Head,
}

impl PolicyParams {
    pub fn init(store: &mut ParamStore, dims: PolicyDims, rng: &mut impl Rng) -> Result<Self> {
        if [dims.image, dims.object, dims.attention, dims.hidden, dims.action_embed].contains(&0) {
            return Err(TsgmError::validation("model", "policy widths must be positive"));
        }
        let (da, dh) = (dims.attention, dims.hidden);
        let attn = |store: &mut ParamStore, name: &str, memory: usize, rng: &mut _| AttentionParams {
            wq: store.insert_uniform(format!("attn.{name}.wq"), dims.image, da, 1.0, rng),
            wk: store.insert_uniform(format!("attn.{name}.wk"), memory, da, 1.0, rng),
            wv: store.insert_uniform(format!("attn.{name}.wv"), memory, da, 1.0, rng),
        };
        let attn_image = attn(store, "img", dims.image, rng);
        let attn_object = attn(store, "obj", dims.object, rng);
        let input = 4 * da + 2 * dims.image + dims.action_embed;
        Ok(PolicyParams {
            dims,
            attn_image,
            attn_object,
            gru_wx: store.insert_uniform("gru.wx", input, 3 * dh, 1.0, rng),
            gru_wh: store.insert_uniform("gru.wh", dh, 3 * dh, 1.0, rng),
            gru_b: store.insert_zeros("gru.b", 1, 3 * dh),
            action_embed: store.insert_uniform("gru.action_embed", NO_ACTION + 1, dims.action_embed, 1.0, rng),
            action_head: Head::init(store, "head.action", dh, Action::COUNT, 0.1, rng),
            value_head: Head::init(store, "head.value", dh, 1, 0.1, rng),
            progress_head: Head::init(store, "head.progress", dh, 1, 0.1, rng),
            goal_head: Head::init(store, "head.goal", dh, 1, 0.1, rng),
        })
    }
}

/// Recurrent agent state `(h_a, a_{t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub hidden: Vec<f64>,
    pub prev_action: Option<Action>,
}

impl AgentState {
    pub fn initial(hidden: usize) -> Self {
        AgentState {
            hidden: vec![0.0; hidden],
            prev_action: None,
        }
    }
}

/// Attention readout result: context row and the weights over memory rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
}

/// The four readouts of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub image_current: Attention,
    pub object_current: Attention,
    pub image_goal: Attention,
    pub object_goal: Attention,
    /// Set when the object memory was empty and the object contexts are zero.
    pub object_memory_empty: bool,
}

impl Readout {
    /// `Ci_t || Co_t || Ci_g || Co_g`.
    pub fn concat(&self) -> Vec<f64> {
        [&self.image_current, &self.object_current, &self.image_goal, &self.object_goal]
            .iter()
            .flat_map(|a| a.context.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: [f64; 4],
    pub value: f64,
    pub state: AgentState,
}

pub(crate) struct AttendVars {
    pub context: Var,
    pub weights: Var,
}

pub(crate) fn attend_t(tape: &mut Tape, p: &BoundParams, a: &AttentionParams, query: Var, memory: Var) -> AttendVars {
    let da = tape.shape(p.var(a.wq)).1;
    let q = tape.matmul(query, p.var(a.wq));
    let k = tape.matmul(memory, p.var(a.wk));
    let v = tape.matmul(memory, p.var(a.wv));
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let logits = tape.scale(logits, 1.0 / (da as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    let context = tape.matmul(weights, v);
    AttendVars { context, weights }
}

pub(crate) struct ReadoutVars {
    /// `1 x 4·attention`.
    pub contexts: Var,
    /// Weight rows in readout order; object entries are `None` for an empty memory.
    pub weights: [Option<Var>; 4],
}

pub(crate) fn read_memory_t(
    tape: &mut Tape,
    p: &BoundParams,
    params: &PolicyParams,
    image_memory: Var,
    object_memory: Var,
    current: Var,
    goal: Var,
) -> ReadoutVars {
    let da = params.dims.attention;
    let object_rows = tape.shape(object_memory).0;
    let ci_t = attend_t(tape, p, &params.attn_image, current, image_memory);
    let ci_g = attend_t(tape, p, &params.attn_image, goal, image_memory);
    let (co_t, co_g) = if object_rows == 0 {
        (None, None)
    } else {
        (
            Some(attend_t(tape, p, &params.attn_object, current, object_memory)),
            Some(attend_t(tape, p, &params.attn_object, goal, object_memory)),
        )
    };
    let zero = |tape: &mut Tape| tape.constant(Matrix::zeros(1, da));
    let co_t_ctx = co_t.as_ref().map(|a| a.context).unwrap_or_else(|| zero(tape));
    let co_g_ctx = co_g.as_ref().map(|a| a.context).unwrap_or_else(|| zero(tape));
    let contexts = tape.concat_cols(&[ci_t.context, co_t_ctx, ci_g.context, co_g_ctx]);
    ReadoutVars {
        contexts,
        weights: [
            Some(ci_t.weights),
            co_t.map(|a| a.weights),
            Some(ci_g.weights),
            co_g.map(|a| a.weights),
        ],
    }
}

pub(crate) struct StepVars {
    pub logits: Var,
    pub value: Var,
    pub hidden: Var,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn policy_step_t(
    tape: &mut Tape,
    p: &BoundParams,
    params: &PolicyParams,
    contexts: Var,
    current: Var,
    goal: Var,
    hidden: Var,
    prev_action: Option<Action>,
) -> StepVars {
    let dh = params.dims.hidden;
    let mut onehot = Matrix::zeros(1, NO_ACTION + 1);
    onehot[(0, prev_action.map_or(NO_ACTION, Action::index))] = 1.0;
    let onehot = tape.constant(onehot);
    let embed = tape.matmul(onehot, p.var(params.action_embed));
    // The raw observation enters next to the readouts, together with its
    // elementwise agreement with the goal, so that "the goal is in view" is a
    // linear function of the cell input.
    let agree = tape.mul(current, goal);
    let x = tape.concat_cols(&[contexts, current, agree, embed]);

    let gx = tape.matmul(x, p.var(params.gru_wx));
    let gx = tape.add(gx, p.var(params.gru_b));
    let gh = tape.matmul(hidden, p.var(params.gru_wh));
    let gate = |tape: &mut Tape, k: usize| (tape.slice_cols(gx, k * dh, dh), tape.slice_cols(gh, k * dh, dh));
    let (xz, hz) = gate(tape, 0);
    let (xr, hr) = gate(tape, 1);
    let (xn, hn) = gate(tape, 2);
    let z = tape.add(xz, hz);
    let z = tape.sigmoid(z);
    let r = tape.add(xr, hr);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, hn);
    let n = tape.add(xn, rh);
    let n = tape.tanh(n);
    // h' = (1 - z) n + z h = n + z (h - n)
    let diff = tape.sub(hidden, n);
    let keep = tape.mul(z, diff);
    let hidden = tape.add(n, keep);

    let logits = params.action_head.forward(tape, p, hidden);
    let value = params.value_head.forward(tape, p, hidden);
    StepVars { logits, value, hidden }
}

/// Returns `(progress, goal)` as 1 x 1 vars in `[0, 1]`.
pub(crate) fn aux_heads_t(tape: &mut Tape, p: &BoundParams, params: &PolicyParams, hidden: Var) -> (Var, Var) {
    let progress = params.progress_head.forward(tape, p, hidden);
    let goal = params.goal_head.forward(tape, p, hidden);
    (tape.sigmoid(progress), tape.sigmoid(goal))
}

/// Scaled dot-product attention of one query over the rows of `memory`.
pub fn attend(query: &[f64], memory: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Attention> {
    if memory.rows() == 0 {
        return Err(TsgmError::invalid("attention over an empty memory"));
    }
    if query.len() != wq.rows() || memory.cols() != wk.rows() || wk.rows() != wv.rows() || wq.cols() != wk.cols() {
        return Err(TsgmError::invalid("attention shape mismatch"));
    }
    let q = Matrix::row_vector(query).matmul(wq);
    let k = memory.matmul(wk);
    let logits = q.matmul(&k.transpose()).scale(1.0 / (wq.cols() as f64).sqrt());
    let weights = softmax_rows(&logits);
    let context = weights.matmul(&memory.matmul(wv));
    Ok(Attention {
        context: context.into_vec(),
        weights: weights.into_vec(),
    })
}

fn check_feature(name: &str, v: &[f64], width: usize) -> Result<()> {
    if v.len() != width {
        return Err(TsgmError::invalid(format!("{name} has width {}, expected {width}", v.len())));
    }
    Ok(())
}

/// Reads the mixed memories with the current and the goal feature.
pub fn read_memory(store: &ParamStore, params: &PolicyParams, mixed: &MixedMemory, current: &[f64], goal: &[f64]) -> Result<Readout> {
    check_feature("current feature", current, params.dims.image)?;
    check_feature("goal feature", goal, params.dims.image)?;
    let m = |id| store.get(id);
    let (ai, ao) = (&params.attn_image, &params.attn_object);
    let image_current = attend(current, &mixed.image, m(ai.wq), m(ai.wk), m(ai.wv))?;
    let image_goal = attend(goal, &mixed.image, m(ai.wq), m(ai.wk), m(ai.wv))?;
    let empty = mixed.object.rows() == 0;
    let zero = || Attention {
        context: vec![0.0; params.dims.attention],
        weights: Vec::new(),
    };
    let (object_current, object_goal) = if empty {
        (zero(), zero())
    } else {
        (
            attend(current, &mixed.object, m(ao.wq), m(ao.wk), m(ao.wv))?,
            attend(goal, &mixed.object, m(ao.wq), m(ao.wk), m(ao.wv))?,
        )
    };
    Ok(Readout {
        image_current,
        object_current,
        image_goal,
        object_goal,
        object_memory_empty: empty,
    })
}

/// One recurrent step from the readout contexts and the raw current and goal features.
pub fn policy_step(
    store: &ParamStore,
    params: &PolicyParams,
    readout: &Readout,
    current: &[f64],
    goal: &[f64],
    state: &AgentState,
) -> Result<PolicyOutput> {
    let contexts = readout.concat();
    check_feature("contexts", &contexts, 4 * params.dims.attention)?;
    check_feature("current feature", current, params.dims.image)?;
    check_feature("goal feature", goal, params.dims.image)?;
    check_feature("hidden state", &state.hidden, params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let c = tape.constant(Matrix::row_vector(&contexts));
    let h = tape.constant(Matrix::row_vector(&state.hidden));
    let x = tape.constant(Matrix::row_vector(current));
    let g = tape.constant(Matrix::row_vector(goal));
    let out = policy_step_t(&mut tape, &p, params, c, x, g, h, state.prev_action);
    let l = tape.value(out.logits).data();
    let output = PolicyOutput {
        logits: [l[0], l[1], l[2], l[3]],
        value: tape.scalar(out.value),
        state: AgentState {
            hidden: tape.value(out.hidden).data().to_vec(),
            prev_action: state.prev_action,
        },
    };
    if !output.state.hidden.iter().chain(&output.logits).all(|x| x.is_finite()) {
        return Err(TsgmError::Numerical("policy step produced non-finite values".into()));
    }
    Ok(output)
}

/// `(progress, goal)` estimates in `[0, 1]`.
pub fn aux_heads(store: &ParamStore, params: &PolicyParams, hidden: &[f64]) -> Result<(f64, f64)> {
    check_feature("hidden state", hidden, params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let h = tape.constant(Matrix::row_vector(hidden));
    let (prog, goal) = aux_heads_t(&mut tape, &p, params, h);
    Ok((tape.scalar(prog), tape.scalar(goal)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Greedy,
    Stochastic,
}

/// Greedy picks the argmax (lowest index on ties); stochastic draws from the softmax.
pub fn sample_action(logits: &[f64; 4], mode: SampleMode, rng: &mut impl Rng) -> Result<Action> {
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(TsgmError::Numerical(format!("non-finite logits {logits:?}")));
    }
    let idx = match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Stochastic => {
            let probs = softmax_rows(&Matrix::row_vector(logits)).into_vec();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = Action::COUNT - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Action::from_index(idx)
}

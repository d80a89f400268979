//! The full agent: graph builder, cross graph mixer, memory readout and
//! recurrent policy, sharing one parameter store.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::builder::{BuilderState, GraphDelta};
use crate::encoders::EncoderConfig;
use crate::error::{Result, TsgmError};
use crate::graph::{Detection, TsgmGraph};
use crate::gridsim::{episode_salt, Agent, Episode, StepContext, World};
use crate::mixer::{mix_t, Ablation, GraphVars, MixerDims, MixerParams};
use crate::params::{BoundParams, ParamStore};
use crate::policy::{
    aux_heads_t, policy_step_t, read_memory_t, sample_action, Action, PolicyDims, PolicyParams, SampleMode,
};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Mixer message width `d`.
    pub hidden: usize,
    /// Edge projection width `p`.
    pub edge_dim: usize,
    /// Mixer rounds `L`.
    pub layers: usize,
    pub attention_dim: usize,
    pub policy_hidden: usize,
    pub action_embed: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 16,
            edge_dim: 4,
            layers: 2,
            attention_dim: 16,
            policy_hidden: 32,
            action_embed: 8,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.hidden", self.hidden),
            ("model.edge_dim", self.edge_dim),
            ("model.layers", self.layers),
            ("model.attention_dim", self.attention_dim),
            ("model.policy_hidden", self.policy_hidden),
            ("model.action_embed", self.action_embed),
        ] {
            if v == 0 {
                return Err(TsgmError::validation(name, "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TsgmModel {
    pub config: ModelConfig,
    pub encoder: EncoderConfig,
    pub num_categories: usize,
    pub store: ParamStore,
    pub mixer: MixerParams,
    pub policy: PolicyParams,
}

/// Tape handles of one decision step.
pub(crate) struct StepTape {
    pub logits: Var,
    pub value: Var,
    pub hidden: Var,
    pub progress: Var,
    pub goal: Var,
    pub attention: [Option<Var>; 4],
    pub object_memory_empty: bool,
}

/// One recorded observation of an episode, enough to replay the graph and the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedStep {
    pub image: Vec<f64>,
    pub detections: Vec<Detection>,
    /// Action executed after this observation.
    pub action: Action,
}

impl TsgmModel {
    pub fn new(config: &ModelConfig, encoder: &EncoderConfig, num_categories: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let object_width = encoder.dim_object + num_categories + 1;
        let mixer = MixerParams::init(
            &mut store,
            MixerDims {
                image: encoder.dim_image,
                object: object_width,
                hidden: config.hidden,
                edge: config.edge_dim,
                layers: config.layers,
            },
            &mut rng,
        )?;
        let policy = PolicyParams::init(
            &mut store,
            PolicyDims {
                image: encoder.dim_image,
                object: object_width,
                attention: config.attention_dim,
                hidden: config.policy_hidden,
                action_embed: config.action_embed,
            },
            &mut rng,
        )?;
        Ok(TsgmModel {
            config: config.clone(),
            encoder: encoder.clone(),
            num_categories,
            store,
            mixer,
            policy,
        })
    }

    pub fn new_builder(&self) -> BuilderState {
        BuilderState::new(&self.encoder, self.num_categories)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        graph: &TsgmGraph,
        current: &[f64],
        goal: &[f64],
        hidden: Var,
        prev_action: Option<Action>,
        ablation: Ablation,
    ) -> StepTape {
        let gv = GraphVars::new(tape, &graph.image_affinity(), &graph.cross_affinity(), goal);
        let x = tape.constant(graph.image_features());
        let z = tape.constant(graph.object_inputs());
        let (mi, mo) = mix_t(tape, p, &self.mixer, &gv, x, z, ablation);
        let cur = tape.constant(Matrix::row_vector(current));
        let readout = read_memory_t(tape, p, &self.policy, mi, mo, cur, gv.goal);
        let step = policy_step_t(tape, p, &self.policy, readout.contexts, cur, gv.goal, hidden, prev_action);
        let (progress, goal_prob) = aux_heads_t(tape, p, &self.policy, step.hidden);
        StepTape {
            logits: step.logits,
            value: step.value,
            hidden: step.hidden,
            progress,
            goal: goal_prob,
            attention: readout.weights,
            object_memory_empty: gv.m == 0,
        }
    }

    /// Replays an episode's observations through the builder and the
    /// policy on one tape, feeding the recorded actions back as `a_{t-1}`.
    pub(crate) fn episode_t(&self, tape: &mut Tape, p: &BoundParams, steps: &[RecordedStep], goal: &[f64], ablation: Ablation) -> Result<Vec<StepTape>> {
        let mut builder = self.new_builder();
        let mut hidden = tape.constant(Matrix::zeros(1, self.config.policy_hidden));
        let mut prev = None;
        let mut out = Vec::with_capacity(steps.len());
        for s in steps {
            builder.step(&s.image, &s.detections)?;
            let st = self.step_t(tape, p, builder.graph(), &s.image, goal, hidden, prev, ablation);
            hidden = st.hidden;
            prev = Some(s.action);
            out.push(st);
        }
        Ok(out)
    }
}

/// Per-step decision details, returned by [`TsgmAgent::decide`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub logits: [f64; 4],
    pub value: f64,
    pub progress: f64,
    pub goal: f64,
    pub delta: GraphDelta,
}

/// Evaluation-time agent. Cheap to clone; the model is shared.
#[derive(Debug, Clone)]
pub struct TsgmAgent {
    model: Arc<TsgmModel>,
    ablation: Ablation,
    mode: SampleMode,
    seed: u64,
    log_attention: bool,
    rng: ChaCha8Rng,
    builder: BuilderState,
    hidden: Vec<f64>,
    prev_action: Option<Action>,
    goal: Vec<f64>,
    pending_log: Option<serde_json::Value>,
}

impl TsgmAgent {
    pub fn new(model: Arc<TsgmModel>, mode: SampleMode, seed: u64) -> Self {
        let builder = model.new_builder();
        let hidden = vec![0.0; model.config.policy_hidden];
        TsgmAgent {
            ablation: model.config.ablation,
            model,
            mode,
            seed,
            log_attention: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            builder,
            hidden,
            prev_action: None,
            goal: Vec::new(),
            pending_log: None,
        }
    }

    /// Overrides the model's trained ablation at evaluation time.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_attention_log(mut self, on: bool) -> Self {
        self.log_attention = on;
        self
    }

    pub fn model(&self) -> &TsgmModel {
        &self.model
    }

    pub fn graph(&self) -> &TsgmGraph {
        self.builder.graph()
    }

    pub fn start(&mut self, goal: &[f64], episode_id: usize) {
        self.builder = self.model.new_builder();
        self.hidden = vec![0.0; self.model.config.policy_hidden];
        self.prev_action = None;
        self.goal = goal.to_vec();
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode_salt(episode_id));
        self.pending_log = None;
    }

    /// One observation in, one action out.
    pub fn decide(&mut self, image: &[f64], detections: &[Detection]) -> Result<Decision> {
        let delta = self.builder.step(image, detections)?;
        let model = Arc::clone(&self.model);
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let h = tape.constant(Matrix::row_vector(&self.hidden));
        let st = model.step_t(&mut tape, &p, self.builder.graph(), image, &self.goal, h, self.prev_action, self.ablation);
        let l = tape.value(st.logits).data();
        let logits = [l[0], l[1], l[2], l[3]];
        let action = sample_action(&logits, self.mode, &mut self.rng)?;
        self.hidden = tape.value(st.hidden).data().to_vec();
        if self.log_attention {
            let weights = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
            let [it, ot, ig, og] = st.attention;
            self.pending_log = Some(json!({
                "branch": delta.branch,
                "node": delta.node,
                "action": action,
                "object_memory_empty": st.object_memory_empty,
                "attention": {
                    "image_current": weights(it),
                    "object_current": weights(ot),
                    "image_goal": weights(ig),
                    "object_goal": weights(og),
                },
            }));
        }
        self.prev_action = Some(action);
        Ok(Decision {
            action,
            logits,
            value: tape.scalar(st.value),
            progress: tape.scalar(st.progress),
            goal: tape.scalar(st.goal),
            delta,
        })
    }
}

impl Agent for TsgmAgent {
    fn reset(&mut self, _world: &World, episode: &Episode) -> Result<()> {
        self.start(&episode.goal_feature, episode.id);
        Ok(())
    }

    fn act(&mut self, ctx: &StepContext<'_>) -> Result<Action> {
        let obs = ctx.observation;
        Ok(self.decide(&obs.image, &obs.detections)?.action)
    }

    fn take_step_log(&mut self) -> Option<serde_json::Value> {
        self.pending_log.take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridsim::{evaluate, Suite, Tier, WorldConfig};

    #[test]
    fn replayed_episode_matches_online_decisions() {
        let enc = EncoderConfig::default();
        let model = Arc::new(TsgmModel::new(&ModelConfig::default(), &enc, 8, 3).unwrap());
        let suite = Suite::generate(1, &WorldConfig::default(), &enc, 1, &[Tier::Easy], 1).unwrap();
        let world = &suite.worlds[0];
        let ep = &suite.episodes[0];
        let mut agent = TsgmAgent::new(Arc::clone(&model), SampleMode::Stochastic, 9);
        agent.start(&ep.goal_feature, ep.id);
        let mut rng = crate::gridsim::observation_rng(0, ep);
        let mut pose = ep.start;
        let mut steps = Vec::new();
        let mut logits = Vec::new();
        for _ in 0..15 {
            let obs = crate::gridsim::observe(world, &pose, &mut rng).unwrap();
            let d = agent.decide(&obs.image, &obs.detections).unwrap();
            logits.push(d.logits);
            let action = if d.action == Action::Stop { Action::TurnLeft } else { d.action };
            // keep the recorded action consistent with what the agent saw as a_{t-1}
            agent.prev_action = Some(action);
            steps.push(RecordedStep {
                image: obs.image,
                detections: obs.detections,
                action,
            });
            pose = crate::gridsim::step_env(world, &pose, action);
        }
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let replay = model.episode_t(&mut tape, &p, &steps, &ep.goal_feature, Ablation::None).unwrap();
        for (st, l) in replay.iter().zip(&logits) {
            assert_eq!(tape.value(st.logits).data(), l);
        }
    }

    #[test]
    fn agent_runs_and_logs_attention() {
        let enc = EncoderConfig::default();
        let model = Arc::new(TsgmModel::new(&ModelConfig::default(), &enc, 8, 4).unwrap());
        let suite = Suite::generate(2, &WorldConfig::default(), &enc, 1, &[Tier::Easy], 2).unwrap();
        let agent = TsgmAgent::new(model, SampleMode::Greedy, 0).with_attention_log(true);
        let report = evaluate(&agent, &suite, 20, 0, true).unwrap();
        assert_eq!(report.records.len(), 2);
        let r = &report.records[0];
        assert_eq!(r.step_logs.len(), r.steps);
        let w = r.step_logs[0]["attention"]["image_current"].as_array().unwrap();
        let total: f64 = w.iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

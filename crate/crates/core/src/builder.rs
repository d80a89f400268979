//! Incremental graph construction from a stream of observations.
//!
//! Each observation falls into exactly one branch:
//!
//! * **localized**: some image node has similarity `>= tau_image` to the
//!   current image and shares more than 10% of its objects (Jaccard) with the
//!   current detections. The most similar such node takes the new feature and
//!   becomes the last localized node.
//! * **new node**: the image is dissimilar (`<= tau_image`) to the last
//!   localized node, or the graph is empty. A node is appended and each
//!   detection, in descending score order, is either re-identified with an
//!   existing object (feature and score replaced only on a higher score) or
//!   added as a new object hosted by the new node.
//! * **dropped**: neither holds; the graph is left untouched.
//!
//! When both the candidate node and the current observation carry no
//! objects, the common-object gate cannot say anything and localization falls
//! back to image similarity alone.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoders::{unit_similarity, EncoderConfig};
use crate::error::{Result, TsgmError};
use crate::graph::{Detection, ImageId, ObjectId, TsgmGraph};
use crate::tensor::normalized;

/// Minimum common-object ratio (strict) for relocalization.
pub const CO_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Localized,
    NewNode,
    Dropped,
}

/// What a single [`BuilderState::step`] changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDelta {
    pub branch: Branch,
    /// Localized or newly added image node.
    pub node: Option<ImageId>,
    /// Dropped although a node other than the last localized one passed the
    /// similarity gate (its common-object gate failed).
    pub ambiguous: bool,
    pub added_objects: Vec<ObjectId>,
    pub updated_objects: Vec<ObjectId>,
    /// Existing objects re-identified in this observation.
    pub matched_objects: Vec<ObjectId>,
    pub new_image_edges: Vec<(ImageId, ImageId)>,
    pub new_cross_edges: Vec<(ImageId, ObjectId)>,
}

impl GraphDelta {
    fn new(branch: Branch) -> Self {
        GraphDelta {
            branch,
            node: None,
            ambiguous: false,
            added_objects: Vec::new(),
            updated_objects: Vec::new(),
            matched_objects: Vec::new(),
            new_image_edges: Vec::new(),
            new_cross_edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuilderState {
    graph: TsgmGraph,
    neighbor_pool: BTreeSet<ObjectId>,
    tau_image: f64,
    tau_object: f64,
}

impl BuilderState {
    pub fn new(encoder: &EncoderConfig, num_categories: usize) -> Self {
        BuilderState {
            graph: TsgmGraph::new(encoder.dim_image, encoder.dim_object, num_categories),
            neighbor_pool: BTreeSet::new(),
            tau_image: encoder.tau_image,
            tau_object: encoder.tau_object,
        }
    }

    pub fn graph(&self) -> &TsgmGraph {
        &self.graph
    }

    pub fn into_graph(self) -> TsgmGraph {
        self.graph
    }

    /// Objects near the last committed image node.
    pub fn neighbor_pool(&self) -> &BTreeSet<ObjectId> {
        &self.neighbor_pool
    }

    /// Most similar pool member with similarity `>= tau_object` and the same
    /// category. Ties go to the lowest id.
    pub fn match_object(&self, candidate: &Detection, pool: &BTreeSet<ObjectId>) -> Option<ObjectId> {
        let feature = normalized(&candidate.feature)?;
        let mut best: Option<(ObjectId, f64)> = None;
        for &k in pool {
            let Ok(obj) = self.graph.object(k) else { continue };
            if obj.category != candidate.category || obj.feature.len() != feature.len() {
                continue;
            }
            let sim = unit_similarity(&obj.feature, &feature);
            if sim >= self.tau_object && best.is_none_or(|(_, s)| sim > s) {
                best = Some((k, sim));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Identity set of the current detections relative to `image`'s objects:
    /// matched detections map to the object id, unmatched ones to fresh ids.
    fn current_identities(&self, image: ImageId, detections: &[Detection]) -> Result<(BTreeSet<ObjectId>, bool)> {
        let pool = self.graph.objects_of(image)?;
        let ids = detections
            .iter()
            .enumerate()
            .map(|(i, d)| self.match_object(d, &pool).unwrap_or(ObjectId::MAX - i))
            .collect();
        Ok((ids, pool.is_empty()))
    }

    fn passes_object_gate(&self, image: ImageId, detections: &[Detection]) -> Result<bool> {
        let (current, pool_empty) = self.current_identities(image, detections)?;
        if pool_empty && current.is_empty() {
            return Ok(true);
        }
        Ok(self.graph.common_object_ratio(image, &current)? > CO_THRESHOLD)
    }

    /// Existing image node matching the observation, if any: the most similar
    /// node among those passing both the similarity and common-object gates.
    pub fn localize(&self, image_feature: &[f64], detections: &[Detection]) -> Result<Option<ImageId>> {
        let feature = self.unit_image(image_feature)?;
        let mut best: Option<(ImageId, f64)> = None;
        for node in self.graph.images() {
            let sim = unit_similarity(&node.feature, &feature);
            if sim < self.tau_image || best.is_some_and(|(_, s)| sim <= s) {
                continue;
            }
            if self.passes_object_gate(node.id, detections)? {
                best = Some((node.id, sim));
            }
        }
        Ok(best.map(|(id, _)| id))
    }

    fn unit_image(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.graph.dim_image() {
            return Err(TsgmError::invalid(format!(
                "image feature has dimension {}, expected {}",
                feature.len(),
                self.graph.dim_image()
            )));
        }
        normalized(feature).ok_or_else(|| TsgmError::invalid("image feature is zero"))
    }

    /// Processes one observation.
    pub fn step(&mut self, image_feature: &[f64], detections: &[Detection]) -> Result<GraphDelta> {
        let feature = self.unit_image(image_feature)?;
        let Some(last) = self.graph.last_localized() else {
            return self.commit_new_node(&feature, detections);
        };

        if let Some(k) = self.localize(&feature, detections)? {
            let mut delta = GraphDelta::new(Branch::Localized);
            self.graph.update_image_feature(k, &feature)?;
            if self.graph.connect_images(k, last)? {
                delta.new_image_edges.push((k.min(last), k.max(last)));
            }
            self.graph.set_last_localized(k)?;
            delta.node = Some(k);
            return Ok(delta);
        }

        let last_sim = unit_similarity(&self.graph.image(last)?.feature, &feature);
        if last_sim <= self.tau_image {
            return self.commit_new_node(&feature, detections);
        }

        let mut delta = GraphDelta::new(Branch::Dropped);
        delta.ambiguous = self
            .graph
            .images()
            .iter()
            .any(|n| n.id != last && unit_similarity(&n.feature, &feature) >= self.tau_image);
        Ok(delta)
    }

    fn commit_new_node(&mut self, feature: &[f64], detections: &[Detection]) -> Result<GraphDelta> {
        let mut delta = GraphDelta::new(Branch::NewNode);
        let prev = self.graph.last_localized();
        let id = self.graph.add_image_node(feature)?;
        delta.node = Some(id);
        if let Some(p) = prev {
            delta.new_image_edges.push((p.min(id), p.max(id)));
        }

        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));

        for i in order {
            let det = &detections[i];
            let matched = self.match_object(det, &self.neighbor_pool).or_else(|| {
                let rest: BTreeSet<ObjectId> = (0..self.graph.num_objects())
                    .filter(|k| !self.neighbor_pool.contains(k))
                    .collect();
                self.match_object(det, &rest)
            });
            match matched {
                Some(m) => {
                    delta.matched_objects.push(m);
                    if self.graph.link_object(id, m)? {
                        delta.new_cross_edges.push((id, m));
                    }
                    if det.score > self.graph.object(m)?.score {
                        self.graph.update_object(m, &det.feature, det.score)?;
                        delta.updated_objects.push(m);
                    }
                }
                None => {
                    let k = self.graph.add_object_node(det, id)?;
                    delta.added_objects.push(k);
                    delta.new_cross_edges.push((id, k));
                }
            }
        }
        self.neighbor_pool = self.graph.neighbor_objects(id)?;
        Ok(delta)
    }
}

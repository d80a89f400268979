//! Topological semantic graph: image nodes for visited places, object nodes
//! for unique objects, and the 0/1 affinities between them.
//!
//! Node ids are insertion-ordered indices and every derived matrix uses that
//! ordering. The object affinity is never stored; it is recomputed from the
//! image and cross affinities as `A_ob = A_c^T (A_im + I) A_c`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsgmError};
use crate::tensor::{normalized, Matrix};

pub type ImageId = usize;
pub type ObjectId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageNode {
    pub id: ImageId,
    pub feature: Vec<f64>,
}

/// One detected object: unit feature, class label and detection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: ObjectId,
    pub feature: Vec<f64>,
    pub category: usize,
    pub score: f64,
}

/// A detection before it is committed to the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub feature: Vec<f64>,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsgmGraph {
    dim_image: usize,
    dim_object: usize,
    num_categories: usize,
    images: Vec<ImageNode>,
    objects: Vec<ObjectState>,
    image_edges: BTreeSet<(ImageId, ImageId)>,
    cross_edges: BTreeSet<(ImageId, ObjectId)>,
    last_localized: Option<ImageId>,
}

impl TsgmGraph {
    pub fn new(dim_image: usize, dim_object: usize, num_categories: usize) -> Self {
        TsgmGraph {
            dim_image,
            dim_object,
            num_categories,
            images: Vec::new(),
            objects: Vec::new(),
            image_edges: BTreeSet::new(),
            cross_edges: BTreeSet::new(),
            last_localized: None,
        }
    }

    pub fn dim_image(&self) -> usize {
        self.dim_image
    }

    pub fn dim_object(&self) -> usize {
        self.dim_object
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Width of the object input vector `feature || one-hot(category) || score`.
    pub fn object_input_dim(&self) -> usize {
        self.dim_object + self.num_categories + 1
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn images(&self) -> &[ImageNode] {
        &self.images
    }

    pub fn objects(&self) -> &[ObjectState] {
        &self.objects
    }

    pub fn image(&self, id: ImageId) -> Result<&ImageNode> {
        self.images
            .get(id)
            .ok_or_else(|| TsgmError::NotFound(format!("image node {id}")))
    }

    pub fn object(&self, id: ObjectId) -> Result<&ObjectState> {
        self.objects
            .get(id)
            .ok_or_else(|| TsgmError::NotFound(format!("object node {id}")))
    }

    pub fn image_edges(&self) -> &BTreeSet<(ImageId, ImageId)> {
        &self.image_edges
    }

    pub fn cross_edges(&self) -> &BTreeSet<(ImageId, ObjectId)> {
        &self.cross_edges
    }

    pub fn last_localized(&self) -> Option<ImageId> {
        self.last_localized
    }

    pub fn set_last_localized(&mut self, id: ImageId) -> Result<()> {
        self.image(id)?;
        self.last_localized = Some(id);
        Ok(())
    }

    fn unit_feature(&self, feature: &[f64], dim: usize, what: &str) -> Result<Vec<f64>> {
        if feature.len() != dim {
            return Err(TsgmError::invalid(format!(
                "{what} feature has dimension {}, expected {dim}",
                feature.len()
            )));
        }
        normalized(feature).ok_or_else(|| TsgmError::invalid(format!("{what} feature is zero or non-finite")))
    }

    /// Like `unit_feature`, but keeps vectors that are already unit length to
    /// within rounding bit for bit, so a saved graph reloads unchanged.
    fn stored_feature(&self, feature: Vec<f64>, dim: usize, what: &str) -> Result<Vec<f64>> {
        let unit = self.unit_feature(&feature, dim, what)?;
        let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(if (norm - 1.0).abs() <= 1e-12 { feature } else { unit })
    }

    /// Appends an image node, links it to the last localized node (if any)
    /// and makes it the new last localized node.
    pub fn add_image_node(&mut self, feature: &[f64]) -> Result<ImageId> {
        let feature = self.unit_feature(feature, self.dim_image, "image")?;
        let id = self.images.len();
        self.images.push(ImageNode { id, feature });
        if let Some(prev) = self.last_localized {
            self.connect_images(id, prev)?;
        }
        self.last_localized = Some(id);
        Ok(id)
    }

    /// Appends an object node hosted by `host`.
    pub fn add_object_node(&mut self, detection: &Detection, host: ImageId) -> Result<ObjectId> {
        self.image(host)?;
        let feature = self.unit_feature(&detection.feature, self.dim_object, "object")?;
        self.check_detection(detection)?;
        let id = self.objects.len();
        self.objects.push(ObjectState {
            id,
            feature,
            category: detection.category,
            score: detection.score,
        });
        self.cross_edges.insert((host, id));
        Ok(id)
    }

    fn check_detection(&self, detection: &Detection) -> Result<()> {
        if detection.category >= self.num_categories {
            return Err(TsgmError::invalid(format!(
                "category {} outside [0, {})",
                detection.category, self.num_categories
            )));
        }
        if !(0.0..=1.0).contains(&detection.score) {
            return Err(TsgmError::invalid(format!("detection score {} outside [0, 1]", detection.score)));
        }
        Ok(())
    }

    /// Adds an undirected image edge. Self-loops are ignored; returns whether
    /// a new edge was created.
    pub fn connect_images(&mut self, a: ImageId, b: ImageId) -> Result<bool> {
        self.image(a)?;
        self.image(b)?;
        if a == b {
            return Ok(false);
        }
        Ok(self.image_edges.insert((a.min(b), a.max(b))))
    }

    /// Adds a cross edge; returns whether it was new.
    pub fn link_object(&mut self, image: ImageId, object: ObjectId) -> Result<bool> {
        self.image(image)?;
        self.object(object)?;
        Ok(self.cross_edges.insert((image, object)))
    }

    pub fn update_image_feature(&mut self, id: ImageId, feature: &[f64]) -> Result<()> {
        let feature = self.unit_feature(feature, self.dim_image, "image")?;
        self.images
            .get_mut(id)
            .ok_or_else(|| TsgmError::NotFound(format!("image node {id}")))?
            .feature = feature;
        Ok(())
    }

    /// Overwrites an object's feature and score (category is identity and stays).
    pub fn update_object(&mut self, id: ObjectId, feature: &[f64], score: f64) -> Result<()> {
        let feature = self.unit_feature(feature, self.dim_object, "object")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(TsgmError::invalid(format!("detection score {score} outside [0, 1]")));
        }
        let obj = self
            .objects
            .get_mut(id)
            .ok_or_else(|| TsgmError::NotFound(format!("object node {id}")))?;
        obj.feature = feature;
        obj.score = score;
        Ok(())
    }

    /// `A_im`: N x N, symmetric, zero diagonal.
    pub fn image_affinity(&self) -> Matrix {
        let n = self.images.len();
        let mut a = Matrix::zeros(n, n);
        for &(u, v) in &self.image_edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }

    /// `A_c`: N x M.
    pub fn cross_affinity(&self) -> Matrix {
        let mut a = Matrix::zeros(self.images.len(), self.objects.len());
        for &(i, k) in &self.cross_edges {
            a[(i, k)] = 1.0;
        }
        a
    }

    /// `A_ob = A_c^T (A_im + I) A_c`: M x M, symmetric, nonnegative integers.
    pub fn object_affinity(&self) -> Matrix {
        let ac = self.cross_affinity();
        let mut a_im_i = self.image_affinity();
        for i in 0..a_im_i.rows() {
            a_im_i[(i, i)] += 1.0;
        }
        ac.transpose().matmul(&a_im_i).matmul(&ac)
    }

    /// Object ids linked to an image node.
    pub fn objects_of(&self, image: ImageId) -> Result<BTreeSet<ObjectId>> {
        self.image(image)?;
        Ok(self
            .cross_edges
            .range((image, 0)..=(image, ObjectId::MAX))
            .map(|&(_, k)| k)
            .collect())
    }

    /// Image ids adjacent to `image` in `A_im`.
    pub fn image_neighbors(&self, image: ImageId) -> Result<BTreeSet<ImageId>> {
        self.image(image)?;
        Ok(self
            .image_edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == image {
                    Some(b)
                } else if b == image {
                    Some(a)
                } else {
                    None
                }
            })
            .collect())
    }

    /// Objects linked to `image` or to any image adjacent to it.
    pub fn neighbor_objects(&self, image: ImageId) -> Result<BTreeSet<ObjectId>> {
        let mut pool = self.objects_of(image)?;
        for n in self.image_neighbors(image)? {
            pool.extend(self.objects_of(n)?);
        }
        Ok(pool)
    }

    /// Jaccard overlap between the objects of `image` and the identity set of
    /// the current observation. Both sets empty gives 0.
    pub fn common_object_ratio(&self, image: ImageId, current: &BTreeSet<ObjectId>) -> Result<f64> {
        Ok(jaccard(&self.objects_of(image)?, current))
    }

    /// Mixer input row for an object: `feature || one-hot(category) || score`.
    pub fn object_input(&self, id: ObjectId) -> Result<Vec<f64>> {
        let obj = self.object(id)?;
        let mut v = Vec::with_capacity(self.object_input_dim());
        v.extend_from_slice(&obj.feature);
        v.extend((0..self.num_categories).map(|c| if c == obj.category { 1.0 } else { 0.0 }));
        v.push(obj.score);
        Ok(v)
    }

    /// Image features stacked in id order (N x D).
    pub fn image_features(&self) -> Matrix {
        Matrix::from_rows(&self.images.iter().map(|n| n.feature.as_slice()).collect::<Vec<_>>(), self.dim_image)
    }

    /// Object input rows stacked in id order (M x object_input_dim).
    pub fn object_inputs(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.objects.len())
            .map(|k| self.object_input(k).expect("ids in range"))
            .collect();
        Matrix::from_rows(&rows, self.object_input_dim())
    }

    /// Rebuilds a graph from raw parts (used by the JSON loader); every
    /// structural invariant is checked.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim_image: usize,
        dim_object: usize,
        num_categories: usize,
        images: Vec<ImageNode>,
        objects: Vec<ObjectState>,
        image_edges: Vec<(ImageId, ImageId)>,
        cross_edges: Vec<(ImageId, ObjectId)>,
        last_localized: Option<ImageId>,
    ) -> Result<Self> {
        let mut g = TsgmGraph::new(dim_image, dim_object, num_categories);
        for (i, node) in images.into_iter().enumerate() {
            if node.id != i {
                return Err(TsgmError::validation("images.id", format!("expected id {i}, found {}", node.id)));
            }
            let feature = g.stored_feature(node.feature, dim_image, "image")?;
            g.images.push(ImageNode { id: i, feature });
        }
        for (k, obj) in objects.into_iter().enumerate() {
            if obj.id != k {
                return Err(TsgmError::validation("objects.id", format!("expected id {k}, found {}", obj.id)));
            }
            let det = Detection {
                feature: obj.feature,
                category: obj.category,
                score: obj.score,
            };
            g.check_detection(&det)?;
            let feature = g.stored_feature(det.feature, dim_object, "object")?;
            g.objects.push(ObjectState {
                id: k,
                feature,
                category: det.category,
                score: det.score,
            });
        }
        for (a, b) in image_edges {
            if a == b {
                return Err(TsgmError::validation("image_edges", format!("self-loop on {a}")));
            }
            g.connect_images(a, b)?;
        }
        for (i, k) in cross_edges {
            g.link_object(i, k)?;
        }
        for k in 0..g.objects.len() {
            if !g.cross_edges.iter().any(|&(_, o)| o == k) {
                return Err(TsgmError::validation("cross_edges", format!("object {k} has no host image")));
            }
        }
        if let Some(l) = last_localized {
            g.set_last_localized(l)?;
        }
        Ok(g)
    }
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 when both are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn det(i: usize) -> Detection {
        Detection {
            feature: e(i, 4),
            category: 0,
            score: 0.5,
        }
    }

    fn graph() -> TsgmGraph {
        TsgmGraph::new(3, 4, 2)
    }

    #[test]
    fn first_image_has_no_edges() {
        let mut g = graph();
        let id = g.add_image_node(&e(0, 3)).unwrap();
        assert_eq!(id, 0);
        assert_eq!(g.num_images(), 1);
        assert!(g.image_edges().is_empty());
        assert_eq!(g.last_localized(), Some(0));
    }

    #[test]
    fn second_image_connects_to_last_localized() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_image_node(&e(1, 3)).unwrap();
        let a = g.image_affinity();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 0)], 1.0);
    }

    #[test]
    fn three_adds_form_a_path() {
        let mut g = graph();
        for i in 0..3 {
            g.add_image_node(&e(i, 3)).unwrap();
        }
        let expected = Matrix::from_vec(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.image_affinity(), expected);
    }

    #[test]
    fn image_features_are_normalized_and_checked() {
        let mut g = graph();
        let id = g.add_image_node(&[3.0, 4.0, 0.0]).unwrap();
        let f = &g.image(id).unwrap().feature;
        assert!((crate::tensor::l2_norm(f) - 1.0).abs() < 1e-12);
        assert!(matches!(g.add_image_node(&[1.0, 0.0]), Err(TsgmError::InvalidInput(_))));
        assert!(matches!(g.add_image_node(&[0.0, 0.0, 0.0]), Err(TsgmError::InvalidInput(_))));
    }

    #[test]
    fn object_on_single_image() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_object_node(&det(0), 0).unwrap();
        assert_eq!(g.cross_affinity(), Matrix::from_vec(1, 1, vec![1.0]));
    }

    #[test]
    fn two_objects_on_same_host() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_object_node(&det(0), 0).unwrap();
        g.add_object_node(&det(1), 0).unwrap();
        assert_eq!(g.cross_affinity(), Matrix::from_vec(1, 2, vec![1.0, 1.0]));
        assert_eq!(g.object_affinity(), Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn object_on_second_node_of_path() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_image_node(&e(1, 3)).unwrap();
        let k = g.add_object_node(&det(0), 1).unwrap();
        let ac = g.cross_affinity();
        assert_eq!(ac[(1, k)], 1.0);
        assert_eq!(ac[(0, k)], 0.0);
    }

    #[test]
    fn missing_host_is_not_found() {
        let mut g = graph();
        assert!(matches!(g.add_object_node(&det(0), 0), Err(TsgmError::NotFound(_))));
    }

    #[test]
    fn invalid_detections_are_rejected() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        let mut d = det(0);
        d.category = 2;
        assert!(g.add_object_node(&d, 0).is_err());
        let mut d = det(0);
        d.score = 1.5;
        assert!(g.add_object_node(&d, 0).is_err());
    }

    #[test]
    fn object_affinity_two_images_identity_cross() {
        // A_im = [[0,1],[1,0]], A_c = I2
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_image_node(&e(1, 3)).unwrap();
        g.add_object_node(&det(0), 0).unwrap();
        g.add_object_node(&det(1), 1).unwrap();
        assert_eq!(g.object_affinity(), Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn empty_graph_has_empty_affinities() {
        let g = graph();
        assert_eq!(g.object_affinity().shape(), (0, 0));
        assert_eq!(g.image_affinity().shape(), (0, 0));
    }

    #[test]
    fn jaccard_cases() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(jaccard(&s(&[1, 2, 3]), &s(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(jaccard(&s(&[1]), &s(&[2])), 0.0);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 0.0);
    }

    #[test]
    fn common_object_ratio_uses_linked_objects() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        for i in 0..3 {
            g.add_object_node(&det(i), 0).unwrap();
        }
        // objects {0,1,2} vs current {1,2,99}
        let current: BTreeSet<usize> = [1, 2, 99].into_iter().collect();
        assert_eq!(g.common_object_ratio(0, &current).unwrap(), 0.5);
        assert!(g.common_object_ratio(5, &current).is_err());
    }

    #[test]
    fn neighbor_objects_cases() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        g.add_object_node(&det(0), 0).unwrap();
        g.add_object_node(&det(1), 0).unwrap();
        assert_eq!(g.neighbor_objects(0).unwrap(), [0, 1].into_iter().collect());

        // path 0-1, objects only on 0, query 1
        g.add_image_node(&e(1, 3)).unwrap();
        assert_eq!(g.neighbor_objects(1).unwrap(), [0, 1].into_iter().collect());

        // path 0-1-2, query 1 sees objects of 0, 1, 2
        g.add_object_node(&det(2), 1).unwrap();
        g.add_image_node(&e(2, 3)).unwrap();
        g.add_object_node(&det(3), 2).unwrap();
        assert_eq!(g.neighbor_objects(1).unwrap(), [0, 1, 2, 3].into_iter().collect());
        assert!(matches!(g.neighbor_objects(9), Err(TsgmError::NotFound(_))));
    }

    #[test]
    fn self_loops_are_skipped() {
        let mut g = graph();
        g.add_image_node(&e(0, 3)).unwrap();
        assert!(!g.connect_images(0, 0).unwrap());
        assert_eq!(g.image_affinity()[(0, 0)], 0.0);
    }
}

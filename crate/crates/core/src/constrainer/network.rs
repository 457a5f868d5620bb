use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{Detector, DetectorConfig, DetectorOutputs};
use crate::diffcore::layers::Conv2d;
use crate::diffcore::{Graph, Mode, NodeId, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;

use super::ConstrainerConfig;

/// `conv3×3 → relu → conv1×1 → classes`.
#[derive(Debug, Clone)]
pub struct SemanticHead {
    hidden: Conv2d,
    out: Conv2d,
}

impl SemanticHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, &format!("{prefix}.hidden"), cin, hidden, 3, 1, true, rng)?,
            out: Conv2d::new(store, &format!("{prefix}.out"), hidden, classes, 1, 1, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// Pixelwise projection `conv1×1 → relu → conv1×1 → L2-normalize`.
#[derive(Debug, Clone)]
pub struct Projection {
    hidden: Conv2d,
    out: Conv2d,
}

impl Projection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        hidden: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, &format!("{prefix}.hidden"), cin, hidden, 1, 1, true, rng)?,
            out: Conv2d::new(store, &format!("{prefix}.out"), hidden, dim, 1, 1, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let e = self.out.forward(g, store, h)?;
        g.l2_normalize(e)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkOutputs {
    pub detector: DetectorOutputs,
    /// `2N×K×h×w` semantic logits, t1 images first.
    pub sem_logits_low: NodeId,
    /// `2N×K×H×W`.
    pub sem_logits: NodeId,
    /// `2N×D×h×w` embeddings of the per-date features.
    pub emb_seg: NodeId,
    /// `N×D×h×w` embeddings of the fused change features.
    pub emb_cd: NodeId,
}

/// The detector plus its training-time heads, all stored in one parameter set.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub detector_config: DetectorConfig,
    pub constrainer_config: ConstrainerConfig,
    pub detector: Detector,
    pub semantic_head: SemanticHead,
    pub proj_seg: Projection,
    pub proj_cd: Projection,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(detector_config: &DetectorConfig, constrainer_config: &ConstrainerConfig, seed: u64) -> Result<Self> {
        detector_config.validate()?;
        constrainer_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, detector_config, &mut rng)?;
        let c = detector_config.channels;
        let cc = constrainer_config;
        let semantic_head = SemanticHead::new(
            &mut store,
            "semantic_head",
            c,
            cc.sem_hidden,
            detector_config.num_classes,
            &mut rng,
        )?;
        let proj_seg = Projection::new(&mut store, "proj_seg", c, cc.proj_hidden, cc.embed_dim, &mut rng)?;
        let proj_cd = Projection::new(&mut store, "proj_cd", c, cc.proj_hidden, cc.embed_dim, &mut rng)?;
        Ok(Self {
            detector_config: detector_config.clone(),
            constrainer_config: constrainer_config.clone(),
            detector,
            semantic_head,
            proj_seg,
            proj_cd,
            store,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x1: NodeId, x2: NodeId, mode: Mode) -> Result<NetworkOutputs> {
        let (_, _, h, w) = g.value(x1).dims4()?;
        let det = self.detector.detect(g, &self.store, x1, x2, mode)?;
        let sem_low = self.semantic_head.forward(g, &self.store, det.features)?;
        let sem = g.upsample_bilinear(sem_low, h, w)?;
        let emb_seg = self.proj_seg.forward(g, &self.store, det.features)?;
        let emb_cd = self.proj_cd.forward(g, &self.store, det.change_features)?;
        Ok(NetworkOutputs {
            detector: det,
            sem_logits_low: sem_low,
            sem_logits: sem,
            emb_seg,
            emb_cd,
        })
    }

    /// Same architecture and values with a different element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            detector_config: self.detector_config.clone(),
            constrainer_config: self.constrainer_config.clone(),
            detector: self.detector.clone(),
            semantic_head: self.semantic_head.clone(),
            proj_seg: self.proj_seg.clone(),
            proj_cd: self.proj_cd.clone(),
            store: self.store.cast(),
        }
    }
}

#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use certmark::data::{
    load_idx, make_trigger_set, split_indices, split_owner_adversary, synthetic_dataset, Dataset, PatchSpec,
    TriggerSet, TriggerSource, TRIGGER_COUNT_DEFAULT,
};
use certmark::embed::{embed_watermark, EmbedConfig, EmbedOutcome};
use certmark::nn::{Layout, ModelSpec, ParamVector, Shape3};

pub fn desk_dims() -> Shape3 {
    Shape3::new(16, 16, 1)
}
pub const TARGET_LABEL: usize = 0;

/// Data, model and trigger set for one desk-scale experiment.
pub struct World {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub owner: Dataset,
    pub adversary: Dataset,
    pub test: Dataset,
    pub triggers: TriggerSet,
    pub init: ParamVector,
}

impl World {
    fn build(pool: &Dataset, test: Dataset, seed: u64) -> Self {
        let (owner, adversary) = split_owner_adversary(pool, seed);
        let source = TriggerSource::EmbeddedContent { base: &owner, patch: PatchSpec::default() };
        let triggers = make_trigger_set(source, TARGET_LABEL, TRIGGER_COUNT_DEFAULT, seed).unwrap();
        let spec = ModelSpec::small_cnn(pool.shape(), pool.classes()).unwrap();
        let init = ParamVector::init(&spec, seed).unwrap();
        World { layout: spec.layout().unwrap(), spec, owner, adversary, test, triggers, init }
    }

    /// 2000 synthetic images split 1000/1000 plus 1000 test images.
    pub fn desk(seed: u64) -> Self {
        let pool = synthetic_dataset(seed, 2000, 10, desk_dims()).unwrap();
        let test = synthetic_dataset(seed ^ 0xFFFF, 1000, 10, desk_dims()).unwrap();
        Self::build(&pool, test, seed)
    }

    /// The bundled 5000-image MNIST sample: a fixed shuffle gives 4000
    /// images split 2000/2000 by `seed` and 1000 test images.
    pub fn mnist(seed: u64) -> Self {
        let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
        let all = load_idx(&root.join("images-idx3-ubyte"), &root.join("labels-idx1-ubyte")).unwrap();
        let (a, b) = split_indices(all.len(), 77);
        let order: Vec<usize> = a.into_iter().chain(b).collect();
        let pool = all.select(&order[..4000]);
        let test = all.select(&order[4000..]);
        Self::build(&pool, test, seed)
    }

    pub fn embed(&self, cfg: &EmbedConfig) -> EmbedOutcome {
        let mut opt = cfg.optimizer().build(self.init.len());
        embed_watermark(&self.spec, &self.init, &self.owner, Some(&self.test), &self.triggers, cfg, &mut opt).unwrap()
    }
}

/// `true` when at most `allowed` consecutive pairs break the order.
pub fn ordered_with_slack(values: &[f64], non_increasing: bool, allowed: usize) -> bool {
    let inversions = values
        .windows(2)
        .filter(|w| if non_increasing { w[1] > w[0] } else { w[1] < w[0] })
        .count();
    inversions <= allowed
}

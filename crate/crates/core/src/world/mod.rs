//! Synthetic gold worlds: hidden attribute functions over a latent space,
//! prompt distributions, noisy preference/attribute datasets and their
//! on-disk format.

mod dist;
mod gold;
mod records;
mod spurious;

pub use dist::{MixtureComponent, PromptDistribution};
pub use gold::{AttributeMap, GoldScores, GoldWorld, GoldWorldSpec, RandomWorldParams};
pub use records::{
    gen_multiattr, gen_pairwise, label_pair, read_attrs, read_pairs, write_attrs, write_pairs,
    AttributeRecord, PairwiseRecord, RecordHeader,
};
pub use spurious::{make_spurious_world, SpuriousConfig, SpuriousWorld};

//! Multi-view deep clustering with contrastive semantic labels.
//!
//! Each view gets its own autoencoder; a shared softmax head produces
//! per-view cluster memberships that a column-contrastive loss keeps
//! consistent across views, and sharpened Student's-t assignments tie the
//! views together at the cluster level. See the guide under `book/` for a
//! walkthrough; its code snippets compile as doc-tests of this crate.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod trainer;

// Run the guide's snippets as doc-tests so the book stays in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

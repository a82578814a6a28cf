// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::backbone::FrozenModel;
use crate::intervention::{edit_param_count, SubspaceEdit};
use crate::router::{router_param_count, RouterNet};

/// Trainable parameter total and its size relative to the frozen base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub edits: u64,
    pub router: u64,
    pub total: u64,
    pub base: u64,
    /// `total / base`, as a plain ratio (not a percentage).
    pub fraction: f64,
}

/// Count from live objects.
pub fn count_trainable(
    edits: &[&SubspaceEdit],
    router: Option<&RouterNet>,
    model: &FrozenModel,
) -> ParamCount {
    count_trainable_shapes(
        edits.iter().map(|e| (e.rank(), e.dim())),
        router.map(|r| (r.dim(), r.gates())),
        model.param_count(),
    )
}

/// Count from shapes alone: `(r, d)` per edit, `(d, k)` for the router.
/// Works for configurations far too large to instantiate.
pub fn count_trainable_shapes(
    edits: impl IntoIterator<Item = (usize, usize)>,
    router: Option<(usize, usize)>,
    base: u64,
) -> ParamCount {
    let edits: u64 = edits.into_iter().map(|(r, d)| edit_param_count(r, d)).sum();
    let router = router.map_or(0, |(d, k)| router_param_count(d, k));
    let total = edits + router;
    ParamCount {
        edits,
        router,
        total,
        base,
        fraction: if base == 0 { f64::INFINITY } else { total as f64 / base as f64 },
    }
}

use std::collections::BTreeSet;

use crate::error::Result;
use crate::types::{DegradationSet, DegradationType, ImageRef, MetricSpec, Preference, ToolId, ToolRegistry};

/// Restoration substrate: perception, tool execution, scoring and reflection.
pub trait Environment: Send + Sync {
    fn registry(&self) -> &ToolRegistry;

    /// Degradations reported for `image`; `attempt` counts re-perceptions.
    fn perceive(&self, image: &ImageRef, attempt: u32) -> Result<DegradationSet>;

    fn apply_tool(&self, image: &ImageRef, tool: &ToolId, degradation: &DegradationType) -> Result<ImageRef>;

    fn score(&self, image: &ImageRef, metric: &MetricSpec) -> Result<f64>;

    /// Degradations still present after restoration.
    fn unresolved(&self, image: &ImageRef) -> Result<BTreeSet<DegradationType>>;

    /// Scalar quality under a preference; larger is better.
    fn quality(&self, image: &ImageRef, preference: Preference) -> Result<f64>;
}

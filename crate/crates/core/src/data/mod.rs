//! Dataset ingestion, normalization, group-aware splits and task schedules.

mod desk;
mod manifest;
mod schedule;
mod split;

pub use desk::{make_desk_dataset, DeskSpec, SHAPES};
pub use manifest::{load_manifest, Dataset, DatasetManifest, Geometry, ManifestRow, NormStats};
pub use schedule::{build_schedule, ScheduleSpec, Task, TaskSchedule};
pub use split::{group_split, Split, SplitSpec};

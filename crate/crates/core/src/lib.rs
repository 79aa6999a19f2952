//! Caption curation for organismal images grounded in taxonomy and
//! encyclopedic text, plus a small dual-projector contrastive trainer.

pub mod caption;
pub mod contrastive;
pub mod eval;
pub mod gateway;
pub mod knowledge;
pub mod linalg;
pub mod parallel;
pub mod taxa;
pub mod wiki;

pub use caption::{CaptionFlag, CaptionRecord, GenerationContext, RunStats};
pub use contrastive::{LossConfig, ModelParams, SyntheticDataset, WorldModel};
pub use eval::{RelevanceSet, ScoreMatrix};
pub use knowledge::{FormatExampleSet, VisualDescription};
pub use linalg::{EmbeddingMatrix, Matrix};
pub use taxa::{CoverageReport, Rank, RankCoverage, Sample, TaxonRecord};
pub use wiki::{DescriptionCandidate, DescriptionSource, ParagraphRecord, RawPage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid quantizer range: min {min} must be < max {max}")]
    InvalidRange { min: f64, max: f64 },

    #[error("degenerate samples: zero variance ({n} samples)")]
    DegenerateSamples { n: usize },

    #[error("ADC resolution must be >= 1 bit, got {0}")]
    InvalidAdcBits(u32),

    #[error("layer {layer} has block fan-in {fanin} > array capacity {capacity} in SA_1BIT mode; reconstruct the network first")]
    UnsplitLayer {
        layer: usize,
        fanin: usize,
        capacity: usize,
    },

    #[error("frozen parameter group `{0}` cannot be unfrozen")]
    FrozenGroup(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("bad magic in {path} at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        offset: u64,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid record in {path}: {reason}")]
    InvalidRecord { path: String, reason: String },

    #[error("unsupported model format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("model file corrupt: {0}")]
    CorruptModel(String),

    #[error("experiment stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the experiment stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

use thiserror::Error;

/// Failure of one CLI run, reported as `error[<category>]: <message>`.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] ctn_core::Error),
}

impl CliError {
    /// Machine-readable category.
    pub fn category(&self) -> &'static str {
        use ctn_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Io { .. } => "io",
                E::Format { .. } | E::LabelValue { .. } => "format",
                E::Dataset(_) => "data",
                E::Shape(_) => "shape",
                E::NonFinite(_) => "numeric",
                E::Degenerate(_) => "metric",
            },
        }
    }

    /// Process exit status for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "format" => 5,
            "data" => 6,
            "shape" => 7,
            "numeric" => 8,
            "metric" => 9,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_distinct_codes() {
        let errs = [
            CliError::Usage("u".into()),
            CliError::Config("c".into()),
            CliError::Io("i".into()),
            CliError::Core(ctn_core::Error::Dataset("d".into())),
            CliError::Core(ctn_core::Error::Shape("s".into())),
            CliError::Core(ctn_core::Error::NonFinite("n".into())),
        ];
        let mut codes: Vec<i32> = errs.iter().map(CliError::exit_code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
        assert!(!codes.contains(&0));
    }
}

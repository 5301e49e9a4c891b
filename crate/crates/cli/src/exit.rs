use std::fmt;

use homlab::Error;

/// Process exit codes. These are part of the interface and do not change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Code {
    Ok = 0,
    Other = 1,
    Axiom = 2,
    MissingUpstream = 3,
    Property = 4,
    Usage = 64,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub message: String,
}

impl Failure {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Code::Usage, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(Code::MissingUpstream, message)
    }

    /// A stage ran but its output violates the named invariant.
    pub fn property(invariant: &str, detail: impl fmt::Display) -> Self {
        Self::new(Code::Property, format!("invariant `{invariant}` violated: {detail}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Resolution { .. } => Code::Usage,
            Error::SamplerStall { .. } => Code::Property,
            Error::NotPsd { .. } => Code::Property,
            _ => Code::Other,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(Code::Other, e.to_string())
    }
}

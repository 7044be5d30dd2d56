//! Dataset io.

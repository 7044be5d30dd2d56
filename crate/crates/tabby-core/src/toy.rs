//! Toy datasets.

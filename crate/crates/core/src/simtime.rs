//! Discrete-event timing model (placeholder).

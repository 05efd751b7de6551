//! Interactive browser demo bindings.

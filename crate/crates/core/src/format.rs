//! Byte-stable text formatting for exported tables.

/// Scientific notation with 17 significant digits, e.g. `1.0240000000000000e3`.
/// Round-trips every finite `f64` exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

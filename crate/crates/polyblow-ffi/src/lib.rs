//! C ABI surface; exports pending.

use std::fmt;
use std::sync::Arc;

use crate::data::Obs;

/// A vector-valued instrument function; writes its value into the buffer.
pub type InstrumentFn = Arc<dyn Fn(&Obs<'_>, &mut Vec<f64>) + Send + Sync>;

/// Instrument functions for the four bridge estimating equations.
///
/// Each output length must equal the dimension of the parameter it
/// identifies (exact identification); the fits check this.
#[derive(Clone)]
pub struct InstrumentBasis {
    /// `c1(z, m, a, x)` for `beta1`.
    pub c1: InstrumentFn,
    /// `c00(z, x)` for the `a = 0` arm of `beta0`.
    pub c00: InstrumentFn,
    /// `c01(z, x)` for the `a = 1` arm of `beta0`.
    pub c01: InstrumentFn,
    /// `d0(w, x)` for `gamma0`.
    pub d0: InstrumentFn,
    /// `d1(w, m, x)` for `gamma1`.
    pub d1: InstrumentFn,
}

impl fmt::Debug for InstrumentBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("InstrumentBasis { .. }")
    }
}

impl Default for InstrumentBasis {
    /// `c1 = (1, z, m, a, x)`, `c0a = (1, z, x)`, `d0 = (1, w, x)`,
    /// `d1 = (1, w, m, x)`.
    fn default() -> Self {
        let c0: InstrumentFn = Arc::new(|o, out| {
            out.clear();
            out.push(1.0);
            out.extend_from_slice(o.z);
            out.extend_from_slice(o.x);
        });
        Self {
            c1: Arc::new(|o, out| {
                out.clear();
                out.push(1.0);
                out.extend_from_slice(o.z);
                out.push(o.m);
                out.push(o.a);
                out.extend_from_slice(o.x);
            }),
            c00: c0.clone(),
            c01: c0,
            d0: Arc::new(|o, out| {
                out.clear();
                out.push(1.0);
                out.extend_from_slice(o.w);
                out.extend_from_slice(o.x);
            }),
            d1: Arc::new(|o, out| {
                out.clear();
                out.push(1.0);
                out.extend_from_slice(o.w);
                out.push(o.m);
                out.extend_from_slice(o.x);
            }),
        }
    }
}

//! stegokey: image steganography for multiple users on one shared network.
//!
//! The backbone behaves as an ordinary image purifier. Handing it a 64-bit
//! key deterministically fills the masked-out region of its weights and
//! switches it into a steganographic embedder or recoverer for that key.
//! Training drives mismatched-key recoveries toward the cover image so one
//! user's key cannot decode another user's payload.
//!
//! Modules follow the pipeline: [`keyed_weights`] owns masks and key fills,
//! [`backbone`] the network and task modes, [`training`] the four-term
//! objective and masked optimizer, [`evaluation`] metrics and leakage
//! protocols, [`data_io`] datasets and checkpoints.

pub mod backbone;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod keyed_weights;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

#[doc(hidden)]
pub mod bench {
    //! Internal benchmarking hooks; not a stable API.
    use ndarray::Array4;

    pub fn conv_spec(in_c: usize, out_c: usize, stride: usize) -> impl std::any::Any {
        crate::backbone::bench_spec(in_c, out_c, stride)
    }

    pub fn conv_forward(
        x: &Array4<f64>,
        k: &[f64],
        b: &[f64],
        spec: &dyn std::any::Any,
    ) -> Array4<f64> {
        crate::backbone::bench_forward(x, k, b, spec)
    }

    pub fn conv_backward(
        x: &Array4<f64>,
        k: &[f64],
        spec: &dyn std::any::Any,
        dy: &Array4<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        crate::backbone::bench_backward(x, k, spec, dy)
    }
}

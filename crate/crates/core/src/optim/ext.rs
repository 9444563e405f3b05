//! Payloads of custom tape operations. Each variant records what its
//! backward handler needs to scatter output adjoints into parameter
//! gradients.

use crate::envlight::Footprint;

#[derive(Clone, Debug, PartialEq)]
pub enum ExtOp {
    /// Raw (pre-activation) density at a world position. No inputs, 1 output.
    Density { p: [f64; 3] },
    /// Feature vector at a world position. No inputs, `feature_dim` outputs.
    Features { p: [f64; 3] },
    /// Smoothed finite-difference density gradient. No inputs, 3 outputs.
    NormalGradient { p: [f64; 3] },
    /// Decoder pre-activations. Inputs: features; 7 outputs.
    Decoder { x: Vec<f64> },
    /// Gain network output. Inputs: features; 3 outputs. `input` is the full
    /// network input (direction encodings then features).
    Gain { input: Vec<f64> },
    /// SH irradiance. Inputs: normal (3); 3 outputs.
    Irradiance { n: [f64; 3] },
    /// Orientation-free (band-0) irradiance. No inputs, 3 outputs.
    MeanIrradiance,
    /// Mean radiance over environment pixels. No inputs, 3 outputs.
    EnvMean { footprint: Footprint },
    /// Radiance of one environment pixel. No inputs, 3 outputs.
    EnvPixel { index: usize },
}

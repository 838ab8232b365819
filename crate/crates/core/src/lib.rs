//! Two-branch spatial audio coding for linear microphone arrays.
//!
//! The reference channel is coded with a sub-band residual vector quantizer,
//! while the remaining channels are carried as complex ratio filters that map
//! the reference spectrogram onto each of them. The crate also ships an
//! image-source room simulator for building test material and a metric suite
//! (spatial similarity over a superdirective beamspace, RTF error, MUSIC DoA
//! error, SNR and beamformed SNR).

pub mod codec;
pub mod linalg;
pub mod metrics;
pub mod quantizer;
pub mod roomsim;
pub mod signal;
pub mod spatial;
pub mod synth;
pub mod wav;

pub use signal::{istft, stft, AudioBuffer, SignalError, Spectrogram, WindowSpec};

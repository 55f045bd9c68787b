//! Emulation of CMSIS-NN inference loop structure and blind recovery of
//! network architectures from the resulting side-channel-like traces.
//!
//! * [`arch`]: architecture description, shape propagation, MAC counts.
//! * [`emulator`]: loop-nest walk to a timed event tree, and waveform rendering.
//! * [`trace`]: sampled traces and the `EMT1` container.
//! * [`signal`]: envelopes, spectrograms, segmentation and pattern counting.
//! * [`extraction`]: layer splitting, classification and hyper-parameter recovery.

pub mod arch;
pub mod emulator;
pub mod extraction;
pub mod grammar;
pub mod signal;
pub mod trace;

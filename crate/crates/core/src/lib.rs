//! Core of the remote acquisition toolkit: digests, chunk planning and
//! manifests, the wire format, the client and server session machines, the
//! timing model and a virtual-time simulator.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod bios;
pub mod digest;
pub mod model;
pub mod session;
pub mod sim;
pub mod timing;
pub mod window;
pub mod wire;

pub use digest::{DigestValue, HashAlgorithm};
pub use model::{ChunkManifest, DeviceDescriptor};
pub use wire::WireMessage;

//! Passthrough PCI device model and the backend interface it drives.

mod backend;
mod device;

pub use backend::{
    BackendError, DeviceBackend, DmaPerms, DmaRegion, IrqEvent, IrqKind, IrqMode,
};
pub use device::{DmaWindow, VpciDevice, VpciError};

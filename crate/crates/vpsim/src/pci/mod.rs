//! PCI protocol: transaction payload, socket pair with the backward
//! interrupt path, and the type-0 configuration space with MSI / MSI-X
//! capability structures.

mod config;
mod payload;

pub use config::{
    capability_walk, command, reg, status, BarDefinition, BarKind, ConfigError, ConfigSpace,
    ConfigSpaceBuilder, MsiCapability, MsiXTableEntry, MsixCapability, CAP_ID_MSI, CAP_ID_MSIX,
    CONFIG_SPACE_SIZE, MSIX_ENTRY_SIZE,
};
pub use payload::{
    LegacyPin, PciBackwardMessage, PciBackwardPath, PciBackwardSink, PciPayload, PciPayloadError,
    PciSpace, PciTarget,
};

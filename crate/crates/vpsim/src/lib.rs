//! A transaction-level virtual platform that attaches PCI(e) functions to a
//! simulated system — either a physical device passed through Linux VFIO, or
//! a fully simulated mock device — with deterministic virtual timing, DMA
//! address translation through an IOMMU, legacy/MSI/MSI-X interrupt
//! forwarding, and access tracing.

pub mod bridge;
pub mod harness;
pub mod mock;
pub mod msi;
pub mod pci;
pub mod ram;
pub mod sim;
pub mod trace;
pub mod vfio;
pub mod vpci;

//! Platform configuration: the address map, device backend selection, DMA
//! window, quantum and output paths for one scenario run.

use serde::Deserialize;

use crate::bridge::CFG_WINDOW_SIZE;
use crate::msi;
use crate::sim::SimTime;

/// Validation failure, carrying the path of the offending field.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{field}: {reason}")]
pub struct InvalidConfig {
    pub field: String,
    pub reason: String,
}

fn invalid(field: &str, reason: impl Into<String>) -> InvalidConfig {
    InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RamConfig {
    pub base: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PciHostConfig {
    pub cfg_base: u64,
    pub mmio_window_base: u64,
    pub mmio_window_size: u64,
    pub io_window_base: u64,
    pub io_window_size: u64,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MsiConfig {
    pub doorbell_base: u64,
    pub base_spi: u32,
    pub num_spis: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Vfio,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub sysfs_address: Option<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DmaWindowConfig {
    pub base: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformConfig {
    pub ram: RamConfig,
    pub pci_host: PciHostConfig,
    pub msi: MsiConfig,
    pub device: DeviceConfig,
    pub dma_window: DmaWindowConfig,
    pub quantum: SimTime,
    pub timeout: SimTime,
    pub trace_path: Option<String>,
    pub stats_path: Option<String>,
}

/// On-disk form: every field optional, falling back to the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformConfigFile {
    ram: Option<RamConfig>,
    pci_host: Option<PciHostConfig>,
    msi: Option<MsiConfig>,
    device: Option<DeviceConfig>,
    dma_window: Option<DmaWindowConfig>,
    quantum: Option<String>,
    timeout: Option<String>,
    trace_path: Option<String>,
    stats_path: Option<String>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            ram: RamConfig {
                base: 0x4000_0000,
                size: 256 << 20,
            },
            pci_host: PciHostConfig {
                cfg_base: 0x2000_0000,
                mmio_window_base: 0x1000_0000,
                mmio_window_size: 0x1000_0000,
                io_window_base: 0x3000_0000,
                io_window_size: 0x1_0000,
            },
            msi: MsiConfig {
                doorbell_base: 0x0800_0000,
                base_spi: 64,
                num_spis: 32,
            },
            device: DeviceConfig {
                backend: BackendKind::Mock,
                sysfs_address: None,
            },
            dma_window: DmaWindowConfig {
                base: 0x4000_0000,
                size: 256 << 20,
            },
            quantum: SimTime::from_us(1),
            timeout: SimTime::from_ms(10),
            trace_path: None,
            stats_path: None,
        }
    }
}

impl PlatformConfig {
    /// Parses the TOML config file format; missing sections keep their
    /// defaults.
    pub fn from_toml(text: &str) -> Result<Self, InvalidConfig> {
        let file: PlatformConfigFile =
            toml::from_str(text).map_err(|e| invalid("config", e.to_string()))?;
        let mut config = PlatformConfig::default();
        let ram_was_given = file.ram.is_some();
        if let Some(ram) = file.ram {
            config.ram = ram;
        }
        if let Some(pci_host) = file.pci_host {
            config.pci_host = pci_host;
        }
        if let Some(msi) = file.msi {
            config.msi = msi;
        }
        if let Some(device) = file.device {
            config.device = device;
        }
        if let Some(dma_window) = file.dma_window {
            config.dma_window = dma_window;
        } else if ram_was_given {
            // The window tracks the RAM region unless pinned explicitly.
            config.dma_window = DmaWindowConfig {
                base: config.ram.base,
                size: config.ram.size,
            };
        }
        if let Some(quantum) = file.quantum {
            config.quantum =
                SimTime::parse(&quantum).map_err(|e| invalid("quantum", e.to_string()))?;
        }
        if let Some(timeout) = file.timeout {
            config.timeout =
                SimTime::parse(&timeout).map_err(|e| invalid("timeout", e.to_string()))?;
        }
        config.trace_path = file.trace_path;
        config.stats_path = file.stats_path;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, InvalidConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("config", format!("cannot read {path:?}: {e}")))?;
        Self::from_toml(&text)
    }

    /// Address of the doorbell register the statistics fold classifies
    /// interrupt writes by.
    pub fn doorbell_setspi_address(&self) -> u64 {
        self.msi.doorbell_base + msi::SETSPI_OFFSET
    }

    pub fn stats_fold(&self) -> crate::trace::StatsFoldConfig {
        crate::trace::StatsFoldConfig {
            doorbell_setspi_address: self.doorbell_setspi_address(),
            base_spi: self.msi.base_spi,
            num_spis: self.msi.num_spis,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        if self.ram.size == 0 {
            return Err(invalid("ram.size", "must be nonzero"));
        }
        if self.msi.num_spis == 0 {
            return Err(invalid("msi.num_spis", "must be at least 1"));
        }
        if self.msi.base_spi >= 1 << 10 || self.msi.num_spis >= 1 << 10 {
            return Err(invalid("msi", "SPI range does not fit the TYPER encoding"));
        }
        if self.quantum.is_zero() {
            return Err(invalid("quantum", "must be a positive duration"));
        }
        if self.device.backend == BackendKind::Vfio && self.device.sysfs_address.is_none() {
            return Err(invalid(
                "device.sysfs_address",
                "required for the vfio backend",
            ));
        }

        let windows = [
            ("ram", self.ram.base, self.ram.size),
            ("pci_host.cfg", self.pci_host.cfg_base, CFG_WINDOW_SIZE),
            (
                "pci_host.mmio_window",
                self.pci_host.mmio_window_base,
                self.pci_host.mmio_window_size,
            ),
            (
                "pci_host.io_window",
                self.pci_host.io_window_base,
                self.pci_host.io_window_size,
            ),
            ("msi.doorbell", self.msi.doorbell_base, msi::REGION_SIZE),
        ];
        for (name, base, size) in &windows {
            if *size == 0 {
                return Err(invalid(name, "window must not be empty"));
            }
            if base.checked_add(size - 1).is_none() {
                return Err(invalid(name, "window wraps the address space"));
            }
        }
        for (i, (a_name, a_base, a_size)) in windows.iter().enumerate() {
            for (b_name, b_base, b_size) in windows.iter().skip(i + 1) {
                let disjoint = a_base + a_size <= *b_base || b_base + b_size <= *a_base;
                if !disjoint {
                    return Err(invalid(
                        a_name,
                        format!("window [{a_base:#x}, +{a_size:#x}) overlaps {b_name}"),
                    ));
                }
            }
        }

        let dma = &self.dma_window;
        if dma.size == 0 {
            return Err(invalid("dma_window.size", "must be nonzero"));
        }
        let inside_ram = dma.base >= self.ram.base
            && dma.size <= self.ram.size
            && dma.base - self.ram.base <= self.ram.size - dma.size;
        if !inside_ram {
            return Err(invalid(
                "dma_window",
                format!(
                    "[{:#x}, +{:#x}) must lie inside RAM [{:#x}, +{:#x})",
                    dma.base, dma.size, self.ram.base, self.ram.size
                ),
            ));
        }
        Ok(())
    }
}

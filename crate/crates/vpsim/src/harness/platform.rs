//! Platform assembly: system bus, RAM, PCI host bridge, MSI doorbell
//! controller and the passthrough device, wired per the configuration.

use std::rc::Rc;

use crate::bridge::{BridgeCfgPort, BridgeIoPort, BridgeMmioPort, HostBridge, HostDmaPath, CFG_WINDOW_SIZE};
use crate::mock::{MockBackend, MockHandle};
use crate::msi::{DoorbellConfig, MsiController, REGION_SIZE as MSI_REGION_SIZE};
use crate::pci::{LegacyPin, PciTarget};
use crate::ram::Ram;
use crate::sim::{Bus, BusTarget, GenericPayload, Kernel, Response, SimTime};
use crate::trace::{TraceSource, TraceSpace, Tracer};
use crate::vpci::{DeviceBackend, VpciDevice};

use super::config::{BackendKind, PlatformConfig};
use super::HarnessError;

pub struct Platform {
    pub config: PlatformConfig,
    pub kernel: Kernel,
    pub tracer: Tracer,
    pub bus: Rc<Bus>,
    pub ram: Rc<Ram>,
    pub bridge: Rc<HostBridge>,
    pub msi: Rc<MsiController>,
    pub device: Rc<VpciDevice>,
    /// Present for the mock backend: a window into the engine state.
    pub mock: Option<MockHandle>,
}

impl Platform {
    /// Builds and elaborates the platform. The config is validated first;
    /// field-path errors come back as [`HarnessError::Config`].
    pub fn build(config: &PlatformConfig) -> Result<Platform, HarnessError> {
        config.validate()?;
        let kernel = Kernel::new();
        let tracer = Tracer::enabled(kernel.clone());

        let bus = Rc::new(Bus::new());
        let ram = Rc::new(Ram::new(config.ram.base, config.ram.size));
        let msi = Rc::new(MsiController::new(
            DoorbellConfig {
                base_address: config.msi.doorbell_base,
                base_spi: config.msi.base_spi,
                num_spis: config.msi.num_spis,
            },
            tracer.clone(),
        ));
        let bridge = HostBridge::new(config.pci_host.cfg_base, tracer.clone());

        bus.map(
            "ram",
            config.ram.base,
            config.ram.size,
            Rc::clone(&ram) as Rc<dyn BusTarget>,
        );
        bus.map(
            "msi",
            config.msi.doorbell_base,
            MSI_REGION_SIZE,
            Rc::clone(&msi) as Rc<dyn BusTarget>,
        );
        bus.map(
            "pci_cfg",
            config.pci_host.cfg_base,
            CFG_WINDOW_SIZE,
            Rc::new(BridgeCfgPort(Rc::clone(&bridge))) as Rc<dyn BusTarget>,
        );
        bus.map(
            "pci_mmio",
            config.pci_host.mmio_window_base,
            config.pci_host.mmio_window_size,
            Rc::new(BridgeMmioPort(Rc::clone(&bridge))) as Rc<dyn BusTarget>,
        );
        bus.map(
            "pci_io",
            config.pci_host.io_window_base,
            config.pci_host.io_window_size,
            Rc::new(BridgeIoPort(Rc::clone(&bridge))) as Rc<dyn BusTarget>,
        );
        bridge.bind_dma(&(Rc::clone(&bus) as Rc<dyn BusTarget>));

        let (backend, mock): (Box<dyn DeviceBackend>, Option<MockHandle>) =
            match config.device.backend {
                BackendKind::Mock => {
                    let backend = MockBackend::new(kernel.clone());
                    let handle = backend.handle();
                    (Box::new(backend), Some(handle))
                }
                BackendKind::Vfio => {
                    let address = config
                        .device
                        .sysfs_address
                        .as_deref()
                        .expect("validated above");
                    (crate::vfio::open_backend(address)?, None)
                }
            };

        let device = VpciDevice::open("vpci0", kernel.clone(), backend, tracer.clone())?;
        let backward = bridge.bind_device(
            0,
            Rc::clone(&device) as Rc<dyn PciTarget>,
            device.region_layout(),
        );
        device.connect(Rc::clone(&bridge) as Rc<dyn HostDmaPath>, backward);
        device.start_quantum_pump(config.quantum);

        // Legacy pin transitions become trace records.
        for pin in LegacyPin::ALL {
            let tracer = tracer.clone();
            bridge
                .intx_line(pin)
                .observe(move |_, level| tracer.irq(pin.index(), level));
        }

        Ok(Platform {
            config: config.clone(),
            kernel,
            tracer,
            bus,
            ram,
            bridge,
            msi,
            device,
            mock,
        })
    }

    /// The scripted driver's bus master: traced, synchronizing accesses.
    pub fn cpu(&self) -> CpuPort {
        CpuPort {
            bus: Rc::clone(&self.bus),
            kernel: self.kernel.clone(),
            tracer: self.tracer.clone(),
            config: self.config.clone(),
        }
    }
}

/// A bus access that completed with an error response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("bus access at {address:#x} failed: {response:?}")]
pub struct AccessError {
    pub address: u64,
    pub response: Response,
}

/// CPU-side initiator used by the scripted driver. Every access is traced
/// (classified by the address map) and synchronizes the kernel by the
/// accumulated transport delay.
pub struct CpuPort {
    bus: Rc<Bus>,
    kernel: Kernel,
    tracer: Tracer,
    config: PlatformConfig,
}

impl CpuPort {
    fn classify(&self, address: u64) -> TraceSpace {
        let host = &self.config.pci_host;
        let within = |base: u64, size: u64| address >= base && address - base < size;
        if within(host.cfg_base, CFG_WINDOW_SIZE) {
            TraceSpace::Cfg
        } else if within(host.mmio_window_base, host.mmio_window_size) {
            TraceSpace::Mmio
        } else if within(host.io_window_base, host.io_window_size) {
            TraceSpace::Io
        } else {
            TraceSpace::Bus
        }
    }

    fn transport(&self, txn: &mut GenericPayload) -> Result<(), AccessError> {
        let mut delay = SimTime::ZERO;
        self.bus.transport(txn, &mut delay);
        self.tracer.access(
            TraceSource::Cpu,
            self.classify(txn.address),
            txn.address,
            txn.direction,
            txn.data(),
        );
        if !delay.is_zero() {
            self.kernel.run_until(self.kernel.now() + delay);
        }
        match txn.response() {
            Response::Ok => Ok(()),
            response => Err(AccessError {
                address: txn.address,
                response,
            }),
        }
    }

    pub fn read(&self, address: u64, len: usize) -> Result<Vec<u8>, AccessError> {
        let mut txn = GenericPayload::read(address, len);
        self.transport(&mut txn)?;
        Ok(txn.data().to_vec())
    }

    pub fn write(&self, address: u64, data: &[u8]) -> Result<(), AccessError> {
        let mut txn = GenericPayload::write(address, data);
        self.transport(&mut txn)
    }

    pub fn read_u32(&self, address: u64) -> Result<u32, AccessError> {
        Ok(u32::from_le_bytes(
            self.read(address, 4)?.try_into().unwrap(),
        ))
    }

    pub fn write_u32(&self, address: u64, value: u32) -> Result<(), AccessError> {
        self.write(address, &value.to_le_bytes())
    }

    pub fn read_u16(&self, address: u64) -> Result<u16, AccessError> {
        Ok(u16::from_le_bytes(
            self.read(address, 2)?.try_into().unwrap(),
        ))
    }

    pub fn write_u16(&self, address: u64, value: u16) -> Result<(), AccessError> {
        self.write(address, &value.to_le_bytes())
    }

    pub fn read_u8(&self, address: u64) -> Result<u8, AccessError> {
        Ok(self.read(address, 1)?[0])
    }

    /// Advances virtual time by `step`, firing due events.
    pub fn advance(&self, step: SimTime) {
        self.kernel.run_until(self.kernel.now() + step);
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }
}

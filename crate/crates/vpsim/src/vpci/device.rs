//! The passthrough PCI device model.
//!
//! Routes PCI transactions to a pluggable backend, serves the virtualized
//! config fields (BARs, command gating bits, MSI address/data, MSI-X
//! enable/mask) from local shadow state so the guest-programmed values and
//! the device-held values can differ, programs the (real or simulated)
//! IOMMU from a DMI grant, and converts backend interrupt events into
//! legacy backward messages or MSI/MSI-X doorbell writes.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::bridge::HostDmaPath;
use crate::pci::{
    reg, BarDefinition, ConfigError, ConfigSpace, MsiCapability, MsiXTableEntry, MsixCapability,
    PciBackwardMessage, PciBackwardPath, PciPayload, PciSpace, PciTarget, CONFIG_SPACE_SIZE,
    MSIX_ENTRY_SIZE,
};
use crate::sim::{Direction, Kernel, Response, SimTime};
use crate::trace::{Tracer, WarnKind};

use super::backend::{BackendError, DeviceBackend, DmaPerms, DmaRegion, IrqEvent, IrqKind, IrqMode};

/// Guest-physical range the device may reach with DMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaWindow {
    pub guest_base: u64,
    pub size: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum VpciError {
    #[error("cannot read the backend config image: {0}")]
    Open(#[source] BackendError),
    #[error("backend config image is malformed: {0}")]
    Config(#[from] ConfigError),
    #[error("device not connected to a host bridge")]
    NotConnected,
    #[error("DMI grant denied for DMA window {base:#x}+{size:#x}: {detail}")]
    DmiDenied { base: u64, size: u64, detail: String },
    #[error("IOMMU programming failed: {0}")]
    DmaMap(#[source] BackendError),
    #[error("interrupt setup failed: {0}")]
    IrqSetup(#[source] BackendError),
}

struct MsixState {
    cap: MsixCapability,
    table_size: u16,
    table_bar: u8,
    table_offset: u64,
    pba_bar: u8,
    pba_offset: u64,
    pba_bytes: u64,
    /// Shadow pending bits — one per vector, set while an event arrives
    /// masked, cleared by the unmask replay.
    pending: Vec<bool>,
}

struct VpciState {
    backend: Box<dyn DeviceBackend>,
    shadow: ConfigSpace,
    virtualized: Vec<Range<usize>>,
    regions: Vec<BarDefinition>,
    msi: Option<MsiCapability>,
    msix: Option<MsixState>,
    irq_mode: IrqMode,
    backward: Option<PciBackwardPath>,
    dma_path: Option<Rc<dyn HostDmaPath>>,
    dmi: Option<crate::sim::DmiDescriptor>,
    window: Option<DmaWindow>,
    injected_events: u64,
    dropped_events: u64,
    event_log: Vec<IrqEvent>,
}

/// What one polled interrupt turns into, decided under the state borrow and
/// executed outside it.
enum IrqAction {
    Backward(PciBackwardMessage),
    DoorbellWrite { address: u64, data: u32 },
    None,
}

pub struct VpciDevice {
    name: String,
    kernel: Kernel,
    tracer: Tracer,
    state: RefCell<VpciState>,
}

impl VpciDevice {
    /// Opens the backend: snapshots its config image into the shadow,
    /// attaches BAR semantics from the region info, and locates the MSI and
    /// MSI-X capabilities.
    pub fn open(
        name: impl Into<String>,
        kernel: Kernel,
        mut backend: Box<dyn DeviceBackend>,
        tracer: Tracer,
    ) -> Result<Rc<Self>, VpciError> {
        let mut raw = [0u8; CONFIG_SPACE_SIZE];
        backend.config_read(0, &mut raw).map_err(VpciError::Open)?;
        let mut shadow = ConfigSpace::from_raw(raw)?;

        // The guest starts from a reset view regardless of what the host
        // left enabled: decode disabled, interrupts disabled.
        let cmd = shadow.command() & !crate::pci::command::WRITABLE;
        shadow.set_command(cmd);

        let regions = backend.region_info();
        for def in &regions {
            shadow.attach_bar(*def);
        }

        let msi = MsiCapability::locate(&shadow)?;
        let msix_cap = MsixCapability::locate(&shadow)?;
        if let Some(msi) = &msi {
            // Clear a host-enabled MSI in the guest view.
            let ctrl = shadow.read(msi.offset as usize + 2, 2)? & !0x1;
            shadow.overwrite(msi.offset as usize + 2, 2, ctrl);
        }
        if let Some(cap) = &msix_cap {
            let ctrl = shadow.read(cap.offset as usize + 2, 2)? & !0xC000;
            shadow.overwrite(cap.offset as usize + 2, 2, ctrl);
        }

        let mut virtualized = vec![reg::COMMAND..reg::STATUS, reg::BAR0..reg::BAR_END];
        if let Some(msi) = &msi {
            virtualized.push(msi.virtualized_range());
        }
        let msix = match msix_cap {
            Some(cap) => {
                virtualized.push(cap.virtualized_range());
                let table_size = cap.table_size(&shadow);
                Some(MsixState {
                    cap,
                    table_size,
                    table_bar: cap.table_bar(&shadow),
                    table_offset: cap.table_offset(&shadow),
                    pba_bar: cap.pba_bar(&shadow),
                    pba_offset: cap.pba_offset(&shadow),
                    pba_bytes: (table_size as u64).div_ceil(64) * 8,
                    pending: vec![false; table_size as usize],
                })
            }
            None => None,
        };

        // Default delivery is the legacy pin, when the function has one.
        // Some hardware advertises a pin without INTx support; that is not
        // fatal as long as the guest later switches to MSI or MSI-X.
        let irq_mode = IrqMode::Legacy;
        if shadow.interrupt_pin().is_some() {
            if let Err(err) = backend.irq_setup(irq_mode) {
                log::warn!("legacy interrupt setup unavailable: {err}");
            }
        }

        Ok(Rc::new(VpciDevice {
            name: name.into(),
            kernel,
            tracer,
            state: RefCell::new(VpciState {
                backend,
                shadow,
                virtualized,
                regions,
                msi,
                msix,
                irq_mode,
                backward: None,
                dma_path: None,
                dmi: None,
                window: None,
                injected_events: 0,
                dropped_events: 0,
                event_log: Vec::new(),
            }),
        }))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Elaboration wiring: the host bridge's DMA/DMI path and the backward
    /// interrupt path of the PCI socket pair.
    pub fn connect(&self, dma_path: Rc<dyn HostDmaPath>, backward: PciBackwardPath) {
        let mut state = self.state.borrow_mut();
        state.dma_path = Some(dma_path);
        state.backward = Some(backward);
    }

    /// BAR sizes and kinds, for the host bridge's decode table.
    pub fn region_layout(&self) -> Vec<BarDefinition> {
        self.state.borrow().regions.clone()
    }

    /// Requests a DMI pointer for the window and programs the IOMMU with
    /// the granted host buffer, making guest-physical addresses inside the
    /// window directly reachable for the device.
    pub fn setup_dma_window(&self, window: DmaWindow) -> Result<(), VpciError> {
        let denial = |detail: &str| VpciError::DmiDenied {
            base: window.guest_base,
            size: window.size,
            detail: detail.to_string(),
        };
        if window.size == 0 {
            return Err(denial("window is empty"));
        }
        let dma_path = self
            .state
            .borrow()
            .dma_path
            .clone()
            .ok_or(VpciError::NotConnected)?;
        let dmi = dma_path
            .dmi_request(window.guest_base)
            .ok_or_else(|| denial("target did not grant direct access"))?;
        if !dmi.contains_range(window.guest_base, window.size) {
            return Err(denial("grant does not cover the window"));
        }
        let region = DmaRegion {
            buffer: dmi.buffer().clone(),
            offset: dmi.offset_of(window.guest_base),
            len: window.size as usize,
        };
        let mut state = self.state.borrow_mut();
        state
            .backend
            .map_dma(window.guest_base, region, DmaPerms::RW)
            .map_err(VpciError::DmaMap)?;
        state.dmi = Some(dmi);
        state.window = Some(window);
        Ok(())
    }

    /// Re-arms itself every `period` of virtual time to drain backend
    /// interrupts; bounded interrupt latency without sacrificing
    /// determinism.
    pub fn start_quantum_pump(self: &Rc<Self>, period: SimTime) {
        assert!(!period.is_zero(), "a zero quantum would starve the kernel");
        self.arm_pump(period);
    }

    fn arm_pump(self: &Rc<Self>, period: SimTime) {
        let weak = Rc::downgrade(self);
        // Scheduling fails only after the simulation finished, which simply
        // stops the pump.
        let _ = self.kernel.schedule(period, move || {
            if let Some(device) = weak.upgrade() {
                device.pump_interrupts();
                device.arm_pump(period);
            }
        });
    }

    pub fn injected_events(&self) -> u64 {
        self.state.borrow().injected_events
    }

    pub fn dropped_events(&self) -> u64 {
        self.state.borrow().dropped_events
    }

    pub fn event_log(&self) -> Vec<IrqEvent> {
        self.state.borrow().event_log.clone()
    }

    /// Shadow pending bit of an MSI-X vector.
    pub fn pending(&self, vector: u16) -> bool {
        self.state
            .borrow()
            .msix
            .as_ref()
            .is_some_and(|msix| msix.pending.get(vector as usize).copied().unwrap_or(false))
    }

    /// Drains backend interrupts and converts each into exactly one
    /// observable action: a legacy backward message, a doorbell write, or a
    /// pending-bit set. Returns the number of injected events.
    pub fn pump_interrupts(&self) -> usize {
        let (actions, count) = {
            let mut state = self.state.borrow_mut();
            let kinds = state.backend.poll_irqs();
            let count = kinds.len();
            let now = self.kernel.now();
            let mut actions = Vec::with_capacity(count);
            for kind in kinds {
                state.injected_events += 1;
                state.event_log.push(IrqEvent { kind, time: now });
                actions.push(self.plan_action(&mut state, kind));
            }
            (actions, count)
        };
        for action in actions {
            self.execute(action);
        }
        count
    }

    fn plan_action(&self, state: &mut VpciState, kind: IrqKind) -> IrqAction {
        match kind {
            IrqKind::Legacy { level } => match state.shadow.interrupt_pin() {
                Some(pin) => IrqAction::Backward(PciBackwardMessage::LegacyIrq { pin, level }),
                None => {
                    state.dropped_events += 1;
                    self.tracer.warning(WarnKind::MissingPin);
                    IrqAction::None
                }
            },
            IrqKind::Msi => {
                let enabled = state
                    .msi
                    .as_ref()
                    .is_some_and(|msi| msi.enabled(&state.shadow));
                match (enabled, &state.msi) {
                    (true, Some(msi)) => IrqAction::DoorbellWrite {
                        address: msi.message_address(&state.shadow),
                        data: msi.message_data(&state.shadow) as u32,
                    },
                    _ => {
                        state.dropped_events += 1;
                        self.tracer.warning(WarnKind::DroppedIrq);
                        IrqAction::None
                    }
                }
            }
            IrqKind::Msix { vector } => self.plan_msix(state, vector),
        }
    }

    fn plan_msix(&self, state: &mut VpciState, vector: u16) -> IrqAction {
        let Some(msix) = &state.msix else {
            state.dropped_events += 1;
            self.tracer.warning(WarnKind::DroppedIrq);
            return IrqAction::None;
        };
        if !msix.cap.enabled(&state.shadow) || vector >= msix.table_size {
            state.dropped_events += 1;
            self.tracer.warning(WarnKind::DroppedIrq);
            return IrqAction::None;
        }
        let function_masked = msix.cap.function_masked(&state.shadow);
        let (table_bar, entry_offset) = (
            msix.table_bar,
            msix.table_offset + vector as u64 * MSIX_ENTRY_SIZE as u64,
        );
        // Entries are read through the backend region path on every event:
        // the guest may reprogram the table at any time.
        let mut bytes = [0u8; MSIX_ENTRY_SIZE];
        let response =
            state
                .backend
                .region_access(table_bar, entry_offset, Direction::Read, &mut bytes);
        if !response.is_ok() {
            state.dropped_events += 1;
            self.tracer.warning(WarnKind::DroppedIrq);
            return IrqAction::None;
        }
        let entry = MsiXTableEntry::from_bytes(&bytes);
        if function_masked || entry.masked {
            let msix = state.msix.as_mut().unwrap();
            msix.pending[vector as usize] = true;
            IrqAction::None
        } else {
            IrqAction::DoorbellWrite {
                address: entry.message_address,
                data: entry.message_data,
            }
        }
    }

    fn execute(&self, action: IrqAction) {
        match action {
            IrqAction::Backward(msg) => {
                let backward = self.state.borrow().backward.clone();
                if let Some(backward) = backward {
                    backward.send(msg);
                }
            }
            IrqAction::DoorbellWrite { address, data } => {
                let dma_path = self.state.borrow().dma_path.clone();
                if let Some(dma_path) = dma_path {
                    let response = dma_path.dma_write(address, &data.to_le_bytes());
                    if !response.is_ok() {
                        // A misprogrammed message address is a guest bug,
                        // not a platform failure.
                        log::warn!(
                            "{}: interrupt write to {address:#x} failed: {response:?}",
                            self.name
                        );
                    }
                }
            }
            IrqAction::None => {}
        }
    }

    /// Replays a pending vector after it was unmasked: exactly one doorbell
    /// write, then the pending bit clears. Returns whether a write was
    /// issued.
    pub fn unmask_replay(&self, vector: u16) -> bool {
        let action = {
            let mut state = self.state.borrow_mut();
            let Some(msix) = &state.msix else { return false };
            if !msix.cap.enabled(&state.shadow)
                || msix.cap.function_masked(&state.shadow)
                || vector >= msix.table_size
                || !msix.pending[vector as usize]
            {
                return false;
            }
            let (table_bar, entry_offset) = (
                msix.table_bar,
                msix.table_offset + vector as u64 * MSIX_ENTRY_SIZE as u64,
            );
            let mut bytes = [0u8; MSIX_ENTRY_SIZE];
            let response =
                state
                    .backend
                    .region_access(table_bar, entry_offset, Direction::Read, &mut bytes);
            if !response.is_ok() {
                return false;
            }
            let entry = MsiXTableEntry::from_bytes(&bytes);
            if entry.masked {
                return false;
            }
            state.msix.as_mut().unwrap().pending[vector as usize] = false;
            IrqAction::DoorbellWrite {
                address: entry.message_address,
                data: entry.message_data,
            }
        };
        self.execute(action);
        true
    }

    fn config_access(&self, txn: &mut PciPayload) {
        let offset = txn.address as usize;
        let len = txn.len();
        if offset + len > CONFIG_SPACE_SIZE {
            txn.set_response(Response::AddressError);
            return;
        }
        match txn.direction {
            Direction::Read => {
                let mut state = self.state.borrow_mut();
                let mut backend_bytes = vec![0u8; len];
                if state
                    .backend
                    .config_read(offset as u64, &mut backend_bytes)
                    .is_err()
                {
                    txn.set_response(Response::AddressError);
                    return;
                }
                let mut shadow_bytes = vec![0u8; len];
                state
                    .shadow
                    .read_bytes(offset, &mut shadow_bytes)
                    .expect("range checked above");
                for i in 0..len {
                    let o = offset + i;
                    let virtualized = state.virtualized.iter().any(|r| r.contains(&o));
                    txn.data_mut()[i] = if virtualized {
                        shadow_bytes[i]
                    } else {
                        backend_bytes[i]
                    };
                }
                txn.set_response(Response::Ok);
            }
            Direction::Write => {
                let data = txn.data().to_vec();
                let result = self.config_write(offset, &data);
                txn.set_response(match result {
                    Ok(()) => Response::Ok,
                    Err(_) => Response::AddressError,
                });
            }
        }
    }

    fn config_write(&self, offset: usize, data: &[u8]) -> Result<(), BackendError> {
        let mut state = self.state.borrow_mut();
        // Split the span into runs by destination, so multi-byte writes keep
        // their store semantics (BAR sizing needs the whole dword at once).
        let mut i = 0;
        while i < data.len() {
            let o = offset + i;
            let virtualized = state.virtualized.iter().any(|r| r.contains(&o));
            let mut j = i + 1;
            while j < data.len() {
                let oj = offset + j;
                if state.virtualized.iter().any(|r| r.contains(&oj)) != virtualized {
                    break;
                }
                j += 1;
            }
            if virtualized {
                let _ = state.shadow.write_bytes(o, &data[i..j]);
            } else {
                state.backend.config_write(o as u64, &data[i..j])?;
            }
            i = j;
        }

        // React to interrupt-control changes.
        let msi_ctrl_touched = state.msi.as_ref().is_some_and(|msi| {
            ranges_overlap(offset, data.len(), msi.offset as usize + 2, 2)
        });
        let msix_ctrl_touched = state.msix.as_ref().is_some_and(|msix| {
            ranges_overlap(offset, data.len(), msix.cap.offset as usize + 2, 2)
        });
        if msi_ctrl_touched || msix_ctrl_touched {
            self.update_irq_mode(&mut state);
        }
        drop(state);
        if msix_ctrl_touched {
            self.replay_all_pending();
        }
        Ok(())
    }

    /// Picks the backend interrupt mode from the guest's shadow view:
    /// MSI-X when enabled, else MSI when enabled, else legacy.
    fn update_irq_mode(&self, state: &mut VpciState) {
        let msix_enabled = state
            .msix
            .as_ref()
            .is_some_and(|m| m.cap.enabled(&state.shadow));
        let msi_enabled = state
            .msi
            .as_ref()
            .is_some_and(|m| m.enabled(&state.shadow));
        let desired = if msix_enabled {
            IrqMode::Msix {
                vectors: state.msix.as_ref().unwrap().table_size,
            }
        } else if msi_enabled {
            IrqMode::Msi
        } else {
            IrqMode::Legacy
        };
        if desired != state.irq_mode {
            match state.backend.irq_setup(desired) {
                Ok(()) => state.irq_mode = desired,
                Err(err) => {
                    log::warn!("{}: interrupt mode change failed: {err}", self.name);
                    self.tracer.warning(WarnKind::DroppedIrq);
                }
            }
        }
    }

    fn replay_all_pending(&self) {
        let vectors: Vec<u16> = {
            let state = self.state.borrow();
            match &state.msix {
                Some(msix) => (0..msix.table_size)
                    .filter(|&v| msix.pending[v as usize])
                    .collect(),
                None => return,
            }
        };
        for vector in vectors {
            self.unmask_replay(vector);
        }
    }

    fn region_access(&self, txn: &mut PciPayload) {
        let Some(bar) = txn.bar else {
            txn.set_response(Response::AddressError);
            return;
        };
        let offset = txn.address;
        let len = txn.len();
        {
            let state = self.state.borrow();
            let Some(def) = state.regions.iter().find(|d| d.index == bar) else {
                txn.set_response(Response::AddressError);
                return;
            };
            if offset >= def.size || len as u64 > def.size - offset {
                txn.set_response(Response::AddressError);
                return;
            }
        }

        let response = {
            let mut state = self.state.borrow_mut();
            let direction = txn.direction;
            let response = state
                .backend
                .region_access(bar, offset, direction, txn.data_mut());
            if response.is_ok() && direction == Direction::Read {
                overlay_pending_bits(&state, bar, offset, txn.data_mut());
            }
            response
        };
        txn.set_response(response);

        if txn.direction == Direction::Write && response.is_ok() {
            self.after_region_write(bar, offset, len as u64);
            // Device MMIO writes are an interrupt sync point.
            self.pump_interrupts();
        }
    }

    /// A write into the MSI-X table may have unmasked a pending vector.
    fn after_region_write(&self, bar: u8, offset: u64, len: u64) {
        let vectors: Vec<u16> = {
            let state = self.state.borrow();
            let Some(msix) = &state.msix else { return };
            if bar != msix.table_bar {
                return;
            }
            (0..msix.table_size)
                .filter(|&v| {
                    let control_offset = msix.table_offset + v as u64 * MSIX_ENTRY_SIZE as u64 + 12;
                    ranges_overlap(offset as usize, len as usize, control_offset as usize, 4)
                        && msix.pending[v as usize]
                })
                .collect()
        };
        for vector in vectors {
            self.unmask_replay(vector);
        }
    }
}

/// ORs the shadow pending bits into guest reads of the PBA region.
fn overlay_pending_bits(state: &VpciState, bar: u8, offset: u64, data: &mut [u8]) {
    let Some(msix) = &state.msix else { return };
    if bar != msix.pba_bar {
        return;
    }
    for (i, byte) in data.iter_mut().enumerate() {
        let o = offset + i as u64;
        if o >= msix.pba_offset && o < msix.pba_offset + msix.pba_bytes {
            let bit_base = (o - msix.pba_offset) * 8;
            for bit in 0..8u64 {
                let vector = (bit_base + bit) as usize;
                if vector < msix.pending.len() && msix.pending[vector] {
                    *byte |= 1 << bit;
                }
            }
        }
    }
}

fn ranges_overlap(a_start: usize, a_len: usize, b_start: usize, b_len: usize) -> bool {
    a_start < b_start + b_len && b_start < a_start + a_len
}

impl PciTarget for VpciDevice {
    fn pci_transport(&self, txn: &mut PciPayload) {
        match txn.space() {
            PciSpace::Config => self.config_access(txn),
            PciSpace::Mem | PciSpace::Io => self.region_access(txn),
        }
    }
}

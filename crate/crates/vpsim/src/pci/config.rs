//! Type-0 PCI configuration space: 256 raw bytes plus the register semantics
//! the framework needs — read-only fields, command-register write masks, BAR
//! sizing behavior, and the MSI / MSI-X capability structures.
//!
//! The byte layout matches the PCI Local Bus type-0 header bit-exactly, so a
//! config image read from a physical device parses without translation.

use super::payload::LegacyPin;

pub const CONFIG_SPACE_SIZE: usize = 256;
pub const MSIX_ENTRY_SIZE: usize = 16;

pub const CAP_ID_MSI: u8 = 0x05;
pub const CAP_ID_MSIX: u8 = 0x11;

/// Standard register offsets of the type-0 header.
pub mod reg {
    pub const VENDOR_ID: usize = 0x00;
    pub const DEVICE_ID: usize = 0x02;
    pub const COMMAND: usize = 0x04;
    pub const STATUS: usize = 0x06;
    pub const REVISION: usize = 0x08;
    pub const CACHE_LINE_SIZE: usize = 0x0C;
    pub const LATENCY_TIMER: usize = 0x0D;
    pub const HEADER_TYPE: usize = 0x0E;
    pub const BAR0: usize = 0x10;
    pub const BAR_END: usize = 0x28;
    pub const CAPABILITIES_POINTER: usize = 0x34;
    pub const INTERRUPT_LINE: usize = 0x3C;
    pub const INTERRUPT_PIN: usize = 0x3D;
}

/// Command-register bits.
pub mod command {
    pub const IO_ENABLE: u16 = 1 << 0;
    pub const MEM_ENABLE: u16 = 1 << 1;
    pub const BUS_MASTER: u16 = 1 << 2;
    pub const WRITABLE: u16 = IO_ENABLE | MEM_ENABLE | BUS_MASTER;
}

/// Status-register bits.
pub mod status {
    pub const CAPABILITIES: u16 = 1 << 4;
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ConfigError {
    #[error("config access at {offset:#x}+{len} exceeds the 256-byte space")]
    OutOfRange { offset: usize, len: usize },
    #[error("malformed capability chain: pointer {pointer:#x} revisited or out of range")]
    MalformedCapabilityChain { pointer: u8 },
}

/// Region type advertised by a BAR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarKind {
    Mem32,
    Mem64,
    Io,
}

/// Size, type and placement state of one base address register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarDefinition {
    pub index: u8,
    pub size: u64,
    pub kind: BarKind,
    pub prefetchable: bool,
}

impl BarDefinition {
    pub fn mem32(index: u8, size: u64) -> Self {
        BarDefinition {
            index,
            size,
            kind: BarKind::Mem32,
            prefetchable: false,
        }
    }

    pub fn mem64(index: u8, size: u64) -> Self {
        BarDefinition {
            index,
            size,
            kind: BarKind::Mem64,
            prefetchable: false,
        }
    }

    pub fn io(index: u8, size: u64) -> Self {
        BarDefinition {
            index,
            size,
            kind: BarKind::Io,
            prefetchable: false,
        }
    }

    fn validate(&self) {
        assert!(self.index < 6, "BAR index out of range");
        assert!(
            self.size.is_power_of_two() && self.size >= 16,
            "BAR size must be a power of two >= 16"
        );
        if matches!(self.kind, BarKind::Mem32 | BarKind::Io) {
            assert!(self.size <= 1 << 32, "32-bit BAR larger than 4 GiB");
        }
        if self.kind == BarKind::Io {
            assert!(!self.prefetchable, "IO BARs cannot be prefetchable");
        }
    }

    /// The low read-only type bits of the register.
    pub fn type_bits(&self) -> u32 {
        match self.kind {
            BarKind::Io => 0x1,
            BarKind::Mem32 => (self.prefetchable as u32) << 3,
            BarKind::Mem64 => 0x4 | ((self.prefetchable as u32) << 3),
        }
    }

    fn slots(&self) -> usize {
        if self.kind == BarKind::Mem64 {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BarState {
    def: BarDefinition,
    base: u64,
    written: bool,
}

#[derive(Debug, Clone, Copy)]
enum BarSlot {
    Empty,
    Bar(BarState),
    /// Upper dword of the 64-bit BAR in slot `.0`.
    High(usize),
}

/// 256-byte type-0 configuration space with register semantics.
#[derive(Clone)]
pub struct ConfigSpace {
    raw: [u8; CONFIG_SPACE_SIZE],
    write_mask: [u8; CONFIG_SPACE_SIZE],
    bars: [BarSlot; 6],
}

impl ConfigSpace {
    /// Wraps a raw 256-byte image (e.g. read from a physical device).
    ///
    /// The standard writable fields (command, interrupt line, MSI / MSI-X
    /// control per the image's capability chain) get their usual write
    /// masks; everything else is read-only. BARs gain sizing semantics once
    /// attached via [`ConfigSpace::attach_bar`].
    pub fn from_raw(raw: [u8; CONFIG_SPACE_SIZE]) -> Result<Self, ConfigError> {
        let mut cfg = ConfigSpace {
            raw,
            write_mask: [0; CONFIG_SPACE_SIZE],
            bars: [BarSlot::Empty; 6],
        };
        cfg.apply_standard_write_masks()?;
        Ok(cfg)
    }

    fn apply_standard_write_masks(&mut self) -> Result<(), ConfigError> {
        self.write_mask[reg::COMMAND] = command::WRITABLE as u8;
        self.write_mask[reg::CACHE_LINE_SIZE] = 0xFF;
        self.write_mask[reg::LATENCY_TIMER] = 0xFF;
        self.write_mask[reg::INTERRUPT_LINE] = 0xFF;
        for (id, offset) in capability_walk(self)? {
            let offset = offset as usize;
            match id {
                CAP_ID_MSI => {
                    // Enable bit, message address (dword-aligned) and data.
                    self.write_mask[offset + 2] = 0x01;
                    let is_64bit = self.raw[offset + 2] & 0x80 != 0;
                    let addr_len = if is_64bit { 8 } else { 4 };
                    self.write_mask[offset + 4] = 0xFC;
                    for i in 1..addr_len {
                        self.write_mask[offset + 4 + i] = 0xFF;
                    }
                    self.write_mask[offset + 4 + addr_len] = 0xFF;
                    self.write_mask[offset + 5 + addr_len] = 0xFF;
                }
                CAP_ID_MSIX => {
                    // MSI-X enable and function mask live in the control
                    // high byte; table size and locators are read-only.
                    self.write_mask[offset + 3] = 0xC0;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Gives slot `def.index` (and, for 64-bit BARs, the following slot)
    /// sizing and base-programming semantics.
    pub fn attach_bar(&mut self, def: BarDefinition) {
        def.validate();
        let index = def.index as usize;
        assert!(
            index + def.slots() <= 6,
            "64-bit BAR in slot 5 has no room for its upper half"
        );
        for s in 0..def.slots() {
            assert!(
                matches!(self.bars[index + s], BarSlot::Empty),
                "BAR slot {} is already in use",
                index + s
            );
        }
        self.bars[index] = BarSlot::Bar(BarState {
            def,
            base: 0,
            written: false,
        });
        if def.slots() == 2 {
            self.bars[index + 1] = BarSlot::High(index);
        }
        self.render_bar(index);
        if def.slots() == 2 {
            self.render_bar(index + 1);
        }
    }

    fn render_bar(&mut self, slot: usize) {
        let dword = match self.bars[slot] {
            BarSlot::Empty => 0,
            BarSlot::Bar(state) => (state.base as u32) | state.def.type_bits(),
            BarSlot::High(low) => match self.bars[low] {
                BarSlot::Bar(state) => (state.base >> 32) as u32,
                _ => unreachable!("dangling 64-bit BAR upper half"),
            },
        };
        let offset = reg::BAR0 + slot * 4;
        self.raw[offset..offset + 4].copy_from_slice(&dword.to_le_bytes());
    }

    fn bar_dword_write(&mut self, slot: usize, value: u32) {
        match self.bars[slot] {
            BarSlot::Empty => {} // unimplemented BARs are hardwired to zero
            BarSlot::Bar(ref mut state) => {
                let low_mask = !(state.def.size - 1) & 0xFFFF_FFFF;
                state.base = (state.base & !0xFFFF_FFFF) | (value as u64 & low_mask);
                state.written = true;
            }
            BarSlot::High(low) => {
                if let BarSlot::Bar(ref mut state) = self.bars[low] {
                    let high_mask = !(state.def.size - 1) >> 32;
                    state.base =
                        (state.base & 0xFFFF_FFFF) | ((value as u64 & high_mask) << 32);
                    state.written = true;
                }
            }
        }
        self.render_bar(slot);
    }

    fn check_range(offset: usize, len: usize) -> Result<(), ConfigError> {
        if offset + len > CONFIG_SPACE_SIZE {
            return Err(ConfigError::OutOfRange { offset, len });
        }
        Ok(())
    }

    /// Little-endian read of `width` bytes (1, 2 or 4 — wider reads are
    /// allowed but unusual). Reads never mutate state.
    pub fn read(&self, offset: usize, width: usize) -> Result<u64, ConfigError> {
        Self::check_range(offset, width)?;
        let mut value = 0u64;
        for i in 0..width {
            value |= (self.raw[offset + i] as u64) << (8 * i);
        }
        Ok(value)
    }

    pub fn read_bytes(&self, offset: usize, out: &mut [u8]) -> Result<(), ConfigError> {
        Self::check_range(offset, out.len())?;
        out.copy_from_slice(&self.raw[offset..offset + out.len()]);
        Ok(())
    }

    /// Applies a write: masked into plain registers, with BAR dwords getting
    /// the store/sizing treatment.
    pub fn write_bytes(&mut self, offset: usize, data: &[u8]) -> Result<(), ConfigError> {
        Self::check_range(offset, data.len())?;
        let mut staged: [Option<u32>; 6] = [None; 6];
        for (i, &byte) in data.iter().enumerate() {
            let o = offset + i;
            if (reg::BAR0..reg::BAR_END).contains(&o) {
                let slot = (o - reg::BAR0) / 4;
                let shift = 8 * ((o - reg::BAR0) % 4);
                let current = staged[slot]
                    .unwrap_or_else(|| self.read(reg::BAR0 + slot * 4, 4).unwrap() as u32);
                staged[slot] = Some((current & !(0xFF << shift)) | ((byte as u32) << shift));
            } else {
                let mask = self.write_mask[o];
                self.raw[o] = (self.raw[o] & !mask) | (byte & mask);
            }
        }
        for (slot, value) in staged.iter().enumerate() {
            if let Some(value) = value {
                self.bar_dword_write(slot, *value);
            }
        }
        Ok(())
    }

    pub fn write(&mut self, offset: usize, width: usize, value: u64) -> Result<(), ConfigError> {
        let bytes = value.to_le_bytes();
        self.write_bytes(offset, &bytes[..width])
    }

    /// Device-side update that bypasses write masks: a device may change
    /// its own read-only registers.
    pub fn overwrite(&mut self, offset: usize, width: usize, value: u64) {
        let bytes = value.to_le_bytes();
        self.raw[offset..offset + width].copy_from_slice(&bytes[..width]);
    }

    pub fn raw_bytes(&self) -> &[u8; CONFIG_SPACE_SIZE] {
        &self.raw
    }

    pub fn vendor_id(&self) -> u16 {
        self.read(reg::VENDOR_ID, 2).unwrap() as u16
    }

    pub fn device_id(&self) -> u16 {
        self.read(reg::DEVICE_ID, 2).unwrap() as u16
    }

    pub fn command(&self) -> u16 {
        self.read(reg::COMMAND, 2).unwrap() as u16
    }

    pub fn set_command(&mut self, value: u16) {
        self.raw[reg::COMMAND..reg::COMMAND + 2].copy_from_slice(&value.to_le_bytes());
    }

    pub fn status(&self) -> u16 {
        self.read(reg::STATUS, 2).unwrap() as u16
    }

    pub fn interrupt_pin(&self) -> Option<LegacyPin> {
        LegacyPin::from_config_value(self.raw[reg::INTERRUPT_PIN])
    }

    pub fn interrupt_line(&self) -> u8 {
        self.raw[reg::INTERRUPT_LINE]
    }

    pub fn capabilities_pointer(&self) -> u8 {
        self.raw[reg::CAPABILITIES_POINTER]
    }

    /// Definition of the BAR anchored at `index`, if one is attached there.
    pub fn bar_definition(&self, index: usize) -> Option<BarDefinition> {
        match self.bars.get(index)? {
            BarSlot::Bar(state) => Some(state.def),
            _ => None,
        }
    }

    /// The base the bus master programmed, once one has been written.
    pub fn bar_programmed_base(&self, index: usize) -> Option<u64> {
        match self.bars.get(index)? {
            BarSlot::Bar(state) if state.written => Some(state.base),
            _ => None,
        }
    }
}

impl std::fmt::Debug for ConfigSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ConfigSpace {{ vendor {:#06x}, device {:#06x} }}",
            self.vendor_id(),
            self.device_id()
        )
    }
}

/// Follows the capability chain and returns `(capability id, offset)` pairs.
///
/// Returns an empty list when the status register advertises no list or the
/// pointer is null. A revisited or out-of-range pointer is a malformed
/// configuration.
pub fn capability_walk(cfg: &ConfigSpace) -> Result<Vec<(u8, u8)>, ConfigError> {
    let mut caps = Vec::new();
    if cfg.status() & status::CAPABILITIES == 0 {
        return Ok(caps);
    }
    let mut visited = [false; CONFIG_SPACE_SIZE];
    let mut pointer = cfg.capabilities_pointer() & 0xFC;
    while pointer != 0 {
        if pointer as usize + 1 >= CONFIG_SPACE_SIZE || pointer < 0x40 || visited[pointer as usize]
        {
            return Err(ConfigError::MalformedCapabilityChain { pointer });
        }
        visited[pointer as usize] = true;
        let id = cfg.raw[pointer as usize];
        caps.push((id, pointer));
        pointer = cfg.raw[pointer as usize + 1] & 0xFC;
    }
    Ok(caps)
}

/// Location of an MSI capability plus typed access to its fields.
#[derive(Debug, Clone, Copy)]
pub struct MsiCapability {
    pub offset: u8,
    pub is_64bit: bool,
}

impl MsiCapability {
    pub fn locate(cfg: &ConfigSpace) -> Result<Option<Self>, ConfigError> {
        for (id, offset) in capability_walk(cfg)? {
            if id == CAP_ID_MSI {
                let ctrl = cfg.read(offset as usize + 2, 2)? as u16;
                return Ok(Some(MsiCapability {
                    offset,
                    is_64bit: ctrl & (1 << 7) != 0,
                }));
            }
        }
        Ok(None)
    }

    pub fn enabled(&self, cfg: &ConfigSpace) -> bool {
        cfg.read(self.offset as usize + 2, 2).unwrap() & 0x1 != 0
    }

    pub fn message_address(&self, cfg: &ConfigSpace) -> u64 {
        if self.is_64bit {
            cfg.read(self.offset as usize + 4, 4).unwrap()
                | (cfg.read(self.offset as usize + 8, 4).unwrap() << 32)
        } else {
            cfg.read(self.offset as usize + 4, 4).unwrap()
        }
    }

    pub fn message_data(&self, cfg: &ConfigSpace) -> u16 {
        cfg.read(self.data_offset(), 2).unwrap() as u16
    }

    fn data_offset(&self) -> usize {
        self.offset as usize + if self.is_64bit { 12 } else { 8 }
    }

    /// Byte range of the fields a passthrough model serves from shadow
    /// state: control, message address and message data.
    pub fn virtualized_range(&self) -> std::ops::Range<usize> {
        self.offset as usize + 2..self.data_offset() + 2
    }
}

/// Location of an MSI-X capability plus typed access to its fields.
#[derive(Debug, Clone, Copy)]
pub struct MsixCapability {
    pub offset: u8,
}

impl MsixCapability {
    pub fn locate(cfg: &ConfigSpace) -> Result<Option<Self>, ConfigError> {
        for (id, offset) in capability_walk(cfg)? {
            if id == CAP_ID_MSIX {
                return Ok(Some(MsixCapability { offset }));
            }
        }
        Ok(None)
    }

    fn control(&self, cfg: &ConfigSpace) -> u16 {
        cfg.read(self.offset as usize + 2, 2).unwrap() as u16
    }

    pub fn table_size(&self, cfg: &ConfigSpace) -> u16 {
        (self.control(cfg) & 0x7FF) + 1
    }

    pub fn enabled(&self, cfg: &ConfigSpace) -> bool {
        self.control(cfg) & (1 << 15) != 0
    }

    pub fn function_masked(&self, cfg: &ConfigSpace) -> bool {
        self.control(cfg) & (1 << 14) != 0
    }

    pub fn table_bar(&self, cfg: &ConfigSpace) -> u8 {
        (cfg.read(self.offset as usize + 4, 4).unwrap() & 0x7) as u8
    }

    pub fn table_offset(&self, cfg: &ConfigSpace) -> u64 {
        cfg.read(self.offset as usize + 4, 4).unwrap() & !0x7
    }

    pub fn pba_bar(&self, cfg: &ConfigSpace) -> u8 {
        (cfg.read(self.offset as usize + 8, 4).unwrap() & 0x7) as u8
    }

    pub fn pba_offset(&self, cfg: &ConfigSpace) -> u64 {
        cfg.read(self.offset as usize + 8, 4).unwrap() & !0x7
    }

    /// Byte range served from shadow state: the message control word.
    pub fn virtualized_range(&self) -> std::ops::Range<usize> {
        self.offset as usize + 2..self.offset as usize + 4
    }
}

/// One entry of an MSI-X table, as laid out in device memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsiXTableEntry {
    pub message_address: u64,
    pub message_data: u32,
    pub masked: bool,
}

impl MsiXTableEntry {
    /// The post-reset state: masked, all fields zero.
    pub fn reset() -> Self {
        MsiXTableEntry {
            message_address: 0,
            message_data: 0,
            masked: true,
        }
    }

    pub fn from_bytes(bytes: &[u8; MSIX_ENTRY_SIZE]) -> Self {
        let addr_lo = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as u64;
        let addr_hi = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
        let data = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let vector_control = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        MsiXTableEntry {
            message_address: addr_lo | (addr_hi << 32),
            message_data: data,
            masked: vector_control & 0x1 != 0,
        }
    }

    pub fn to_bytes(&self) -> [u8; MSIX_ENTRY_SIZE] {
        let mut bytes = [0u8; MSIX_ENTRY_SIZE];
        bytes[0..4].copy_from_slice(&(self.message_address as u32).to_le_bytes());
        bytes[4..8].copy_from_slice(&((self.message_address >> 32) as u32).to_le_bytes());
        bytes[8..12].copy_from_slice(&self.message_data.to_le_bytes());
        bytes[12..16].copy_from_slice(&(self.masked as u32).to_le_bytes());
        bytes
    }
}

/// Builds a device-side configuration space.
pub struct ConfigSpaceBuilder {
    cfg: ConfigSpace,
    next_cap: usize,
    prev_cap_next_ptr: Option<usize>,
    bars: Vec<BarDefinition>,
}

impl ConfigSpaceBuilder {
    pub fn new(vendor_id: u16, device_id: u16) -> Self {
        let mut cfg = ConfigSpace {
            raw: [0; CONFIG_SPACE_SIZE],
            write_mask: [0; CONFIG_SPACE_SIZE],
            bars: [BarSlot::Empty; 6],
        };
        cfg.raw[reg::VENDOR_ID..reg::VENDOR_ID + 2].copy_from_slice(&vendor_id.to_le_bytes());
        cfg.raw[reg::DEVICE_ID..reg::DEVICE_ID + 2].copy_from_slice(&device_id.to_le_bytes());
        cfg.raw[reg::HEADER_TYPE] = 0x00;
        ConfigSpaceBuilder {
            cfg,
            next_cap: 0x40,
            prev_cap_next_ptr: None,
            bars: Vec::new(),
        }
    }

    pub fn interrupt_pin(mut self, pin: Option<LegacyPin>) -> Self {
        self.cfg.raw[reg::INTERRUPT_PIN] = pin.map_or(0, LegacyPin::config_value);
        self
    }

    pub fn bar(mut self, def: BarDefinition) -> Self {
        def.validate();
        self.bars.push(def);
        self
    }

    fn add_capability(&mut self, id: u8, body: &[u8]) -> usize {
        let offset = self.next_cap;
        assert!(
            offset + 2 + body.len() <= CONFIG_SPACE_SIZE,
            "capability does not fit in the 256-byte space"
        );
        match self.prev_cap_next_ptr {
            None => self.cfg.raw[reg::CAPABILITIES_POINTER] = offset as u8,
            Some(ptr) => self.cfg.raw[ptr] = offset as u8,
        }
        self.cfg.raw[offset] = id;
        self.cfg.raw[offset + 1] = 0;
        self.cfg.raw[offset + 2..offset + 2 + body.len()].copy_from_slice(body);
        self.prev_cap_next_ptr = Some(offset + 1);
        self.next_cap = (offset + 2 + body.len() + 3) & !3;
        offset
    }

    /// Adds a 64-bit MSI capability, disabled after reset, seeded with the
    /// given device-side message address and data.
    pub fn msi_capability(mut self, message_address: u64, message_data: u16) -> Self {
        let mut body = [0u8; 12];
        body[0..2].copy_from_slice(&(1u16 << 7).to_le_bytes()); // 64-bit capable
        body[2..10].copy_from_slice(&message_address.to_le_bytes());
        body[10..12].copy_from_slice(&message_data.to_le_bytes());
        self.add_capability(CAP_ID_MSI, &body);
        self
    }

    /// Adds an MSI-X capability, disabled after reset.
    pub fn msix_capability(
        mut self,
        table_size: u16,
        table_bar: u8,
        table_offset: u64,
        pba_bar: u8,
        pba_offset: u64,
    ) -> Self {
        assert!((1..=2048).contains(&table_size), "MSI-X table size out of range");
        assert_eq!(table_offset % 8, 0, "MSI-X table offset must be 8-byte aligned");
        assert_eq!(pba_offset % 8, 0, "MSI-X PBA offset must be 8-byte aligned");
        let table_bytes = table_size as u64 * MSIX_ENTRY_SIZE as u64;
        let pba_bytes = (table_size as u64).div_ceil(64) * 8;
        if table_bar == pba_bar {
            let disjoint = table_offset + table_bytes <= pba_offset
                || pba_offset + pba_bytes <= table_offset;
            assert!(disjoint, "MSI-X table and PBA regions overlap");
        }
        let mut body = [0u8; 10];
        body[0..2].copy_from_slice(&(table_size - 1).to_le_bytes());
        body[2..6].copy_from_slice(&((table_offset as u32) | table_bar as u32).to_le_bytes());
        body[6..10].copy_from_slice(&((pba_offset as u32) | pba_bar as u32).to_le_bytes());
        self.add_capability(CAP_ID_MSIX, &body);
        self
    }

    pub fn build(mut self) -> ConfigSpace {
        if self.prev_cap_next_ptr.is_some() {
            let status = self.cfg.status() | status::CAPABILITIES;
            self.cfg.raw[reg::STATUS..reg::STATUS + 2].copy_from_slice(&status.to_le_bytes());
        }
        for def in std::mem::take(&mut self.bars) {
            self.cfg.attach_bar(def);
        }
        self.cfg
            .apply_standard_write_masks()
            .expect("builder produced a malformed capability chain");
        self.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConfigSpace {
        ConfigSpaceBuilder::new(0x1B0B, 0x0001)
            .interrupt_pin(Some(LegacyPin::A))
            .bar(BarDefinition::mem32(0, 4096))
            .msi_capability(0, 0)
            .msix_capability(13, 0, 0x800, 0, 0xC00)
            .build()
    }

    #[test]
    fn reads_echo_configured_identity() {
        let cfg = sample();
        assert_eq!(cfg.read(0x00, 2).unwrap(), 0x1B0B);
        assert_eq!(cfg.read(0x3D, 1).unwrap(), 1); // pin A
        assert_eq!(cfg.read(0x04, 2).unwrap() & command::MEM_ENABLE as u64, 0);
    }

    #[test]
    fn reads_do_not_mutate() {
        let cfg = sample();
        let before = *cfg.raw_bytes();
        for offset in 0..CONFIG_SPACE_SIZE {
            let _ = cfg.read(offset, 1).unwrap();
        }
        assert_eq!(&before, cfg.raw_bytes());
    }

    #[test]
    fn read_only_fields_survive_writes() {
        let mut cfg = sample();
        cfg.write(reg::VENDOR_ID, 2, 0xDEAD).unwrap();
        cfg.write(reg::INTERRUPT_PIN, 1, 3).unwrap();
        assert_eq!(cfg.vendor_id(), 0x1B0B);
        assert_eq!(cfg.interrupt_pin(), Some(LegacyPin::A));
    }

    #[test]
    fn command_register_masks_reserved_bits() {
        let mut cfg = sample();
        cfg.write(reg::COMMAND, 2, 0xFFFF).unwrap();
        assert_eq!(cfg.command(), command::WRITABLE);
    }

    /// Independent sizing oracle: the PCI formula `~(size - 1) | type_bits`,
    /// evaluated directly.
    fn sizing_oracle(size: u64, type_bits: u32) -> u32 {
        (!(size - 1) as u32) | type_bits
    }

    #[test]
    fn bar_sizing_matches_the_formula_oracle_for_all_sizes() {
        let mut size = 16u64;
        while size <= 1 << 30 {
            let mut cfg = ConfigSpaceBuilder::new(0x1B0B, 0x0001)
                .bar(BarDefinition::mem32(0, size))
                .build();
            cfg.write(reg::BAR0, 4, 0xFFFF_FFFF).unwrap();
            let readback = cfg.read(reg::BAR0, 4).unwrap() as u32;
            assert_eq!(readback, sizing_oracle(size, 0), "size {size:#x}");
            size <<= 1;
        }
    }

    #[test]
    fn bar_sizing_known_values() {
        let mut cfg = ConfigSpaceBuilder::new(0, 0)
            .bar(BarDefinition::mem32(0, 4096))
            .bar(BarDefinition::mem32(1, 64 * 1024))
            .build();
        cfg.write(reg::BAR0, 4, 0xFFFF_FFFF).unwrap();
        cfg.write(reg::BAR0 + 4, 4, 0xFFFF_FFFF).unwrap();
        assert_eq!(cfg.read(reg::BAR0, 4).unwrap(), 0xFFFF_F000);
        assert_eq!(cfg.read(reg::BAR0 + 4, 4).unwrap(), 0xFFFF_0000);
    }

    #[test]
    fn programmed_base_stores_and_reads_back() {
        let mut cfg = ConfigSpaceBuilder::new(0, 0)
            .bar(BarDefinition::mem32(0, 4096))
            .build();
        assert_eq!(cfg.bar_programmed_base(0), None);
        cfg.write(reg::BAR0, 4, 0x5000_0000).unwrap();
        assert_eq!(cfg.read(reg::BAR0, 4).unwrap(), 0x5000_0000);
        assert_eq!(cfg.bar_programmed_base(0), Some(0x5000_0000));
    }

    #[test]
    fn mem64_bar_spans_two_slots() {
        let mut cfg = ConfigSpaceBuilder::new(0, 0)
            .bar(BarDefinition::mem64(2, 1 << 33))
            .build();
        cfg.write(reg::BAR0 + 8, 4, 0xFFFF_FFFF).unwrap();
        cfg.write(reg::BAR0 + 12, 4, 0xFFFF_FFFF).unwrap();
        assert_eq!(cfg.read(reg::BAR0 + 8, 4).unwrap(), 0x4); // type bits only
        assert_eq!(cfg.read(reg::BAR0 + 12, 4).unwrap(), 0xFFFF_FFFE);
        cfg.write(reg::BAR0 + 8, 4, 0x0000_0000).unwrap();
        cfg.write(reg::BAR0 + 12, 4, 0x2).unwrap();
        assert_eq!(cfg.bar_programmed_base(2), Some(0x2_0000_0000));
    }

    #[test]
    fn unimplemented_bars_read_zero_and_ignore_writes() {
        let mut cfg = ConfigSpaceBuilder::new(0, 0).build();
        cfg.write(reg::BAR0, 4, 0xFFFF_FFFF).unwrap();
        assert_eq!(cfg.read(reg::BAR0, 4).unwrap(), 0);
    }

    #[test]
    fn capability_walk_finds_the_chain() {
        let cfg = sample();
        let caps = capability_walk(&cfg).unwrap();
        assert_eq!(caps.len(), 2);
        assert_eq!(caps[0].0, CAP_ID_MSI);
        assert_eq!(caps[1].0, CAP_ID_MSIX);
    }

    #[test]
    fn capability_walk_on_empty_chain_is_empty() {
        let cfg = ConfigSpaceBuilder::new(0, 0).build();
        assert!(capability_walk(&cfg).unwrap().is_empty());
    }

    #[test]
    fn capability_walk_detects_loops() {
        let mut cfg = sample();
        // Point the MSI-X capability's next pointer back at the MSI one.
        let caps = capability_walk(&cfg).unwrap();
        let (msi_off, msix_off) = (caps[0].1, caps[1].1);
        cfg.raw[msix_off as usize + 1] = msi_off;
        assert!(matches!(
            capability_walk(&cfg),
            Err(ConfigError::MalformedCapabilityChain { .. })
        ));
    }

    #[test]
    fn msi_capability_fields_round_trip() {
        let mut cfg = ConfigSpaceBuilder::new(0, 0)
            .msi_capability(0xFEE0_0000_1234_0000, 0xBEEF)
            .build();
        let msi = MsiCapability::locate(&cfg).unwrap().unwrap();
        assert!(!msi.enabled(&cfg), "MSI must be disabled after reset");
        assert_eq!(msi.message_address(&cfg), 0xFEE0_0000_1234_0000);
        assert_eq!(msi.message_data(&cfg), 0xBEEF);

        cfg.write(msi.offset as usize + 4, 4, 0x0800_0040).unwrap();
        cfg.write(msi.offset as usize + 8, 4, 0).unwrap();
        cfg.write(msi.offset as usize + 12, 2, 0x0042).unwrap();
        cfg.write(msi.offset as usize + 2, 2, 0x1).unwrap();
        assert!(msi.enabled(&cfg));
        assert_eq!(msi.message_address(&cfg), 0x0800_0040);
        assert_eq!(msi.message_data(&cfg), 0x0042);
    }

    #[test]
    fn msix_capability_fields_decode() {
        let cfg = sample();
        let msix = MsixCapability::locate(&cfg).unwrap().unwrap();
        assert!(!msix.enabled(&cfg), "MSI-X must be disabled after reset");
        assert!(!msix.function_masked(&cfg));
        assert_eq!(msix.table_size(&cfg), 13);
        assert_eq!(msix.table_bar(&cfg), 0);
        assert_eq!(msix.table_offset(&cfg), 0x800);
        assert_eq!(msix.pba_bar(&cfg), 0);
        assert_eq!(msix.pba_offset(&cfg), 0xC00);
    }

    #[test]
    #[should_panic(expected = "overlap")]
    fn msix_table_pba_overlap_is_rejected() {
        let _ = ConfigSpaceBuilder::new(0, 0)
            .bar(BarDefinition::mem32(0, 4096))
            .msix_capability(64, 0, 0x800, 0, 0x810)
            .build();
    }

    #[test]
    fn msix_table_entry_encoding_round_trips() {
        let entry = MsiXTableEntry {
            message_address: 0x0800_0040,
            message_data: 68,
            masked: false,
        };
        assert_eq!(MsiXTableEntry::from_bytes(&entry.to_bytes()), entry);
        assert!(MsiXTableEntry::reset().masked);
    }

    #[test]
    fn from_raw_preserves_the_image_bit_exactly() {
        let built = sample();
        let copy = ConfigSpace::from_raw(*built.raw_bytes()).unwrap();
        assert_eq!(copy.raw_bytes(), built.raw_bytes());
        assert_eq!(copy.vendor_id(), 0x1B0B);
        let msix = MsixCapability::locate(&copy).unwrap().unwrap();
        assert_eq!(msix.table_size(&copy), 13);
    }

    #[test]
    fn out_of_range_access_is_reported() {
        let cfg = sample();
        assert!(matches!(
            cfg.read(0xFF, 2),
            Err(ConfigError::OutOfRange { .. })
        ));
    }
}

//! Partial bitfile format.
//!
//! A bitfile is a fixed little-endian header followed by a payload holding the
//! kernel descriptor and an opaque configuration image:
//!
//! ```text
//! offset size field
//!      0    4 magic        "VFPB"
//!      4    2 version      1
//!      6    4 device_id
//!     10    4 shell_id
//!     14    1 prr_id
//!     15    4 payload_len
//!     19    4 payload_crc  CRC-32 (IEEE) over the payload bytes
//!     23    . payload
//! ```
//!
//! Payload layout:
//!
//! ```text
//! u16 kind | u32 static_cycles_per_item | u8 param count
//! repeated: u8 name_len | name bytes (utf-8) | u8 width_bits
//! u32 image_len | image bytes
//! ```

use std::fmt;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VFPB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 23;

/// Number of 64-bit argument registers in every PRR register file.
pub const ARG_REGISTERS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("parameter schema has {0} entries, register file holds {ARG_REGISTERS}")]
    TooManyParams(usize),
    #[error("parameter name `{0}` is empty or longer than 255 bytes")]
    BadParamName(String),
    #[error("parameter `{name}` has width {width}, expected 1..=64 bits")]
    BadParamWidth { name: String, width: u8 },
    #[error("configuration image of {0} bytes does not fit in a bitfile")]
    ImageTooLarge(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed bitfile: {0}")]
    Format(&'static str),
    #[error("payload CRC mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    Crc { expected: u32, actual: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    VecAdd,
    Matmul,
    Sobel,
    RogueWriter,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::VecAdd,
        KernelKind::Matmul,
        KernelKind::Sobel,
        KernelKind::RogueWriter,
    ];

    pub fn code(self) -> u16 {
        match self {
            KernelKind::VecAdd => 1,
            KernelKind::Matmul => 2,
            KernelKind::Sobel => 3,
            KernelKind::RogueWriter => 4,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::VecAdd => "vec_add",
            KernelKind::Matmul => "matmul",
            KernelKind::Sobel => "sobel",
            KernelKind::RogueWriter => "rogue_writer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Placeholder timing coefficients; calibrated per scenario, not measured.
    pub fn default_cycles_per_item(self) -> u32 {
        match self {
            KernelKind::VecAdd | KernelKind::Matmul | KernelKind::RogueWriter => 1,
            KernelKind::Sobel => 9,
        }
    }

    /// Argument slots in register order.
    pub fn default_schema(self) -> Vec<ParamSlot> {
        let names: &[&str] = match self {
            KernelKind::VecAdd => &["a_addr", "b_addr", "c_addr", "n"],
            KernelKind::Matmul => &["a_addr", "b_addr", "c_addr", "n", "m", "k"],
            KernelKind::Sobel => &["src_addr", "dst_addr", "w", "h"],
            KernelKind::RogueWriter => &["target_addr", "len", "pattern"],
        };
        names.iter().map(|n| ParamSlot::new(*n, 64)).collect()
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamSlot {
    pub name: String,
    pub width: u8,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, width: u8) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }
}

/// What a PRR holds after configuration: the workload and its timing coefficient.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelDescriptor {
    pub kind: KernelKind,
    pub param_schema: Vec<ParamSlot>,
    pub static_cycles_per_item: u32,
}

impl KernelDescriptor {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            param_schema: kind.default_schema(),
            static_cycles_per_item: kind.default_cycles_per_item(),
        }
    }

    pub fn with_cycles_per_item(mut self, cycles: u32) -> Self {
        self.static_cycles_per_item = cycles;
        self
    }

    fn validate(&self) -> Result<(), EncodingError> {
        if self.param_schema.len() > ARG_REGISTERS {
            return Err(EncodingError::TooManyParams(self.param_schema.len()));
        }
        for slot in &self.param_schema {
            if slot.name.is_empty() || slot.name.len() > u8::MAX as usize {
                return Err(EncodingError::BadParamName(slot.name.clone()));
            }
            if slot.width == 0 || slot.width > 64 {
                return Err(EncodingError::BadParamWidth {
                    name: slot.name.clone(),
                    width: slot.width,
                });
            }
        }
        Ok(())
    }
}

/// Identity baked into a bitfile by the (hidden) partial-reconfiguration compile step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitfileTarget {
    pub device_id: u32,
    pub shell_id: u32,
    pub prr_id: u8,
}

impl BitfileTarget {
    pub fn new(device_id: u32, shell_id: u32, prr_id: u8) -> Self {
        Self {
            device_id,
            shell_id,
            prr_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitfileHeader {
    pub magic: [u8; 4],
    pub version: u16,
    pub device_id: u32,
    pub shell_id: u32,
    pub prr_id: u8,
    pub payload_len: u32,
    pub payload_crc: u32,
}

impl BitfileHeader {
    pub fn target(&self) -> BitfileTarget {
        BitfileTarget::new(self.device_id, self.shell_id, self.prr_id)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.device_id.to_le_bytes());
        out.extend_from_slice(&self.shell_id.to_le_bytes());
        out.push(self.prr_id);
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        out.extend_from_slice(&self.payload_crc.to_le_bytes());
    }

    /// Parses the fixed header without looking at the payload.
    pub fn parse(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError::Format("truncated header"));
        }
        let mut r = Cursor::new(&bytes[..HEADER_LEN]);
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(DecodeError::Format("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(DecodeError::Format("unsupported version"));
        }
        Ok(Self {
            magic,
            version,
            device_id: r.u32()?,
            shell_id: r.u32()?,
            prr_id: r.u8()?,
            payload_len: r.u32()?,
            payload_crc: r.u32()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialBitfile {
    pub header: BitfileHeader,
    pub descriptor: KernelDescriptor,
    pub image_len: usize,
}

impl PartialBitfile {
    pub fn target(&self) -> BitfileTarget {
        self.header.target()
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Encodes a descriptor with no configuration image.
pub fn encode_bitfile(
    desc: &KernelDescriptor,
    target: BitfileTarget,
) -> Result<Vec<u8>, EncodingError> {
    encode_bitfile_with_image(desc, target, 0)
}

/// Encodes a descriptor followed by `image_len` bytes of configuration frames.
///
/// Frame contents are a deterministic function of the descriptor and target so
/// identical compiles produce identical files.
pub fn encode_bitfile_with_image(
    desc: &KernelDescriptor,
    target: BitfileTarget,
    image_len: usize,
) -> Result<Vec<u8>, EncodingError> {
    desc.validate()?;
    if image_len > u32::MAX as usize / 2 {
        return Err(EncodingError::ImageTooLarge(image_len));
    }

    let mut payload = Vec::with_capacity(32 + image_len);
    payload.extend_from_slice(&desc.kind.code().to_le_bytes());
    payload.extend_from_slice(&desc.static_cycles_per_item.to_le_bytes());
    payload.push(desc.param_schema.len() as u8);
    for slot in &desc.param_schema {
        payload.push(slot.name.len() as u8);
        payload.extend_from_slice(slot.name.as_bytes());
        payload.push(slot.width);
    }
    payload.extend_from_slice(&(image_len as u32).to_le_bytes());
    let mut state = (u32::from(desc.kind.code()) << 16)
        ^ (u32::from(target.prr_id) << 8)
        ^ target.shell_id.rotate_left(3)
        ^ target.device_id.rotate_left(11)
        ^ 0x9e37_79b9;
    payload.extend((0..image_len).map(|_| {
        // xorshift32
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state as u8
    }));

    let header = BitfileHeader {
        magic: MAGIC,
        version: VERSION,
        device_id: target.device_id,
        shell_id: target.shell_id,
        prr_id: target.prr_id,
        payload_len: payload.len() as u32,
        payload_crc: crc32(&payload),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    header.write(&mut out);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_bitfile(bytes: &[u8]) -> Result<PartialBitfile, DecodeError> {
    let header = BitfileHeader::parse(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < header.payload_len as usize {
        return Err(DecodeError::Format("truncated payload"));
    }
    if payload.len() > header.payload_len as usize {
        return Err(DecodeError::Format("trailing bytes after payload"));
    }
    let actual = crc32(payload);
    if actual != header.payload_crc {
        return Err(DecodeError::Crc {
            expected: header.payload_crc,
            actual,
        });
    }

    let mut r = Cursor::new(payload);
    let kind =
        KernelKind::from_code(r.u16()?).ok_or(DecodeError::Format("unknown kernel kind"))?;
    let static_cycles_per_item = r.u32()?;
    let count = r.u8()? as usize;
    if count > ARG_REGISTERS {
        return Err(DecodeError::Format("parameter schema exceeds register file"));
    }
    let mut param_schema = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DecodeError::Format("parameter name is not utf-8"))?
            .to_owned();
        let width = r.u8()?;
        param_schema.push(ParamSlot { name, width });
    }
    let image_len = r.u32()? as usize;
    r.take(image_len)?;
    if !r.is_empty() {
        return Err(DecodeError::Format("payload has trailing bytes"));
    }
    let descriptor = KernelDescriptor {
        kind,
        param_schema,
        static_cycles_per_item,
    };
    descriptor
        .validate()
        .map_err(|_| DecodeError::Format("invalid parameter schema"))?;

    Ok(PartialBitfile {
        header,
        descriptor,
        image_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compatibility {
    Accept,
    Reject,
}

/// The control block's check. It can only compare device and shell identity;
/// which region the frames belong to is invisible at this level.
pub fn cb_compatibility_check(
    bitfile: &PartialBitfile,
    device_id: u32,
    shell_id: u32,
) -> Compatibility {
    if bitfile.header.device_id == device_id && bitfile.header.shell_id == shell_id {
        Compatibility::Accept
    } else {
        Compatibility::Reject
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DecodeError::Format("payload truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

//! Per-VM workload scripts: one operation per line.
//!
//! ```text
//! reprogram <kind> [image=SIZE] [prr=N] [cycles=N]   queue and wait for a bitfile
//! reprogram_file <path>                             same, with a bitfile from disk
//! alloc <buf> <size>
//! free <buf>
//! write <buf> <off> random <len>
//! write <buf> <off> fill <byte> <len>
//! write <buf> <off> i32 <v>[,<v>...]
//! write <buf> <off> iota <count>                    i32 values 0..count
//! read <buf> <off> <len>
//! args <arg>...                                     integers or @buf[+off]
//! launch
//! wait                                              block on the pending launch
//! sleep <ns>
//! ```
//!
//! Sizes accept `K`/`M`/`G` binary suffixes and `0x` hex. Blank lines and
//! text after `#` are ignored.

use thiserror::Error;

use crate::bitstream::{KernelKind, ARG_REGISTERS};

/// Bitfile image size used when a `reprogram` line gives none.
pub const DEFAULT_IMAGE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Int(u64),
    Buffer { name: String, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fill {
    Random { len: u64 },
    Byte { value: u8, len: u64 },
    I32(Vec<i32>),
    Iota { count: u64 },
}

impl Fill {
    pub fn len(&self) -> u64 {
        match self {
            Self::Random { len } | Self::Byte { len, .. } => *len,
            Self::I32(v) => 4 * v.len() as u64,
            Self::Iota { count } => 4 * count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Reprogram {
        kind: KernelKind,
        image: usize,
        /// Target region; `None` means the VM's own.
        prr: Option<u8>,
        cycles: Option<u32>,
    },
    ReprogramFile { path: String },
    Alloc { name: String, size: u64 },
    Free { name: String },
    Write { name: String, offset: u64, fill: Fill },
    Read { name: String, offset: u64, len: u64 },
    Args(Vec<Operand>),
    Launch,
    Wait,
    Sleep { ns: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

pub fn parse_size(s: &str) -> Option<u64> {
    let (digits, shift) = match s.as_bytes().last()? {
        b'K' | b'k' => (&s[..s.len() - 1], 10),
        b'M' | b'm' => (&s[..s.len() - 1], 20),
        b'G' | b'g' => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let v = match digits.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok()?,
        None => digits.replace('_', "").parse().ok()?,
    };
    v.checked_mul(1 << shift)
}

fn size(tok: Option<&str>, what: &str) -> Result<u64, String> {
    let t = tok.ok_or_else(|| format!("missing {what}"))?;
    parse_size(t).ok_or_else(|| format!("bad {what} {t:?}"))
}

fn name(tok: Option<&str>) -> Result<String, String> {
    match tok {
        Some(t) if !t.starts_with('@') => Ok(t.to_string()),
        Some(t) => Err(format!("bad buffer name {t:?}")),
        None => Err("missing buffer name".into()),
    }
}

fn operand(t: &str) -> Result<Operand, String> {
    match t.strip_prefix('@') {
        Some(rest) => {
            let (name, offset) = match rest.split_once('+') {
                Some((n, o)) => (n, parse_size(o).ok_or_else(|| format!("bad offset {o:?}"))?),
                None => (rest, 0),
            };
            if name.is_empty() {
                return Err(format!("bad operand {t:?}"));
            }
            Ok(Operand::Buffer {
                name: name.to_string(),
                offset,
            })
        }
        None => parse_size(t)
            .map(Operand::Int)
            .ok_or_else(|| format!("bad operand {t:?}")),
    }
}

fn parse_line(line: &str) -> Result<Option<Op>, String> {
    let line = line.split('#').next().unwrap_or("").trim();
    let mut toks = line.split_whitespace();
    let Some(verb) = toks.next() else {
        return Ok(None);
    };
    let op = match verb {
        "reprogram" => {
            let k = toks.next().ok_or("missing kernel kind")?;
            let kind = KernelKind::from_name(k).ok_or_else(|| format!("unknown kernel {k:?}"))?;
            let (mut image, mut prr, mut cycles) = (DEFAULT_IMAGE, None, None);
            for t in toks.by_ref() {
                let (key, value) = t.split_once('=').ok_or_else(|| format!("bad option {t:?}"))?;
                let v = parse_size(value).ok_or_else(|| format!("bad value in {t:?}"))?;
                match key {
                    "image" => image = usize::try_from(v).map_err(|_| "image too large")?,
                    "prr" => prr = Some(u8::try_from(v).map_err(|_| "prr out of range")?),
                    "cycles" => {
                        cycles = Some(u32::try_from(v).map_err(|_| "cycles out of range")?)
                    }
                    _ => return Err(format!("unknown option {key:?}")),
                }
            }
            Op::Reprogram {
                kind,
                image,
                prr,
                cycles,
            }
        }
        "reprogram_file" => Op::ReprogramFile {
            path: toks.next().ok_or("missing path")?.to_string(),
        },
        "alloc" => Op::Alloc {
            name: name(toks.next())?,
            size: size(toks.next(), "size")?,
        },
        "free" => Op::Free {
            name: name(toks.next())?,
        },
        "write" => {
            let name = name(toks.next())?;
            let offset = size(toks.next(), "offset")?;
            let fill = match toks.next() {
                Some("random") => Fill::Random {
                    len: size(toks.next(), "length")?,
                },
                Some("fill") => Fill::Byte {
                    value: u8::try_from(size(toks.next(), "byte")?).map_err(|_| "byte > 255")?,
                    len: size(toks.next(), "length")?,
                },
                Some("i32") => {
                    let list = toks.next().ok_or("missing values")?;
                    Fill::I32(
                        list.split(',')
                            .map(|v| v.parse().map_err(|_| format!("bad i32 {v:?}")))
                            .collect::<Result<_, _>>()?,
                    )
                }
                Some("iota") => Fill::Iota {
                    count: size(toks.next(), "count")?,
                },
                Some(other) => return Err(format!("unknown fill {other:?}")),
                None => return Err("missing fill".into()),
            };
            Op::Write { name, offset, fill }
        }
        "read" => Op::Read {
            name: name(toks.next())?,
            offset: size(toks.next(), "offset")?,
            len: size(toks.next(), "length")?,
        },
        "args" => {
            let args = toks.by_ref().map(operand).collect::<Result<Vec<_>, _>>()?;
            if args.len() > ARG_REGISTERS {
                return Err(format!("at most {ARG_REGISTERS} arguments"));
            }
            Op::Args(args)
        }
        "launch" => Op::Launch,
        "wait" => Op::Wait,
        "sleep" => Op::Sleep {
            ns: size(toks.next(), "duration")?,
        },
        other => return Err(format!("unknown operation {other:?}")),
    };
    if let Some(extra) = toks.next() {
        return Err(format!("unexpected {extra:?}"));
    }
    Ok(Some(op))
}

/// Parses a script given as lines. Line numbers in errors are 1-based.
pub fn parse_script<S: AsRef<str>>(lines: &[S]) -> Result<Vec<Op>, ScriptError> {
    let mut ops = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        match parse_line(l.as_ref()) {
            Ok(Some(op)) => ops.push(op),
            Ok(None) => {}
            Err(message) => return Err(ScriptError { line: i + 1, message }),
        }
    }
    Ok(ops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4K"), Some(4096));
        assert_eq!(parse_size("2M"), Some(2 << 20));
        assert_eq!(parse_size("0x10"), Some(16));
        assert_eq!(parse_size("1_000"), Some(1000));
        assert_eq!(parse_size("x"), None);
        assert_eq!(parse_size("99999999999G"), None);
    }

    #[test]
    fn full_script() {
        let ops = parse_script(&[
            "reprogram vec_add image=64K cycles=2",
            "alloc a 4K   # input",
            "",
            "write a 0 iota 1024",
            "write a 0 fill 0xff 16",
            "write a 8 i32 1,-2,3",
            "args @a @a+0x10 7",
            "launch",
            "wait",
            "read a 0 4K",
            "sleep 1000",
            "free a",
            "reprogram_file /tmp/k.bit",
        ])
        .unwrap();
        assert_eq!(ops.len(), 12);
        assert_eq!(ops[11], Op::ReprogramFile { path: "/tmp/k.bit".into() });
        assert_eq!(
            ops[0],
            Op::Reprogram {
                kind: KernelKind::VecAdd,
                image: 65536,
                prr: None,
                cycles: Some(2)
            }
        );
        assert_eq!(
            ops[4],
            Op::Write {
                name: "a".into(),
                offset: 8,
                fill: Fill::I32(vec![1, -2, 3])
            }
        );
        assert_eq!(
            ops[5],
            Op::Args(vec![
                Operand::Buffer { name: "a".into(), offset: 0 },
                Operand::Buffer { name: "a".into(), offset: 16 },
                Operand::Int(7)
            ])
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (bad, line) in [
            (vec!["launch", "jump"], 2),
            (vec!["alloc"], 1),
            (vec!["reprogram fft"], 1),
            (vec!["reprogram vec_add speed=3"], 1),
            (vec!["write a 0 fill 256 4"], 1),
            (vec!["launch now"], 1),
            (vec!["args 1 2 3 4 5 6 7 8 9"], 1),
            (vec!["alloc @a 4"], 1),
        ] {
            assert_eq!(parse_script(&bad).unwrap_err().line, line, "{bad:?}");
        }
    }
}

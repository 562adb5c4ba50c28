//! Structural walk over a raw deflate stream.
//!
//! A deflate decoder ignores the padding bits after a stored-block header
//! and after the final block, so flipping one of them leaves the inflated
//! content unchanged. Compressors always write those bits as zero. The walk
//! decodes block structure without producing output and reports any set
//! padding bit or trailing byte.

use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StreamFault {
    Truncated,
    Malformed(&'static str),
    /// A padding bit at this byte offset is set.
    Padding {
        byte: usize,
    },
    /// Bytes follow the final block.
    Trailing {
        bytes: usize,
    },
}

impl fmt::Display for StreamFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamFault::Truncated => write!(f, "deflate stream truncated"),
            StreamFault::Malformed(what) => write!(f, "malformed deflate stream: {what}"),
            StreamFault::Padding { byte } => write!(f, "padding bits set at byte {byte} of the stored data"),
            StreamFault::Trailing { bytes } => write!(f, "{bytes} byte(s) after the final deflate block"),
        }
    }
}

struct Bits<'a> {
    data: &'a [u8],
    pos: usize,
    bit: u32,
    /// Bit offsets skipped by alignment.
    padding: Vec<usize>,
}

impl<'a> Bits<'a> {
    fn new(data: &'a [u8]) -> Self {
        Bits {
            data,
            pos: 0,
            bit: 0,
            padding: Vec::new(),
        }
    }

    fn read(&mut self, n: u32) -> Result<u32, StreamFault> {
        let mut v = 0;
        for i in 0..n {
            let byte = *self.data.get(self.pos).ok_or(StreamFault::Truncated)?;
            v |= (((byte >> self.bit) & 1) as u32) << i;
            self.bit += 1;
            if self.bit == 8 {
                self.bit = 0;
                self.pos += 1;
            }
        }
        Ok(v)
    }

    fn align(&mut self) {
        if self.bit != 0 {
            self.padding.extend((self.bit..8).map(|b| self.pos * 8 + b as usize));
            self.bit = 0;
            self.pos += 1;
        }
    }
}

/// Canonical Huffman code as counts per length and symbols in code order.
struct Huffman {
    counts: [u16; 16],
    symbols: Vec<u16>,
}

impl Huffman {
    fn new(lengths: &[u8]) -> Result<Self, StreamFault> {
        let mut counts = [0u16; 16];
        for &l in lengths {
            counts[l as usize] += 1;
        }
        counts[0] = 0;
        let mut left: i32 = 1;
        for &c in &counts[1..] {
            left = (left << 1) - c as i32;
            if left < 0 {
                return Err(StreamFault::Malformed("over-subscribed code"));
            }
        }
        let mut offsets = [0u16; 16];
        for len in 1..15 {
            offsets[len + 1] = offsets[len] + counts[len];
        }
        let mut symbols = vec![0u16; lengths.len()];
        for (sym, &l) in lengths.iter().enumerate() {
            if l != 0 {
                symbols[offsets[l as usize] as usize] = sym as u16;
                offsets[l as usize] += 1;
            }
        }
        Ok(Huffman { counts, symbols })
    }

    fn decode(&self, bits: &mut Bits) -> Result<u16, StreamFault> {
        let (mut code, mut first, mut index) = (0i32, 0i32, 0i32);
        for len in 1..16 {
            code |= bits.read(1)? as i32;
            let count = self.counts[len] as i32;
            if code - count < first {
                return Ok(self.symbols[(index + code - first) as usize]);
            }
            index += count;
            first = (first + count) << 1;
            code <<= 1;
        }
        Err(StreamFault::Malformed("invalid code"))
    }
}

const LENGTH_EXTRA: [u32; 29] = [
    0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0,
];
const DIST_EXTRA: [u32; 30] = [
    0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13,
];
const CODE_LENGTH_ORDER: [usize; 19] = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15];

fn fixed_codes() -> (Huffman, Huffman) {
    let mut lit = [0u8; 288];
    lit[..144].fill(8);
    lit[144..256].fill(9);
    lit[256..280].fill(7);
    lit[280..].fill(8);
    (Huffman::new(&lit).unwrap(), Huffman::new(&[5u8; 30]).unwrap())
}

fn dynamic_codes(bits: &mut Bits) -> Result<(Huffman, Huffman), StreamFault> {
    let nlen = bits.read(5)? as usize + 257;
    let ndist = bits.read(5)? as usize + 1;
    let ncode = bits.read(4)? as usize + 4;
    if nlen > 286 || ndist > 30 {
        return Err(StreamFault::Malformed("bad code counts"));
    }
    let mut cl = [0u8; 19];
    for &i in &CODE_LENGTH_ORDER[..ncode] {
        cl[i] = bits.read(3)? as u8;
    }
    let cl = Huffman::new(&cl)?;
    let mut lengths = Vec::with_capacity(nlen + ndist);
    while lengths.len() < nlen + ndist {
        let sym = cl.decode(bits)?;
        let (value, repeat) = match sym {
            0..=15 => (sym as u8, 1),
            16 => (
                *lengths
                    .last()
                    .ok_or(StreamFault::Malformed("repeat with no previous length"))?,
                3 + bits.read(2)? as usize,
            ),
            17 => (0, 3 + bits.read(3)? as usize),
            _ => (0, 11 + bits.read(7)? as usize),
        };
        if lengths.len() + repeat > nlen + ndist {
            return Err(StreamFault::Malformed("too many lengths"));
        }
        lengths.extend(std::iter::repeat_n(value, repeat));
    }
    if lengths[256] == 0 {
        return Err(StreamFault::Malformed("no end-of-block code"));
    }
    Ok((Huffman::new(&lengths[..nlen])?, Huffman::new(&lengths[nlen..])?))
}

fn codes(bits: &mut Bits, lit: &Huffman, dist: &Huffman) -> Result<(), StreamFault> {
    loop {
        match lit.decode(bits)? {
            0..=255 => {}
            256 => return Ok(()),
            sym => {
                let i = (sym - 257) as usize;
                bits.read(*LENGTH_EXTRA.get(i).ok_or(StreamFault::Malformed("bad length symbol"))?)?;
                let d = dist.decode(bits)? as usize;
                bits.read(*DIST_EXTRA.get(d).ok_or(StreamFault::Malformed("bad distance symbol"))?)?;
            }
        }
    }
}

/// Bit offsets of every padding bit in `raw`, walking the block structure.
pub(crate) fn padding_bits(raw: &[u8]) -> Result<Vec<usize>, StreamFault> {
    let mut bits = Bits::new(raw);
    loop {
        let last = bits.read(1)? == 1;
        match bits.read(2)? {
            0 => {
                bits.align();
                let len = bits.read(16)?;
                let nlen = bits.read(16)?;
                if len != !nlen & 0xffff {
                    return Err(StreamFault::Malformed("stored length check"));
                }
                bits.pos += len as usize;
                if bits.pos > raw.len() {
                    return Err(StreamFault::Truncated);
                }
            }
            1 => {
                let (lit, dist) = fixed_codes();
                codes(&mut bits, &lit, &dist)?;
            }
            2 => {
                let (lit, dist) = dynamic_codes(&mut bits)?;
                codes(&mut bits, &lit, &dist)?;
            }
            _ => return Err(StreamFault::Malformed("reserved block type")),
        }
        if last {
            break;
        }
    }
    bits.align();
    match raw.len() - bits.pos {
        0 => Ok(bits.padding),
        bytes => Err(StreamFault::Trailing { bytes }),
    }
}

/// Walks every block of `raw` and checks that padding bits are zero and
/// nothing follows the final block.
pub fn check_stream(raw: &[u8]) -> Result<(), StreamFault> {
    for bit in padding_bits(raw)? {
        if raw[bit / 8] >> (bit % 8) & 1 == 1 {
            return Err(StreamFault::Padding { byte: bit / 8 });
        }
    }
    Ok(())
}

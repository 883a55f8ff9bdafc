//! Bit-exact entropy-coding backend.
//!
//! A 32-bit range coder with byte-wise renormalization and carry
//! propagation, coding integer symbols against fixed-point cumulative
//! frequency tables (total `2^precision`, precision <= 16, every bucket
//! count >= 1). Each table covers a contiguous integer support plus two
//! tail-escape buckets; escaped symbols are followed by a 32-bit zigzag
//! raw value. The byte output is pinned by shipped test vectors so
//! independent implementations stay interchangeable.
//!
//! The encoder state keeps `range` in `[2^24, 2^32)` between symbols and
//! `low` below `2^33`, so a carry is a single bit absorbed by the cached
//! byte and the pending-0xFF run. The first output byte is always zero and
//! the decoder skips it.
//!
//! The boundary is deliberately narrow: flat symbol slices and flat CDF
//! tables in, bytes out (`encode_flat`), with a pull-based table cursor
//! for autoregressive decoding (`decode_symbols` takes a closure that may
//! inspect previously decoded symbols).

const TOP: u32 = 1 << 24;
const MASK32: u64 = 0xFFFF_FFFF;
pub const RAW_VALUE_BITS: usize = 32;
pub const MAX_PRECISION: u32 = 16;

#[derive(Debug, PartialEq, Eq)]
pub enum CoderError {
    /// Stream ended while the decoder still needed bytes.
    Truncated,
    /// Table violates the cumulative-count invariants.
    InvalidTable(&'static str),
    /// Escape value outside the 32-bit raw range.
    RawValueOverflow(i64),
}

impl std::fmt::Display for CoderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoderError::Truncated => write!(f, "bitstream truncated"),
            CoderError::InvalidTable(why) => write!(f, "invalid cdf table: {why}"),
            CoderError::RawValueOverflow(v) => write!(f, "escape value {v} exceeds raw range"),
        }
    }
}

impl std::error::Error for CoderError {}

/// Integer cumulative table over `[support_min, support_max]` plus two
/// tail-escape buckets (bucket 0 and the last bucket).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    support_min: i64,
    precision: u32,
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Build from per-bucket counts (escape-low, support..., escape-high).
    pub fn from_counts(support_min: i64, precision: u32, counts: &[u32]) -> Result<Self, CoderError> {
        if precision == 0 || precision > MAX_PRECISION {
            return Err(CoderError::InvalidTable("precision out of range"));
        }
        if counts.len() < 3 {
            return Err(CoderError::InvalidTable("need at least one support bucket"));
        }
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc: u64 = 0;
        cdf.push(0);
        for &c in counts {
            if c == 0 {
                return Err(CoderError::InvalidTable("zero-count bucket"));
            }
            acc += u64::from(c);
            cdf.push(acc as u32);
        }
        if acc != 1u64 << precision {
            return Err(CoderError::InvalidTable("counts do not sum to 2^precision"));
        }
        Ok(CdfTable { support_min, precision, cdf })
    }

    pub fn support_min(&self) -> i64 {
        self.support_min
    }

    pub fn support_max(&self) -> i64 {
        self.support_min + self.num_support() as i64 - 1
    }

    /// Number of in-support integers (excludes the two escape buckets).
    pub fn num_support(&self) -> usize {
        self.cdf.len() - 3
    }

    fn total(&self) -> u32 {
        *self.cdf.last().unwrap()
    }

    fn bucket_for(&self, value: i64) -> usize {
        let n = self.num_support() as i64;
        if value < self.support_min {
            0
        } else if value >= self.support_min + n {
            n as usize + 1
        } else {
            (value - self.support_min) as usize + 1
        }
    }

    fn is_escape(&self, bucket: usize) -> bool {
        bucket == 0 || bucket == self.num_support() + 1
    }

    /// Information content of one bucket in bits.
    pub fn bucket_bits(&self, bucket: usize) -> f64 {
        let freq = f64::from(self.cdf[bucket + 1] - self.cdf[bucket]);
        -(freq / f64::from(self.total())).log2()
    }
}

fn zigzag(v: i64) -> u64 {
    if v >= 0 {
        (v as u64) << 1
    } else {
        (((-v) as u64) << 1) - 1
    }
}

fn unzigzag(u: u64) -> i64 {
    if u & 1 == 0 {
        (u >> 1) as i64
    } else {
        -(((u + 1) >> 1) as i64)
    }
}

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, pending: 0, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > MASK32 {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            let byte = 0xFFu8.wrapping_add(carry);
            for _ in 0..self.pending {
                self.out.push(byte);
            }
            self.pending = 0;
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & MASK32;
    }

    /// Encode one bucket of a cumulative table.
    pub fn encode_cdf(&mut self, table: &CdfTable, bucket: usize) {
        let cum = table.cdf[bucket];
        let freq = table.cdf[bucket + 1] - cum;
        let r = self.range / table.total();
        self.low += u64::from(cum) * u64::from(r);
        self.range = freq * r;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encode raw bits, most significant first (bypass coding).
    pub fn encode_bits(&mut self, value: u64, nbits: usize) {
        for i in (0..nbits).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += u64::from(self.range);
            }
            while self.range < TOP {
                self.shift_low();
                self.range <<= 8;
            }
        }
    }

    /// Encode one integer symbol, escaping values outside the support.
    pub fn encode_symbol(&mut self, table: &CdfTable, value: i64) -> Result<(), CoderError> {
        let bucket = table.bucket_for(value);
        self.encode_cdf(table, bucket);
        if table.is_escape(bucket) {
            let u = zigzag(value);
            if u >> RAW_VALUE_BITS != 0 {
                return Err(CoderError::RawValueOverflow(value));
            }
            self.encode_bits(u, RAW_VALUE_BITS);
        }
        Ok(())
    }

    /// Flush the interval state and return the byte payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder { data, pos: 0, range: u32::MAX, code: 0 };
        for _ in 0..5 {
            let b = dec.next_byte()?;
            dec.code = ((u64::from(dec.code) << 8) | u64::from(b)) as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        if self.pos >= self.data.len() {
            return Err(CoderError::Truncated);
        }
        let b = self.data[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_cdf(&mut self, table: &CdfTable) -> Result<usize, CoderError> {
        let total = table.total();
        let r = self.range / total;
        let f = (self.code / r).min(total - 1);
        // binary search: cdf[bucket] <= f < cdf[bucket + 1]
        let (mut lo, mut hi) = (0usize, table.cdf.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if table.cdf[mid] <= f {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cum = table.cdf[lo];
        let freq = table.cdf[lo + 1] - cum;
        self.code -= cum * r;
        self.range = freq * r;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (((u64::from(self.code) << 8) | u64::from(b)) & MASK32) as u32;
            self.range <<= 8;
        }
        Ok(lo)
    }

    pub fn decode_bits(&mut self, nbits: usize) -> Result<u64, CoderError> {
        let mut value: u64 = 0;
        for _ in 0..nbits {
            self.range >>= 1;
            let bit = u64::from(self.code >= self.range);
            if bit == 1 {
                self.code -= self.range;
            }
            value = (value << 1) | bit;
            while self.range < TOP {
                let b = self.next_byte()?;
                self.code = (((u64::from(self.code) << 8) | u64::from(b)) & MASK32) as u32;
                self.range <<= 8;
            }
        }
        Ok(value)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i64, CoderError> {
        let bucket = self.decode_cdf(table)?;
        if table.is_escape(bucket) {
            let u = self.decode_bits(RAW_VALUE_BITS)?;
            Ok(unzigzag(u))
        } else {
            Ok(table.support_min + bucket as i64 - 1)
        }
    }
}

/// Encode `symbols[i]` against `table_of(i)`.
pub fn encode_symbols<'t>(
    symbols: &[i64],
    mut table_of: impl FnMut(usize) -> &'t CdfTable,
) -> Result<Vec<u8>, CoderError> {
    let mut enc = RangeEncoder::new();
    for (i, &v) in symbols.iter().enumerate() {
        enc.encode_symbol(table_of(i), v)?;
    }
    Ok(enc.finish())
}

/// Decode `n` symbols with a pull-based table cursor: `table_of` receives
/// the symbols decoded so far, enabling autoregressive conditioning.
pub fn decode_symbols<'t>(
    data: &[u8],
    n: usize,
    mut table_of: impl FnMut(&[i64]) -> &'t CdfTable,
) -> Result<Vec<i64>, CoderError> {
    let mut dec = RangeDecoder::new(data)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let table = table_of(&out);
        let v = dec.decode_symbol(table)?;
        out.push(v);
    }
    Ok(out)
}

/// Flat-buffer entry point: one concatenated CDF-count buffer, per-table
/// offsets, and a per-symbol table id. Returns the encoded bytes.
pub fn encode_flat(
    symbols: &[i64],
    counts: &[u32],
    offsets: &[usize],
    support_mins: &[i64],
    precisions: &[u32],
    table_ids: &[usize],
) -> Result<Vec<u8>, CoderError> {
    let num_tables = offsets.len() - 1;
    if support_mins.len() != num_tables || precisions.len() != num_tables {
        return Err(CoderError::InvalidTable("metadata length mismatch"));
    }
    let mut tables = Vec::with_capacity(num_tables);
    for t in 0..num_tables {
        tables.push(CdfTable::from_counts(
            support_mins[t],
            precisions[t],
            &counts[offsets[t]..offsets[t + 1]],
        )?);
    }
    encode_symbols(symbols, |i| &tables[table_ids[i]])
}

/// Information-content estimate vs. measured payload size, in bits.
/// Escaped symbols count their escape bucket plus the raw value bits.
pub fn estimated_vs_actual<'t>(
    symbols: &[i64],
    mut table_of: impl FnMut(usize) -> &'t CdfTable,
) -> Result<(f64, usize), CoderError> {
    let mut est = 0.0;
    let mut enc = RangeEncoder::new();
    for (i, &v) in symbols.iter().enumerate() {
        let table = table_of(i);
        let bucket = table.bucket_for(v);
        est += table.bucket_bits(bucket);
        if table.is_escape(bucket) {
            est += RAW_VALUE_BITS as f64;
        }
        enc.encode_symbol(table, v)?;
    }
    Ok((est, enc.finish().len() * 8))
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Little-endian byte sink.
#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend(v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend(v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend(v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend(v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }

    pub fn len_u16(&mut self, n: usize, what: &str) -> Result<()> {
        self.u16(u16::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u16")))?);
        Ok(())
    }

    pub fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))?);
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.len_u16(s.len(), "string length")?;
        self.buf.extend(s.as_bytes());
        Ok(())
    }

    /// Rank, dimensions and values.
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u8(u8::try_from(t.rank()).map_err(|_| Error::Format("tensor rank exceeds u8".into()))?);
        for &d in t.shape() {
            self.len_u32(d, "dimension")?;
        }
        self.f32s(t.data());
        Ok(())
    }

    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated { expected: self.pos.saturating_add(n), found: self.buf.len() });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        Tensor::new(&shape, self.f32s(n)?)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Truncated { expected: self.pos, found: self.buf.len() });
        }
        Ok(())
    }
}

/// Verifies the trailing CRC32 and returns the bytes it covers.
pub(crate) fn checked_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: 4, found: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Checks magic and version at the start of a body.
pub(crate) fn header(r: &mut Reader<'_>, magic: &[u8; 4], version: u16) -> Result<()> {
    let m = r.bytes(4)?;
    if m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(m)
        )));
    }
    let v = r.u16()?;
    if v != version {
        return Err(Error::Version(v));
    }
    Ok(())
}

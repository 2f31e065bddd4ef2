//! Dense row-major tensors and the `NLT1` binary container.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"NLT1";

/// Element type recorded in the `NLT1` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

/// Dense N-dimensional array, last axis fastest.
///
/// Volumetric activations use the `N, C, D, H, W` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(shape_err!("extents must be positive, got {:?}", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Rank(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite element, if any.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{} produced non-finite value {} at flat index {}",
                what, self.data[i], i
            ))),
        }
    }

    /// Extents as `(n, c, d, h, w)`; errors unless rank 5.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        dims5(&self.shape)
    }

    /// Copy of batch element `n` of a rank>=1 tensor, keeping a leading axis of 1.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(shape_err!("batch index {} out of range for {:?}", n, self.shape));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor { shape, data: self.data[n * per..(n + 1) * per].to_vec() })
    }

    /// Concatenate tensors along axis 0. All trailing extents must agree.
    pub fn concat(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err!("cannot concatenate zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(shape_err!("concat mismatch {:?} vs {:?}", t.shape, first.shape));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, dtype: DType) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(shape_err!("rank {} exceeds container limit", self.shape.len()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&[dtype as u8, self.shape.len() as u8])?;
        for &s in &self.shape {
            let s = u32::try_from(s).map_err(|_| shape_err!("extent {} exceeds u32", s))?;
            w.write_all(&s.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        match dtype {
            DType::F32 => self.data.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
        }
        let mut head = [0u8; 2];
        read_exact(r, &mut head)?;
        let dtype = match head[0] {
            1 => DType::F32,
            2 => DType::F64,
            other => return Err(Error::Format(format!("unknown dtype code {}", other))),
        };
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let mut raw = vec![0u8; n * width];
        read_exact(r, &mut raw)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, dtype: DType) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, dtype)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_from(&mut f)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor data".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        &[n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(Error::Rank(format!("expected rank-5 N,C,D,H,W tensor, got {:?}", shape))),
    }
}

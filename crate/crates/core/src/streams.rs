use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// The four acoustic output streams, each with its own output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Mcep,
    Lf0,
    Bap,
    Uv,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Mcep, Stream::Lf0, Stream::Bap, Stream::Uv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Mcep => "mcep",
            Stream::Lf0 => "lf0",
            Stream::Bap => "bap",
            Stream::Uv => "uv",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stream {s:?}")))
    }
}

/// Per-stream output widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub mcep: usize,
    pub lf0: usize,
    pub bap: usize,
    pub uv: usize,
}

impl HeadDims {
    pub fn get(&self, s: Stream) -> usize {
        match s {
            Stream::Mcep => self.mcep,
            Stream::Lf0 => self.lf0,
            Stream::Bap => self.bap,
            Stream::Uv => self.uv,
        }
    }

    pub fn total(&self) -> usize {
        Stream::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

/// One frame sequence per stream, all with the same frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams([Matrix; 4]);

impl Streams {
    pub fn new(mcep: Matrix, lf0: Matrix, bap: Matrix, uv: Matrix) -> Result<Self> {
        let s = Streams([mcep, lf0, bap, uv]);
        let frames = s.0[0].rows();
        for st in Stream::ALL {
            if s[st].rows() != frames {
                return Err(Error::shape(
                    format!("{st} stream frames"),
                    frames,
                    s[st].rows(),
                ));
            }
        }
        Ok(s)
    }

    pub fn zeros(frames: usize, dims: &HeadDims) -> Self {
        Streams(Stream::ALL.map(|s| Matrix::zeros(frames, dims.get(s))))
    }

    pub fn frames(&self) -> usize {
        self.0[0].rows()
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            mcep: self.0[0].cols(),
            lf0: self.0[1].cols(),
            bap: self.0[2].cols(),
            uv: self.0[3].cols(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stream, &Matrix)> {
        Stream::ALL.into_iter().zip(self.0.iter())
    }

    pub fn as_array(&self) -> &[Matrix; 4] {
        &self.0
    }

    pub fn into_array(self) -> [Matrix; 4] {
        self.0
    }

    /// Concatenates frame sequences of several utterances stream by stream.
    pub fn concat<'a, I>(dims: &HeadDims, parts: I) -> Result<Streams>
    where
        I: IntoIterator<Item = &'a Streams> + Clone,
    {
        let mut out = Vec::with_capacity(4);
        for s in Stream::ALL {
            out.push(Matrix::vstack(
                dims.get(s),
                parts.clone().into_iter().map(|p| &p[s]),
            )?);
        }
        let [a, b, c, d]: [Matrix; 4] = out.try_into().expect("four streams");
        Streams::new(a, b, c, d)
    }
}

impl Index<Stream> for Streams {
    type Output = Matrix;

    fn index(&self, s: Stream) -> &Matrix {
        &self.0[s.index()]
    }
}

impl IndexMut<Stream> for Streams {
    fn index_mut(&mut self, s: Stream) -> &mut Matrix {
        &mut self.0[s.index()]
    }
}

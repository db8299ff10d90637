//! Feature-video codec running as a child process.
//!
//! The encoder is invoked as `program [args] --width W --height H --frames E --qp Q`
//! with `E` raw 8-bit grayscale frames on stdin and writes the bitstream to
//! stdout. The decoder takes the same flags, reads the bitstream and writes the
//! raw frames.

use std::io::{Read, Write};
use std::process::{Command, Stdio};

use stgs_core::segment::ExternalCodec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl CodecCommand {
    /// Split a command line on whitespace.
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(String::from);
        Some(Self {
            program: parts.next()?,
            args: parts.collect(),
        })
    }

    fn run(&self, input: &[u8], width: usize, height: usize, frames: usize, qp: u32) -> Result<Vec<u8>, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .args(["--width", &width.to_string(), "--height", &height.to_string()])
            .args(["--frames", &frames.to_string(), "--qp", &qp.to_string()])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", self.program))?;
        let mut stdin = child.stdin.take().unwrap();
        let data = input.to_vec();
        let writer = std::thread::spawn(move || stdin.write_all(&data));
        let mut out = Vec::new();
        child.stdout.take().unwrap().read_to_end(&mut out).map_err(|e| e.to_string())?;
        let mut err = String::new();
        child.stderr.take().unwrap().read_to_string(&mut err).ok();
        let status = child.wait().map_err(|e| e.to_string())?;
        let wrote = writer.join().map_err(|_| "stdin writer panicked".to_string())?;
        if !status.success() {
            return Err(format!("{} exited with {status}: {}", self.program, err.trim()));
        }
        wrote.map_err(|e| format!("writing to {}: {e}", self.program))?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubprocessCodec {
    pub name: String,
    pub encoder: CodecCommand,
    pub decoder: CodecCommand,
}

impl ExternalCodec for SubprocessCodec {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode(&self, frames: &[Vec<u8>], width: usize, height: usize, qp: u32) -> stgs_core::Result<Vec<u8>> {
        self.encoder
            .run(&frames.concat(), width, height, frames.len(), qp)
            .map_err(stgs_core::Error::Usage)
    }

    fn decode(&self, bitstream: &[u8], width: usize, height: usize, frames: usize, qp: u32) -> stgs_core::Result<Vec<Vec<u8>>> {
        let raw = self
            .decoder
            .run(bitstream, width, height, frames, qp)
            .map_err(|reason| stgs_core::Error::Decode { frame: 0, reason })?;
        let px = width * height;
        if raw.len() != px * frames {
            return Err(stgs_core::Error::Decode {
                frame: raw.len() / px.max(1),
                reason: format!("decoder produced {} bytes, expected {}", raw.len(), px * frames),
            });
        }
        Ok(raw.chunks_exact(px).map(<[u8]>::to_vec).collect())
    }
}

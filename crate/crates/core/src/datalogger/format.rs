use std::fs::File;
use std::io::{self, BufReader, ErrorKind, Read};
use std::path::Path;

use crate::envelope::{decode_frame, encode_frame, Frame};

use super::LogError;

pub const LOG_MAGIC: [u8; 8] = *b"MROSLOG1";
const MAGIC_STEM: &[u8] = b"MROSLOG";

/// Bytes one frame occupies in a log: the length prefix plus the frame.
pub fn record_len(frame: &Frame) -> u64 {
    4 + frame.encoded_len() as u64
}

/// Appends one record to `out`.
pub fn encode_record(frame: &Frame, out: &mut Vec<u8>) -> Result<(), LogError> {
    let bytes = encode_frame(frame)?;
    let len = u32::try_from(bytes.len()).map_err(|_| LogError::RecordTooLarge(bytes.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&bytes);
    Ok(())
}

/// Sequential reader over a log. A record cut short by the end of input
/// ends iteration cleanly and is reported by [`LogReader::truncated_tail`].
pub struct LogReader<R> {
    input: R,
    offset: u64,
    truncated: u64,
    done: bool,
}

impl LogReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        LogReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> LogReader<R> {
    /// Checks the file header. Input shorter than the header, if it is a
    /// prefix of it, reads as an empty log.
    pub fn new(mut input: R) -> Result<Self, LogError> {
        let mut magic = [0u8; 8];
        let got = read_up_to(&mut input, &mut magic)?;
        let mut reader = LogReader {
            input,
            offset: got as u64,
            truncated: 0,
            done: false,
        };
        if got < magic.len() {
            if LOG_MAGIC.starts_with(&magic[..got]) {
                reader.truncated = got as u64;
                reader.done = true;
                return Ok(reader);
            }
            return Err(LogError::BadMagic);
        }
        if magic != LOG_MAGIC {
            if magic.starts_with(MAGIC_STEM) {
                return Err(LogError::UnknownVersion(magic[7]));
            }
            return Err(LogError::BadMagic);
        }
        Ok(reader)
    }

    /// Byte offset just past the last record returned.
    pub fn position(&self) -> u64 {
        self.offset
    }

    /// Bytes of an incomplete final record (or header) that were skipped.
    pub fn truncated_tail(&self) -> u64 {
        self.truncated
    }

    fn next_record(&mut self) -> Result<Option<Frame>, LogError> {
        let mut len = [0u8; 4];
        let got = read_up_to(&mut self.input, &mut len)?;
        if got < 4 {
            self.truncated = got as u64;
            return Ok(None);
        }
        let n = u32::from_be_bytes(len) as usize;
        let mut body = Vec::new();
        let got = (&mut self.input).take(n as u64).read_to_end(&mut body)?;
        if got < n {
            self.truncated = 4 + got as u64;
            return Ok(None);
        }
        let frame = decode_frame(&body).map_err(|source| LogError::Corrupt {
            offset: self.offset,
            source,
        })?;
        self.offset += 4 + n as u64;
        Ok(Some(frame))
    }
}

impl<R: Read> Iterator for LogReader<R> {
    type Item = Result<Frame, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Frames of a log, read up to the last complete record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub frames: Vec<Frame>,
    pub truncated_tail: u64,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<LogContents, LogError> {
    read_log_from(BufReader::new(File::open(path)?))
}

pub fn read_log_from(input: impl Read) -> Result<LogContents, LogError> {
    let mut reader = LogReader::new(input)?;
    let frames = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(LogContents {
        frames,
        truncated_tail: reader.truncated_tail(),
    })
}

fn read_up_to(input: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use bytes::Bytes;
    use proptest::prelude::*;

    use super::*;
    use crate::envelope::{Correlation, FrameKind, PayloadType};

    fn frames(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| {
                Frame::new(FrameKind::Data, format!("t/{}", i % 3))
                    .with_payload(PayloadType::Bytes, Bytes::from(vec![i as u8; i * 7 % 50]))
                    .with_correlation(Correlation::from_u128(9))
                    .with_sequence(i as u64 + 1)
            })
            .collect()
    }

    fn log_bytes(fs: &[Frame]) -> Vec<u8> {
        let mut out = LOG_MAGIC.to_vec();
        for f in fs {
            encode_record(f, &mut out).unwrap();
        }
        out
    }

    #[test]
    fn round_trip() {
        let fs = frames(20);
        let bytes = log_bytes(&fs);
        let expected: u64 = 8 + fs.iter().map(|f| 4 + encode_frame(f).unwrap().len() as u64).sum::<u64>();
        assert_eq!(bytes.len() as u64, expected);
        let back = read_log_from(&bytes[..]).unwrap();
        assert_eq!(back.frames, fs);
        assert_eq!(back.truncated_tail, 0);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read_log_from(&b"MROSLOG2"[..]), Err(LogError::UnknownVersion(b'2'))));
        assert!(matches!(read_log_from(&b"NOTALOG!"[..]), Err(LogError::BadMagic)));
        assert!(matches!(read_log_from(&b"XY"[..]), Err(LogError::BadMagic)));
        assert_eq!(read_log_from(&b"MROS"[..]).unwrap().frames, vec![]);
        assert_eq!(read_log_from(&LOG_MAGIC[..]).unwrap().frames, vec![]);
    }

    #[test]
    fn corrupt_record_reports_offset() {
        let fs = frames(3);
        let mut bytes = log_bytes(&fs);
        let second = 8 + record_len(&fs[0]) as usize;
        bytes[second + 4] = b'X';
        match read_log_from(&bytes[..]) {
            Err(LogError::Corrupt { offset, .. }) => assert_eq!(offset, second as u64),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn any_truncation_reads_complete_prefix(cut in 0usize..2000) {
            let fs = frames(30);
            let bytes = log_bytes(&fs);
            let cut = cut.min(bytes.len());
            let back = read_log_from(&bytes[..cut]).unwrap();
            // oracle: count whole records by walking the prefix sums
            let mut end = 8usize;
            let mut complete = 0;
            for f in &fs {
                end += 4 + encode_frame(f).unwrap().len();
                if end <= cut { complete += 1 } else { break }
            }
            prop_assert_eq!(&back.frames[..], &fs[..complete]);
        }
    }
}

//! Typed payload values and their byte encodings.

use std::fmt;

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PayloadType {
    Null = 0,
    Bool = 1,
    Int64 = 2,
    Float64 = 3,
    StringUtf8 = 4,
    Bytes = 5,
    Image = 6,
    Audio = 7,
    VideoChunk = 8,
}

impl PayloadType {
    pub const ALL: [PayloadType; 9] = [
        PayloadType::Null,
        PayloadType::Bool,
        PayloadType::Int64,
        PayloadType::Float64,
        PayloadType::StringUtf8,
        PayloadType::Bytes,
        PayloadType::Image,
        PayloadType::Audio,
        PayloadType::VideoChunk,
    ];

    pub fn from_u8(tag: u8) -> Option<PayloadType> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadType::Null => "NULL",
            PayloadType::Bool => "BOOL",
            PayloadType::Int64 => "INT64",
            PayloadType::Float64 => "FLOAT64",
            PayloadType::StringUtf8 => "STRING_UTF8",
            PayloadType::Bytes => "BYTES",
            PayloadType::Image => "IMAGE",
            PayloadType::Audio => "AUDIO",
            PayloadType::VideoChunk => "VIDEO_CHUNK",
        }
    }

    /// Parses the names printed by [`PayloadType::name`], case-insensitively.
    /// A few short aliases (`int`, `float`, `string`, ...) are accepted too.
    pub fn parse(s: &str) -> Option<PayloadType> {
        let up = s.to_ascii_uppercase();
        let t = match up.as_str() {
            "NULL" => PayloadType::Null,
            "BOOL" => PayloadType::Bool,
            "INT64" | "INT" | "I64" => PayloadType::Int64,
            "FLOAT64" | "FLOAT" | "F64" => PayloadType::Float64,
            "STRING_UTF8" | "STRING" | "STR" => PayloadType::StringUtf8,
            "BYTES" => PayloadType::Bytes,
            "IMAGE" => PayloadType::Image,
            "AUDIO" => PayloadType::Audio,
            "VIDEO_CHUNK" | "VIDEO" => PayloadType::VideoChunk,
            _ => return None,
        };
        Some(t)
    }
}

impl fmt::Display for PayloadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PixelFormat {
    Gray8 = 0,
    Rgb8 = 1,
    Bgr8 = 2,
    Rgba8 = 3,
}

impl PixelFormat {
    fn from_u8(tag: u8) -> Result<PixelFormat, PayloadError> {
        Ok(match tag {
            0 => PixelFormat::Gray8,
            1 => PixelFormat::Rgb8,
            2 => PixelFormat::Bgr8,
            3 => PixelFormat::Rgba8,
            other => return Err(PayloadError::UnknownPixelFormat(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SampleFormat {
    Pcm16Le = 0,
    F32Le = 1,
}

impl SampleFormat {
    fn from_u8(tag: u8) -> Result<SampleFormat, PayloadError> {
        Ok(match tag {
            0 => SampleFormat::Pcm16Le,
            1 => SampleFormat::F32Le,
            other => return Err(PayloadError::UnknownSampleFormat(other)),
        })
    }

    pub fn bytes_per_sample(self) -> usize {
        match self {
            SampleFormat::Pcm16Le => 2,
            SampleFormat::F32Le => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VideoCodec {
    Raw = 0,
    Opaque = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixel_format: PixelFormat,
    pub data: Bytes,
}

impl Image {
    pub const HEADER_LEN: usize = 10;

    pub fn expected_data_len(&self) -> Option<usize> {
        (self.width as usize)
            .checked_mul(self.height as usize)?
            .checked_mul(self.channels as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: u8,
    pub sample_format: SampleFormat,
    pub frame_count: u32,
    pub data: Bytes,
}

impl Audio {
    pub const HEADER_LEN: usize = 10;

    pub fn expected_data_len(&self) -> Option<usize> {
        (self.frame_count as usize)
            .checked_mul(self.channels as usize)?
            .checked_mul(self.sample_format.bytes_per_sample())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoChunk {
    pub codec: VideoCodec,
    pub chunk_index: u32,
    pub keyframe: bool,
    pub data: Bytes,
}

impl VideoChunk {
    pub const HEADER_LEN: usize = 6;
}

/// A value carried by a typed topic, service or action.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int64(i64),
    Float64(f64),
    String(String),
    Bytes(Bytes),
    Image(Image),
    Audio(Audio),
    VideoChunk(VideoChunk),
}

impl Value {
    pub fn payload_type(&self) -> PayloadType {
        match self {
            Value::Null => PayloadType::Null,
            Value::Bool(_) => PayloadType::Bool,
            Value::Int64(_) => PayloadType::Int64,
            Value::Float64(_) => PayloadType::Float64,
            Value::String(_) => PayloadType::StringUtf8,
            Value::Bytes(_) => PayloadType::Bytes,
            Value::Image(_) => PayloadType::Image,
            Value::Audio(_) => PayloadType::Audio,
            Value::VideoChunk(_) => PayloadType::VideoChunk,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&Bytes> {
        match self {
            Value::Bytes(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Float64(v) => write!(f, "{v}"),
            Value::String(v) => write!(f, "{v:?}"),
            Value::Bytes(v) => write!(f, "<{} bytes>", v.len()),
            Value::Image(img) => write!(
                f,
                "<image {}x{}x{} {:?}>",
                img.width, img.height, img.channels, img.pixel_format
            ),
            Value::Audio(a) => write!(
                f,
                "<audio {} Hz, {} ch, {} frames>",
                a.sample_rate, a.channels, a.frame_count
            ),
            Value::VideoChunk(v) => write!(f, "<video chunk {} ({} bytes)>", v.chunk_index, v.data.len()),
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float64(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::String(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::String(v)
    }
}

impl From<Bytes> for Value {
    fn from(v: Bytes) -> Self {
        Value::Bytes(v)
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value::Bytes(Bytes::from(v))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("{ty} payload must be {expected} bytes, got {actual}")]
    WrongLength {
        ty: PayloadType,
        expected: usize,
        actual: usize,
    },
    #[error("{ty} payload needs at least a {header}-byte header, got {actual}")]
    ShortHeader {
        ty: PayloadType,
        header: usize,
        actual: usize,
    },
    #[error("BOOL payload byte must be 0 or 1, got {0}")]
    InvalidBool(u8),
    #[error("STRING_UTF8 payload is not valid UTF-8")]
    InvalidUtf8,
    #[error("image dimensions {width}x{height}x{channels} are degenerate")]
    DegenerateImage { width: u32, height: u32, channels: u8 },
    #[error("audio with zero channels")]
    ZeroAudioChannels,
    #[error("unknown pixel format {0}")]
    UnknownPixelFormat(u8),
    #[error("unknown sample format {0}")]
    UnknownSampleFormat(u8),
    #[error("unknown video codec {0}")]
    UnknownVideoCodec(u8),
    #[error("keyframe byte must be 0 or 1, got {0}")]
    InvalidKeyframe(u8),
    #[error("declared dimensions overflow")]
    DimensionOverflow,
}

pub fn encode_typed_payload(value: &Value) -> Result<(PayloadType, Bytes), PayloadError> {
    let ty = value.payload_type();
    let bytes = match value {
        Value::Null => Bytes::new(),
        Value::Bool(v) => Bytes::copy_from_slice(&[*v as u8]),
        Value::Int64(v) => Bytes::copy_from_slice(&v.to_be_bytes()),
        Value::Float64(v) => Bytes::copy_from_slice(&v.to_be_bytes()),
        Value::String(s) => Bytes::copy_from_slice(s.as_bytes()),
        Value::Bytes(b) => b.clone(),
        Value::Image(img) => {
            check_image(img.width, img.height, img.channels)?;
            let expected = img.expected_data_len().ok_or(PayloadError::DimensionOverflow)?;
            if img.data.len() != expected {
                return Err(PayloadError::WrongLength {
                    ty,
                    expected: Image::HEADER_LEN + expected,
                    actual: Image::HEADER_LEN + img.data.len(),
                });
            }
            let mut buf = BytesMut::with_capacity(Image::HEADER_LEN + expected);
            buf.put_u32(img.width);
            buf.put_u32(img.height);
            buf.put_u8(img.channels);
            buf.put_u8(img.pixel_format as u8);
            buf.put_slice(&img.data);
            buf.freeze()
        }
        Value::Audio(a) => {
            if a.channels == 0 {
                return Err(PayloadError::ZeroAudioChannels);
            }
            let expected = a.expected_data_len().ok_or(PayloadError::DimensionOverflow)?;
            if a.data.len() != expected {
                return Err(PayloadError::WrongLength {
                    ty,
                    expected: Audio::HEADER_LEN + expected,
                    actual: Audio::HEADER_LEN + a.data.len(),
                });
            }
            let mut buf = BytesMut::with_capacity(Audio::HEADER_LEN + expected);
            buf.put_u32(a.sample_rate);
            buf.put_u8(a.channels);
            buf.put_u8(a.sample_format as u8);
            buf.put_u32(a.frame_count);
            buf.put_slice(&a.data);
            buf.freeze()
        }
        Value::VideoChunk(v) => {
            let mut buf = BytesMut::with_capacity(VideoChunk::HEADER_LEN + v.data.len());
            buf.put_u8(v.codec as u8);
            buf.put_u32(v.chunk_index);
            buf.put_u8(v.keyframe as u8);
            buf.put_slice(&v.data);
            buf.freeze()
        }
    };
    Ok((ty, bytes))
}

pub fn decode_typed_payload(ty: PayloadType, bytes: &Bytes) -> Result<Value, PayloadError> {
    let exact = |expected: usize| {
        if bytes.len() == expected {
            Ok(())
        } else {
            Err(PayloadError::WrongLength {
                ty,
                expected,
                actual: bytes.len(),
            })
        }
    };
    let header = |header: usize| {
        if bytes.len() >= header {
            Ok(())
        } else {
            Err(PayloadError::ShortHeader {
                ty,
                header,
                actual: bytes.len(),
            })
        }
    };
    let value = match ty {
        PayloadType::Null => {
            exact(0)?;
            Value::Null
        }
        PayloadType::Bool => {
            exact(1)?;
            match bytes[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(PayloadError::InvalidBool(b)),
            }
        }
        PayloadType::Int64 => {
            exact(8)?;
            Value::Int64(i64::from_be_bytes(bytes[..8].try_into().unwrap()))
        }
        PayloadType::Float64 => {
            exact(8)?;
            Value::Float64(f64::from_be_bytes(bytes[..8].try_into().unwrap()))
        }
        PayloadType::StringUtf8 => Value::String(
            std::str::from_utf8(bytes)
                .map_err(|_| PayloadError::InvalidUtf8)?
                .to_owned(),
        ),
        PayloadType::Bytes => Value::Bytes(bytes.clone()),
        PayloadType::Image => {
            header(Image::HEADER_LEN)?;
            let width = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
            let height = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
            let channels = bytes[8];
            let pixel_format = PixelFormat::from_u8(bytes[9])?;
            check_image(width, height, channels)?;
            let img = Image {
                width,
                height,
                channels,
                pixel_format,
                data: bytes.slice(Image::HEADER_LEN..),
            };
            let expected = img.expected_data_len().ok_or(PayloadError::DimensionOverflow)?;
            exact(Image::HEADER_LEN + expected)?;
            Value::Image(img)
        }
        PayloadType::Audio => {
            header(Audio::HEADER_LEN)?;
            let a = Audio {
                sample_rate: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
                channels: bytes[4],
                sample_format: SampleFormat::from_u8(bytes[5])?,
                frame_count: u32::from_be_bytes(bytes[6..10].try_into().unwrap()),
                data: bytes.slice(Audio::HEADER_LEN..),
            };
            if a.channels == 0 {
                return Err(PayloadError::ZeroAudioChannels);
            }
            let expected = a.expected_data_len().ok_or(PayloadError::DimensionOverflow)?;
            exact(Audio::HEADER_LEN + expected)?;
            Value::Audio(a)
        }
        PayloadType::VideoChunk => {
            header(VideoChunk::HEADER_LEN)?;
            let codec = match bytes[0] {
                0 => VideoCodec::Raw,
                1 => VideoCodec::Opaque,
                other => return Err(PayloadError::UnknownVideoCodec(other)),
            };
            let keyframe = match bytes[5] {
                0 => false,
                1 => true,
                other => return Err(PayloadError::InvalidKeyframe(other)),
            };
            Value::VideoChunk(VideoChunk {
                codec,
                chunk_index: u32::from_be_bytes(bytes[1..5].try_into().unwrap()),
                keyframe,
                data: bytes.slice(VideoChunk::HEADER_LEN..),
            })
        }
    };
    Ok(value)
}

fn check_image(width: u32, height: u32, channels: u8) -> Result<(), PayloadError> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(PayloadError::DegenerateImage {
            width,
            height,
            channels,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(width: u32, height: u32) -> Image {
        Image {
            width,
            height,
            channels: 1,
            pixel_format: PixelFormat::Gray8,
            data: Bytes::from(vec![9u8; (width * height) as usize]),
        }
    }

    #[test]
    fn int64_one_is_big_endian() {
        let (ty, b) = encode_typed_payload(&Value::Int64(1)).unwrap();
        assert_eq!(ty, PayloadType::Int64);
        assert_eq!(b.as_ref(), &[0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn two_by_two_gray_image_is_14_bytes() {
        let (_, b) = encode_typed_payload(&Value::Image(gray(2, 2))).unwrap();
        // width 4 + height 4 + channels 1 + format 1 + 2*2*1 pixels
        assert_eq!(b.len(), 4 + 4 + 1 + 1 + 4);
        assert_eq!(decode_typed_payload(PayloadType::Image, &b).unwrap(), Value::Image(gray(2, 2)));
    }

    #[test]
    fn degenerate_images_rejected() {
        let zero = Image {
            data: Bytes::new(),
            ..gray(1, 1)
        };
        let zero = Image {
            width: 0,
            height: 0,
            ..zero
        };
        assert!(matches!(
            encode_typed_payload(&Value::Image(zero)),
            Err(PayloadError::DegenerateImage { .. })
        ));
        let no_channels = Image {
            channels: 0,
            data: Bytes::new(),
            ..gray(1, 1)
        };
        assert!(encode_typed_payload(&Value::Image(no_channels)).is_err());
        let raw = Bytes::from(vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 0]);
        assert!(matches!(
            decode_typed_payload(PayloadType::Image, &raw),
            Err(PayloadError::DegenerateImage { .. })
        ));
        assert!(encode_typed_payload(&Value::Image(gray(1, 1))).is_ok());
    }

    #[test]
    fn image_data_must_match_dimensions() {
        let mut img = gray(3, 2);
        img.data = Bytes::from(vec![0u8; 5]);
        assert!(matches!(
            encode_typed_payload(&Value::Image(img)),
            Err(PayloadError::WrongLength { .. })
        ));
        let (_, mut good) = encode_typed_payload(&Value::Image(gray(3, 2))).unwrap();
        good.truncate(good.len() - 1);
        assert!(decode_typed_payload(PayloadType::Image, &good).is_err());
    }

    #[test]
    fn unknown_formats_rejected() {
        let (_, b) = encode_typed_payload(&Value::Image(gray(1, 1))).unwrap();
        let mut v = b.to_vec();
        v[9] = 7;
        assert_eq!(
            decode_typed_payload(PayloadType::Image, &Bytes::from(v)),
            Err(PayloadError::UnknownPixelFormat(7))
        );
        let audio = Bytes::from(vec![0, 0, 0x3E, 0x80, 1, 5, 0, 0, 0, 0]);
        assert_eq!(
            decode_typed_payload(PayloadType::Audio, &audio),
            Err(PayloadError::UnknownSampleFormat(5))
        );
    }

    #[test]
    fn audio_length_follows_frames_channels_and_format() {
        let a = Audio {
            sample_rate: 16_000,
            channels: 2,
            sample_format: SampleFormat::F32Le,
            frame_count: 3,
            data: Bytes::from(vec![0u8; 3 * 2 * 4]),
        };
        let (_, b) = encode_typed_payload(&Value::Audio(a.clone())).unwrap();
        assert_eq!(b.len(), 4 + 1 + 1 + 4 + 24);
        assert_eq!(decode_typed_payload(PayloadType::Audio, &b).unwrap(), Value::Audio(a));
    }

    #[test]
    fn scalar_lengths_are_strict() {
        assert!(decode_typed_payload(PayloadType::Int64, &Bytes::from_static(&[0; 7])).is_err());
        assert!(decode_typed_payload(PayloadType::Null, &Bytes::from_static(&[0])).is_err());
        assert_eq!(
            decode_typed_payload(PayloadType::Bool, &Bytes::from_static(&[2])),
            Err(PayloadError::InvalidBool(2))
        );
        assert_eq!(
            decode_typed_payload(PayloadType::StringUtf8, &Bytes::from_static(&[0xC3])),
            Err(PayloadError::InvalidUtf8)
        );
    }
}

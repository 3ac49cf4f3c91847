//! Message envelope, binary wire codec and typed payload encodings.

pub mod control;
mod frame;
mod payload;

pub use frame::{
    decode_frame, decode_frame_prefix, encode_frame, encode_frame_into, read_frame, CodecError,
    Correlation, Flags, Frame, FrameKind, ReadFrameError, HEADER_LEN, MAGIC, MAX_PAYLOAD_LEN,
    MAX_TOPIC_LEN, VERSION,
};
pub use payload::{
    decode_typed_payload, encode_typed_payload, Audio, Image, PayloadError, PayloadType,
    PixelFormat, SampleFormat, Value, VideoChunk, VideoCodec,
};

/// Nanoseconds since the Unix epoch.
pub fn now_nanos() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

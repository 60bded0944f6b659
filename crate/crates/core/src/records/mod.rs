//! Bit-exact on-disk representations of token datasets, loss logs and masks.
//!
//! All files are little-endian. Record order (sample asc, position asc) is the
//! canonical order for every file aligned with a record file.
//!
//! ```text
//! TKCL  magic | version u32 | vocab_size u32 | sample_count u64 | token_count u64
//!       then per token: sample_id u64 | position u32 | token_id u32 | flags u8 | pad u8 x3
//! TKLL  magic | version u32 | model_id (u16 len + bytes) | dataset_digest u64 | entry_count u64
//!       then f32 per token
//! TKMK  magic | version u32 | dataset_digest u64 | token_count u64 | bitset (LSB-first)
//!       | provenance (u32 len + JSON bytes)
//! ```

mod dataset;
mod loss_log;
mod mask;

pub use dataset::{
    decode_records, encode_records, Dataset, SampleView, TokenRecord, RECORD_BYTES,
    RECORD_HEADER_BYTES, RECORD_MAGIC, RECORD_VERSION,
};
pub use loss_log::{align_loss_log, AlignedLog, LossLog, LOSS_MAGIC, LOSS_VERSION};
pub use mask::{align_mask, pack_bits, unpack_bits, Provenance, TokenMask, MASK_MAGIC, MASK_VERSION};

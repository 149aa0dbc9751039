//! Robot/station wire formats, candidate buffering, parameter sync timing and
//! a simulated link.

mod buffer;
mod link;
mod message;
mod sync;

pub use buffer::{BufferedCandidate, CandidateBuffer, DEFAULT_BUFFER_CAPACITY};
pub use link::{Delivered, LinkSchedule, LinkSim};
pub use message::{decode, encode, FrameDecoder, Message, MessageKind, MAX_FRAME_LEN};
pub use sync::{SyncScheduler, DEFAULT_SYNC_PERIOD_MS};

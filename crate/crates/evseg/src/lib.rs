//! Files, checkpoints, reports and the annotation service around
//! [`evseg_core`].
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! DIR/
//!   classes.json            palette (optional; the 11-class driving palette otherwise)
//!   scene_0000/
//!     events.txt            "# width=W height=H" then one "t x y p" line per event
//!     gt.png                8-bit gray class ids, 255 = ignore
//!     labels.json           point-label bundle with one frame
//!     meta.json             target time, seed and the scene description
//!   annotations/            records written by the annotation service
//! ```

pub mod annotate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{Error, Result};

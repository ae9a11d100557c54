//! Image type, PNG I/O, resampling and quality metrics.

mod image;
pub mod metrics;
pub mod png_io;
pub mod resample;

pub use image::Image;
pub use metrics::{psnr, ssim, SSIM_C1};
pub use png_io::{load_png, save_png};
pub use resample::{resize, resize_backward, resize_forward, ResampleMethod, ResizeCache};

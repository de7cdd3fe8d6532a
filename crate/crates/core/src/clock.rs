//! Monotonic timing that degrades to a zero clock on `wasm32-unknown-unknown`,
//! where `std::time::Instant` panics.

#[cfg(not(target_arch = "wasm32"))]
mod imp {
    use std::time::Instant;

    #[derive(Debug, Clone, Copy)]
    pub struct Stopwatch(Instant);

    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch(Instant::now())
        }

        pub fn elapsed_secs(&self) -> f64 {
            self.0.elapsed().as_secs_f64()
        }

        /// Seconds from `self` to `later` (zero if `later` precedes `self`).
        pub fn secs_until(&self, later: &Stopwatch) -> f64 {
            later.0.saturating_duration_since(self.0).as_secs_f64()
        }
    }
}

#[cfg(target_arch = "wasm32")]
mod imp {
    #[derive(Debug, Clone, Copy)]
    pub struct Stopwatch;

    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch
        }

        pub fn elapsed_secs(&self) -> f64 {
            0.0
        }

        pub fn secs_until(&self, _later: &Stopwatch) -> f64 {
            0.0
        }
    }
}

pub use imp::Stopwatch;

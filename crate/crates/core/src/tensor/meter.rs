/// Byte counts at one point of a step's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MeterSnapshot {
    pub live: usize,
    pub peak: usize,
    pub param: usize,
    pub grad: usize,
    pub optimizer_state: usize,
}

/// Tracks bytes held by tensors saved for backward.
///
/// `live` is the sum over undisposed nodes of their saved bytes; `peak` is
/// its running maximum. The parameter, gradient, and optimizer-state figures
/// are per-model constants reported alongside and never enter `live`.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter {
    live: usize,
    peak: usize,
    param: usize,
    grad: usize,
    optimizer_state: usize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_constants(param: usize, grad: usize, optimizer_state: usize) -> Self {
        Self {
            param,
            grad,
            optimizer_state,
            ..Self::default()
        }
    }

    pub fn set_constants(&mut self, param: usize, grad: usize, optimizer_state: usize) {
        self.param = param;
        self.grad = grad;
        self.optimizer_state = optimizer_state;
    }

    pub(crate) fn register(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub(crate) fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.live, "freeing more than live");
        self.live -= bytes;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Restart peak tracking from the current live value.
    pub fn reset_peak(&mut self) {
        self.peak = self.live;
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        MeterSnapshot {
            live: self.live,
            peak: self.peak,
            param: self.param,
            grad: self.grad,
            optimizer_state: self.optimizer_state,
        }
    }
}

/// Mono audio in [-1, 1] with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveformSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        WaveformSignal {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Quantized class indices in `[0, Q-1]`, the unit the model predicts.
pub type ClassSequence = Vec<u16>;

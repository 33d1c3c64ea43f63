use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Pooled map read as a sequence (width = time) into an LSTM; the last
    /// hidden state feeds the classifier.
    Lstm,
    /// Pooled map flattened straight into the classifier.
    Flatten,
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Head::Lstm => "cnn_lstm",
            Head::Flatten => "cnn",
        })
    }
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cnn_lstm" | "cnn+lstm" | "lstm" => Ok(Head::Lstm),
            "cnn" | "flatten" => Ok(Head::Flatten),
            other => Err(format!("unknown head {other:?}")),
        }
    }
}

/// Conv → BN → ReLU → optional dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub dropout: f64,
}

/// Layer stack description. Convolutions are stride 1 with "same" zero
/// padding (the extra row/column of an even kernel goes bottom/right); a
/// single max-pool follows the last block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub head: Head,
    pub input_height: usize,
    pub input_width: usize,
    pub kernel: (usize, usize),
    pub blocks: Vec<ConvBlock>,
    pub pool: (usize, usize),
    pub hidden: usize,
    pub n_classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub forget_bias: f64,
}

impl ModelSpec {
    /// The full-size network: four 2×256 convolution blocks (16, 16, 32, 32
    /// channels, 10% dropout after the first and third), 2×2 max-pool,
    /// LSTM(64), fully connected, log-softmax.
    pub fn full(n_classes: usize) -> Self {
        ModelSpec {
            head: Head::Lstm,
            input_height: 2,
            input_width: 2048,
            kernel: (2, 256),
            blocks: vec![
                ConvBlock {
                    out_channels: 16,
                    dropout: 0.1,
                },
                ConvBlock {
                    out_channels: 16,
                    dropout: 0.0,
                },
                ConvBlock {
                    out_channels: 32,
                    dropout: 0.1,
                },
                ConvBlock {
                    out_channels: 32,
                    dropout: 0.0,
                },
            ],
            pool: (2, 2),
            hidden: 64,
            n_classes,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            forget_bias: 1.0,
        }
    }

    /// Same topology at a width a single CPU core trains in seconds: narrow
    /// 2×8 convolutions, a 2×128 pool (16 LSTM steps) and LSTM(32).
    pub fn desk(n_classes: usize) -> Self {
        ModelSpec {
            kernel: (2, 8),
            blocks: vec![
                ConvBlock {
                    out_channels: 4,
                    dropout: 0.1,
                },
                ConvBlock {
                    out_channels: 4,
                    dropout: 0.0,
                },
                ConvBlock {
                    out_channels: 8,
                    dropout: 0.1,
                },
                ConvBlock {
                    out_channels: 8,
                    dropout: 0.0,
                },
            ],
            pool: (2, 128),
            hidden: 32,
            ..ModelSpec::full(n_classes)
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.out_channels)
    }

    /// `(channels, height, width)` after pooling.
    pub fn pooled_shape(&self) -> (usize, usize, usize) {
        (
            self.last_channels(),
            self.input_height / self.pool.0,
            self.input_width / self.pool.1,
        )
    }

    /// `(input size, sequence length)` of the LSTM.
    pub fn sequence_shape(&self) -> (usize, usize) {
        let (c, h, w) = self.pooled_shape();
        (c * h, w)
    }

    pub fn head_features(&self) -> usize {
        match self.head {
            Head::Lstm => self.hidden,
            Head::Flatten => {
                let (c, h, w) = self.pooled_shape();
                c * h * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.blocks.is_empty() {
            return fail("at least one convolution block is required".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.pool.0 == 0 || self.pool.1 == 0 {
            return fail("kernel and pool dimensions must be positive".into());
        }
        let (_, ph, pw) = self.pooled_shape();
        if ph == 0 || pw == 0 {
            return fail(format!(
                "pool {:?} collapses the {}×{} map",
                self.pool, self.input_height, self.input_width
            ));
        }
        if self
            .blocks
            .iter()
            .any(|b| b.out_channels == 0 || !(0.0..1.0).contains(&b.dropout))
        {
            return fail("block channels must be positive and dropout in [0, 1)".into());
        }
        if self.head == Head::Lstm && self.hidden == 0 {
            return fail("LSTM hidden size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainHyper {
    /// Settings that train the desk model to convergence in a few epochs.
    pub fn desk() -> Self {
        TrainHyper {
            learning_rate: 3e-3,
            epochs: 10,
            ..TrainHyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be ≥ 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid ADAM constants".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_shapes() {
        let s = ModelSpec::full(10);
        s.validate().unwrap();
        assert_eq!(s.pooled_shape(), (32, 1, 1024));
        assert_eq!(s.sequence_shape(), (32, 1024));
        assert_eq!(s.head_features(), 64);
        assert_eq!(s.clone().with_head(Head::Flatten).head_features(), 32 * 1024);
    }

    #[test]
    fn desk_shapes() {
        let s = ModelSpec::desk(10);
        s.validate().unwrap();
        assert_eq!(s.sequence_shape(), (8, 16));
    }

    #[test]
    fn rejects_collapsing_pool() {
        let s = ModelSpec {
            pool: (4, 2),
            ..ModelSpec::full(3)
        };
        assert!(s.validate().is_err());
    }
}

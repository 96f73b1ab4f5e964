"""Multi-scale residual watermark embedding for next-scale-prediction image tokenizers."""

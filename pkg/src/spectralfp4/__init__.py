"""Spectral-domain FP4 quantization: NVFP4 emulation, low-rank + residual
splitting of GeMM operands, and a desk-scale training harness."""

__version__ = "0.1.0"

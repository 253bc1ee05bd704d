"""Synthetic and tiny-text datasets for desk-scale runs.

Batches are pure functions of ``(seed, step)`` so every regime sees the same
data stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _orthonormal_columns(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    return q[:, :count]


def ar_latents(rng: np.random.Generator, batch: int, seq_len: int, dim: int, rho: float) -> np.ndarray:
    """Unit-variance AR(1) latents, shape ``(batch * seq_len, dim)``."""
    z = np.empty((batch, seq_len, dim))
    z[:, 0] = rng.standard_normal((batch, dim))
    innov = np.sqrt(1 - rho**2)
    for t in range(1, seq_len):
        z[:, t] = rho * z[:, t - 1] + innov * rng.standard_normal((batch, dim))
    return z.reshape(batch * seq_len, dim)


@dataclass(frozen=True)
class PlantedRegression:
    """Regression data whose inputs and targets have planted anisotropic spectra.

    Inputs mix a few strong latent directions with many weak ones; the target
    reads both groups, so the weak input directions carry real information.
    A handful of output directions carry large unpredictable noise, which
    makes the output-gradient spectrum anisotropic as well. With
    ``strong_channels > 0`` the strong directions live on that many input
    channels, mimicking outlier features.
    """

    d_in: int
    d_out: int
    seq_len: int = 8
    seed: int = 0
    n_strong: int = 1
    n_weak: int = 24
    strong_scale: float = 20.0
    weak_scale: float = 1.0
    input_noise: float = 0.02
    target_strong: float = 1.0
    target_weak: float = 1.0
    n_noisy_outputs: int = 2
    output_noise: float = 1.0
    target_noise: float = 0.05
    rho: float = 0.9
    strong_channels: int = 0

    def __post_init__(self):
        if self.n_strong + self.n_weak > self.d_in:
            raise ValueError(f"{self.n_strong + self.n_weak} latent directions do not fit in d_in={self.d_in}")
        if self.strong_channels and self.strong_channels + self.n_weak > self.d_in:
            raise ValueError("outlier channels leave too little room for the weak directions")

    def _planted(self):
        rng = np.random.default_rng([self.seed, 7919])
        c = _orthonormal_columns(rng, self.d_in, self.n_strong + self.n_weak)
        if self.strong_channels:
            # Concentrate the strong directions on a few outlier channels.
            chans = rng.choice(self.d_in, size=self.strong_channels, replace=False)
            sparse = np.zeros((self.d_in, self.n_strong))
            sparse[chans] = rng.standard_normal((self.strong_channels, self.n_strong))
            weak = c[:, self.n_strong:]
            weak[chans] = 0.0
            c = np.linalg.qr(np.concatenate([sparse, weak], axis=1))[0]
        f_strong = rng.standard_normal((self.d_out, self.n_strong)) / np.sqrt(self.n_strong + self.n_weak)
        f_weak = rng.standard_normal((self.d_out, self.n_weak)) / np.sqrt(self.n_strong + self.n_weak)
        noisy = _orthonormal_columns(rng, self.d_out, max(self.n_noisy_outputs, 1))[:, :self.n_noisy_outputs]
        return c, f_strong, f_weak, noisy

    def batch(self, step: int, n_seq: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
        c, f_strong, f_weak, noisy = self._planted()
        rng = np.random.default_rng([self.seed, stream, step])
        dim = self.n_strong + self.n_weak
        z = ar_latents(rng, n_seq, self.seq_len, dim, self.rho)
        zs, zw = z[:, :self.n_strong], z[:, self.n_strong:]
        scales = np.r_[np.full(self.n_strong, self.strong_scale), np.full(self.n_weak, self.weak_scale)]
        x = (z * scales) @ c.T + self.input_noise * rng.standard_normal((z.shape[0], self.d_in))
        t = self.target_strong * zs @ f_strong.T + self.target_weak * zw @ f_weak.T
        if self.n_noisy_outputs:
            t = t + self.output_noise * rng.standard_normal((z.shape[0], self.n_noisy_outputs)) @ noisy.T * np.sqrt(self.d_out)
        t = t + self.target_noise * rng.standard_normal(t.shape)
        return x, t


@dataclass(frozen=True)
class PlantedTokens:
    """Token sequences emitted from a low-rank linear-autoregressive latent."""

    vocab: int
    seq_len: int
    seed: int = 0
    latent_dim: int = 4
    rho: float = 0.95
    temperature: float = 0.5

    def _emission(self):
        rng = np.random.default_rng([self.seed, 104729])
        return rng.standard_normal((self.vocab, self.latent_dim))

    def batch(self, step: int, n_seq: int, stream: int = 0) -> np.ndarray:
        emit = self._emission()
        rng = np.random.default_rng([self.seed, stream, step])
        z = ar_latents(rng, n_seq, self.seq_len + 1, self.latent_dim, self.rho)
        logits = z @ emit.T / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random((p.shape[0], 1))
        tokens = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), self.vocab - 1)
        return tokens.reshape(n_seq, self.seq_len + 1)


BUILTIN_TEXT = (
    "It is a truth universally acknowledged, that a single man in possession of a good "
    "fortune, must be in want of a wife. However little known the feelings or views of "
    "such a man may be on his first entering a neighbourhood, this truth is so well fixed "
    "in the minds of the surrounding families, that he is considered the rightful property "
    "of some one or other of their daughters. "
    "Call me Ishmael. Some years ago, never mind how long precisely, having little or no "
    "money in my purse, and nothing particular to interest me on shore, I thought I would "
    "sail about a little and see the watery part of the world. "
    "It was the best of times, it was the worst of times, it was the age of wisdom, it was "
    "the age of foolishness, it was the epoch of belief, it was the epoch of incredulity, "
    "it was the season of Light, it was the season of Darkness. "
)


@dataclass(frozen=True)
class ByteCorpus:
    """Byte-level language-model windows cut from a small text."""

    text: str
    seq_len: int
    seed: int = 0
    vocab: int = 256

    @classmethod
    def from_file(cls, path: str, seq_len: int, seed: int = 0) -> "ByteCorpus":
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read(), seq_len, seed)

    def batch(self, step: int, n_seq: int, stream: int = 0) -> np.ndarray:
        data = np.frombuffer(self.text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        if data.size <= self.seq_len + 1:
            raise ValueError("corpus shorter than one window")
        rng = np.random.default_rng([self.seed, stream, step])
        starts = rng.integers(0, data.size - self.seq_len - 1, size=n_seq)
        return np.stack([data[s:s + self.seq_len + 1] for s in starts])

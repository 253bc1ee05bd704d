"""Tiny models with hand-written backward passes.

Only the linear projections run through a GeMM engine; everything else
(activations, layer norm, attention core, embeddings, LM head) is float64.
"""

from __future__ import annotations

import math

import numpy as np

from ..engine import MetisWeight, WeightGrads, apply_updates
from ..precision import EmulatedFormat, bf16


class Linear:
    """A bias-free projection ``y = x @ W`` routed through ``engine``."""

    def __init__(self, name: str, weight: MetisWeight, engine, layer_id: int):
        self.name = name
        self.weight = weight
        self.engine = engine
        self.layer_id = layer_id
        self.grads: WeightGrads | None = None
        self._ctx = None
        self.last_input: np.ndarray | None = None

    def forward(self, x: np.ndarray, key: tuple[int, ...]) -> np.ndarray:
        self.last_input = x
        y, self._ctx = self.engine.forward(x, self.weight, key=(*key, self.layer_id))
        return y

    def backward(self, d: np.ndarray) -> np.ndarray:
        dx, self.grads = self.engine.backward(d, self._ctx)
        self._ctx = None
        return dx

    def step(self, optimizer, step: int, master_format: EmulatedFormat) -> None:
        self.weight = apply_updates(self.weight, self.grads, optimizer=optimizer, name=self.name,
                                    step=step, master_format=master_format)


class Model:
    linears: list[Linear]
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def step(self, optimizer, step: int, master_format: EmulatedFormat) -> None:
        if hasattr(optimizer, "begin_step"):
            optimizer.begin_step()
        for lin in self.linears:
            lin.step(optimizer, step, master_format)
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                from ..engine import DivergenceError
                raise DivergenceError(f"non-finite gradient {name}", step)
            self.params[name] = optimizer.update(name, self.params[name], g)


class MLP(Model):
    """Two-layer ReLU network trained with squared error."""

    def __init__(self, d_in: int, hidden: int, d_out: int, make_weight, make_engine):
        self.linears = [
            Linear("fc1", make_weight("fc1", d_in, hidden), make_engine("fc1", d_in, hidden), 0),
            Linear("fc2", make_weight("fc2", hidden, d_out), make_engine("fc2", hidden, d_out), 1),
        ]
        self.params, self.grads = {}, {}

    def forward(self, x: np.ndarray, key: tuple[int, ...]) -> np.ndarray:
        h = self.linears[0].forward(x, key)
        self._mask = h > 0
        return self.linears[1].forward(h * self._mask, key)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        da = self.linears[1].backward(dy)
        return self.linears[0].backward(da * self._mask)

    def loss_and_grad(self, x, target, key) -> tuple[float, np.ndarray]:
        y = self.forward(x, key)
        err = y - target
        # Seed is the gradient of the summed squared error; see README on scaling.
        return float(np.mean(err**2)), 2.0 * err


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1 + t) + 0.5 * x * (1 - t**2) * _GELU_C * (1 + 3 * 0.044715 * x**2)


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) / sd
    return xhat * g + b, (xhat, sd, g)


def layer_norm_backward(dy, cache):
    xhat, sd, g = cache
    dxhat = dy * g
    dx = (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)) / sd
    return dx, (dy * xhat).sum(0), dy.sum(0)


class TinyTransformer(Model):
    """Pre-LN causal decoder. QKV, attention output and both FFN projections
    are engine GeMMs; scores and softmax stay out of FP4."""

    def __init__(self, vocab: int, d_model: int, d_ff: int, n_layers: int, n_heads: int,
                 seq_len: int, make_weight, make_engine, seed: int = 0):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        rng = np.random.default_rng([seed, 31337])
        self.vocab, self.d, self.h, self.s = vocab, d_model, n_heads, seq_len
        self.params = {
            "tok_emb": rng.standard_normal((vocab, d_model)) * 0.02,
            "pos_emb": rng.standard_normal((seq_len, d_model)) * 0.02,
            "lnf_g": np.ones(d_model), "lnf_b": np.zeros(d_model),
            "head": rng.standard_normal((d_model, vocab)) / math.sqrt(d_model),
        }
        self.linears = []
        self.blocks = []
        for i in range(n_layers):
            names = {
                "qkv": (d_model, 3 * d_model), "attn_out": (d_model, d_model),
                "ffn1": (d_model, d_ff), "ffn2": (d_ff, d_model),
            }
            block = {}
            for role, (m, n) in names.items():
                name = f"block{i}.{role}"
                lin = Linear(name, make_weight(name, m, n), make_engine(name, m, n), len(self.linears))
                self.linears.append(lin)
                block[role] = lin
            for ln in ("ln1", "ln2"):
                self.params[f"block{i}.{ln}_g"] = np.ones(d_model)
                self.params[f"block{i}.{ln}_b"] = np.zeros(d_model)
            self.blocks.append(block)
        self.grads = {}

    def _attention(self, qkv: np.ndarray, b: int):
        s, h, d = self.s, self.h, self.d
        dh = d // h
        q, k, v = (a.reshape(b, s, h, dh).transpose(0, 2, 1, 3) for a in np.split(qkv, 3, axis=1))
        scores = bf16(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
        scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
        scores -= scores.max(-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(-1, keepdims=True)
        out = bf16(att @ v)
        return out.transpose(0, 2, 1, 3).reshape(b * s, d), (q, k, v, att)

    def _attention_backward(self, dout: np.ndarray, cache, b: int) -> np.ndarray:
        q, k, v, att = cache
        s, h, d = self.s, self.h, self.d
        dh = d // h
        do = dout.reshape(b, s, h, dh).transpose(0, 2, 1, 3)
        dv = att.transpose(0, 1, 3, 2) @ do
        datt = do @ v.transpose(0, 1, 3, 2)
        dscores = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        merge = lambda a: a.transpose(0, 2, 1, 3).reshape(b * s, d)
        return np.concatenate([merge(dq), merge(dk), merge(dv)], axis=1)

    def forward(self, tokens: np.ndarray, key: tuple[int, ...]) -> np.ndarray:
        b, s = tokens.shape
        if s != self.s:
            raise ValueError(f"expected sequences of {self.s} tokens, got {s}")
        p = self.params
        x = (p["tok_emb"][tokens] + p["pos_emb"][None]).reshape(b * s, self.d)
        self._cache = {"tokens": tokens, "b": b, "blocks": []}
        for i, blk in enumerate(self.blocks):
            c = {}
            h1, c["ln1"] = layer_norm(x, p[f"block{i}.ln1_g"], p[f"block{i}.ln1_b"])
            att, c["att"] = self._attention(blk["qkv"].forward(h1, key), b)
            x = x + blk["attn_out"].forward(att, key)
            h2, c["ln2"] = layer_norm(x, p[f"block{i}.ln2_g"], p[f"block{i}.ln2_b"])
            pre = blk["ffn1"].forward(h2, key)
            c["pre"] = pre
            x = x + blk["ffn2"].forward(gelu(pre), key)
            self._cache["blocks"].append(c)
        hf, self._cache["lnf"] = layer_norm(x, p["lnf_g"], p["lnf_b"])
        self._cache["hf"] = hf
        return hf @ p["head"]

    def backward(self, dlogits: np.ndarray) -> None:
        p, c = self.params, self._cache
        b = c["b"]
        g = {}
        g["head"] = c["hf"].T @ dlogits
        dx, g["lnf_g"], g["lnf_b"] = layer_norm_backward(dlogits @ p["head"].T, c["lnf"])
        for i in reversed(range(len(self.blocks))):
            blk, bc = self.blocks[i], c["blocks"][i]
            dpre = blk["ffn2"].backward(dx) * gelu_grad(bc["pre"])
            dh2 = blk["ffn1"].backward(dpre)
            dln, g[f"block{i}.ln2_g"], g[f"block{i}.ln2_b"] = layer_norm_backward(dh2, bc["ln2"])
            dx = dx + dln
            datt = blk["attn_out"].backward(dx)
            dh1 = blk["qkv"].backward(self._attention_backward(datt, bc["att"], b))
            dln, g[f"block{i}.ln1_g"], g[f"block{i}.ln1_b"] = layer_norm_backward(dh1, bc["ln1"])
            dx = dx + dln
        dx = dx.reshape(b, self.s, self.d)
        g["pos_emb"] = dx.sum(0)
        demb = np.zeros_like(p["tok_emb"])
        np.add.at(demb, c["tokens"], dx)
        g["tok_emb"] = demb
        self.grads = g

    def loss_and_grad(self, tokens, _target, key) -> tuple[float, np.ndarray]:
        inp, tgt = tokens[:, :-1], tokens[:, 1:].reshape(-1)
        logits = self.forward(inp, key)
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(tgt.size), tgt].mean())
        grad = np.exp(logp)
        grad[np.arange(tgt.size), tgt] -= 1.0
        return loss, grad

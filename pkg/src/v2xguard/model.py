"""Causal pre-norm transformer decoder for next-step relative kinematics."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import LN_EPS, Tape, Tensor, causal_mask, dropout_rng

Weights = "OrderedDict[str, np.ndarray]"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    heads: int = 8
    key_dim: int = 16
    ffn_dim: int = 256
    blocks: int = 3
    dropout: float = 0.1
    window: int = 10
    features: int = 8
    positional: str = "sinusoidal"
    ln_eps: float = LN_EPS

    def __post_init__(self) -> None:
        if self.heads * self.key_dim != self.d_model:
            raise ValueError(f"heads*key_dim ({self.heads}*{self.key_dim}) must equal d_model ({self.d_model})")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal encoding")
        if self.positional != "sinusoidal":
            raise ValueError(f"unsupported positional encoding {self.positional!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> OrderedDict[str, tuple[int, ...]]:
    d, f, n = cfg.d_model, cfg.ffn_dim, cfg.features
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["input.w"] = (n, d)
    shapes["input.b"] = (d,)
    for i in range(cfg.blocks):
        p = f"block{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (d, d)
            shapes[p + f"attn.b{proj}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, n)
    shapes["head.b"] = (n,)
    return shapes


def parameter_audit(weights) -> OrderedDict[str, int]:
    """Scalar counts grouped as input / block<i> / final_ln / head."""
    groups: OrderedDict[str, int] = OrderedDict()
    for name, w in weights.items():
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + int(np.prod(w.shape))
    return groups


def count_parameters(weights) -> int:
    return sum(int(np.prod(w.shape)) for w in weights.values())


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> OrderedDict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    weights: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if ".ln" in f".{name}" or name.startswith("final_ln"):
            value = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif leaf.startswith("w"):
            value = _truncated_normal(rng, shape, std)
        else:
            value = np.zeros(shape)
        weights[name] = value.astype(np.float32)
    return weights


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError("d_model must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class DecoderModel:
    """Forward computation over a tape for a given weight set.

    Dropout streams are keyed by (seed, step, site) so a training step is
    reproducible from its step counter alone.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._pe = positional_encoding(config.window, config.d_model)
        self._masks: dict[tuple[int, str], np.ndarray] = {}

    def _mask(self, length: int, dtype) -> np.ndarray:
        key = (length, np.dtype(dtype).str)
        if key not in self._masks:
            self._masks[key] = causal_mask(length, dtype)
        return self._masks[key]

    def bind(self, tape: Tape, weights) -> dict[str, Tensor]:
        return {k: tape.param(v, name=k) if tape.record else tape.const(v, name=k) for k, v in weights.items()}

    def _embed(self, tape: Tape, p: dict[str, Tensor], x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 3 or x.shape[2] != cfg.features or x.shape[1] > cfg.window:
            raise ValueError(f"expected input of shape (batch, <= {cfg.window}, {cfg.features}), got {x.shape}")
        h = tape.linear(x, p["input.w"], p["input.b"])
        pe = tape.const(self._pe[: x.shape[1]])
        return tape.add(h, pe)

    def _attention(self, tape, p, prefix, h_norm, query_rows, train, rngs):
        cfg = self.config
        q = tape.linear(query_rows, p[prefix + "attn.wq"], p[prefix + "attn.bq"])
        k = tape.linear(h_norm, p[prefix + "attn.wk"], p[prefix + "attn.bk"])
        v = tape.linear(h_norm, p[prefix + "attn.wv"], p[prefix + "attn.bv"])
        qh = tape.split_heads(q, cfg.heads)
        kh = tape.split_heads(k, cfg.heads)
        vh = tape.split_heads(v, cfg.heads)
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(cfg.key_dim))
        t_q, t_k = q.shape[1], k.shape[1]
        # query row j sits at absolute position t_k - t_q + j
        mask = self._mask(t_k, tape.dtype)[t_k - t_q :]
        att = tape.softmax(scores, mask)
        att = tape.dropout(att, cfg.dropout, train, rngs(0))
        ctx = tape.merge_heads(tape.matmul(att, vh), cfg.heads)
        out = tape.linear(ctx, p[prefix + "attn.wo"], p[prefix + "attn.bo"])
        return tape.dropout(out, cfg.dropout, train, rngs(1))

    def _ffn(self, tape, p, prefix, h, train, rngs):
        cfg = self.config
        f = tape.layer_norm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"], cfg.ln_eps)
        f = tape.gelu(tape.linear(f, p[prefix + "ffn.w1"], p[prefix + "ffn.b1"]))
        f = tape.linear(f, p[prefix + "ffn.w2"], p[prefix + "ffn.b2"])
        return tape.add(h, tape.dropout(f, cfg.dropout, train, rngs(2)))

    def _block(self, tape, p, i, h, train, seed, step, last_only=False):
        prefix = f"block{i}."

        def rngs(site):
            return dropout_rng(seed, step, 3 * i + site) if train else None

        a = tape.layer_norm(h, p[prefix + "ln1.g"], p[prefix + "ln1.b"], self.config.ln_eps)
        if last_only:
            t = h.shape[1]
            query = tape.reshape(tape.take(a, t - 1), (h.shape[0], 1, h.shape[2]))
            resid = tape.reshape(tape.take(h, t - 1), (h.shape[0], 1, h.shape[2]))
        else:
            query, resid = a, h
        h = tape.add(resid, self._attention(tape, p, prefix, a, query, train, rngs))
        return self._ffn(tape, p, prefix, h, train, rngs)

    def hidden_states(self, tape: Tape, p: dict[str, Tensor], x: Tensor, train=False, seed=0, step=0) -> list[Tensor]:
        """Residual stream after the embedding and after every block, all positions."""
        h = self._embed(tape, p, x)
        states = [h]
        for i in range(self.config.blocks):
            h = self._block(tape, p, i, h, train, seed, step)
            states.append(h)
        return states

    def forward(self, tape: Tape, p: dict[str, Tensor], x: Tensor, train=False, seed=0, step=0) -> Tensor:
        """(B, T, features) -> (B, features) prediction of the next step.

        Only the final position is read out, so the last block evaluates its
        query, residual and feed-forward path at that position alone.
        """
        h = self._embed(tape, p, x)
        n = self.config.blocks
        for i in range(n):
            h = self._block(tape, p, i, h, train, seed, step, last_only=(i == n - 1))
        h = tape.take(h, h.shape[1] - 1)
        h = tape.layer_norm(h, p["final_ln.g"], p["final_ln.b"], self.config.ln_eps)
        return tape.linear(h, p["head.w"], p["head.b"])

    def predict(self, weights, inputs: np.ndarray, batch_size: int = 2048, dtype=np.float32) -> np.ndarray:
        """Inference (dropout off) over an (N, T, features) array."""
        out = np.zeros((inputs.shape[0], self.config.features), dtype=np.float64)
        tape = Tape(dtype, record=False)
        p = self.bind(tape, weights)
        for start in range(0, inputs.shape[0], batch_size):
            xb = tape.const(inputs[start : start + batch_size])
            out[start : start + batch_size] = self.forward(tape, p, xb).data
        return out

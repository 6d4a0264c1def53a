"""Block-causal transformer denoiser.

Attention is fully bidirectional inside each fixed-size block and causal
across blocks, so logits at a position depend only on its own and earlier
blocks. The predictor conditions on the partially masked sequence alone;
the mask pattern itself carries the time information. Architecture:
pre-norm, learned positional embeddings, GELU MLP, zero-initialized output
projection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, CorruptRecordError, DimensionError, DomainError
from .numcore import Tensor

_MAGIC = b"BCDN"
_VERSION = 1
_CFG_FIELDS = (
    "vocab_size",
    "mask_id",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_len",
    "block_size",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    mask_id: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_len: int
    block_size: int

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.d_ff, self.max_len, self.block_size) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0 <= self.mask_id < self.vocab_size:
            raise ConfigError("mask_id must be a valid token id")
        if self.max_len % self.block_size != 0:
            raise ConfigError("max_len must be divisible by block_size")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class DenoiserParams:
    """All learnable weights, as a name -> Tensor mapping plus the config."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def copy(self, requires_grad: bool = True) -> "DenoiserParams":
        return DenoiserParams(
            self.cfg,
            {k: v.copy(requires_grad=requires_grad) for k, v in self.tensors.items()},
        )

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def allclose(self, other: "DenoiserParams") -> bool:
        return self.cfg == other.cfg and all(
            np.array_equal(v.data, other.tensors[k].data) for k, v in self.items()
        )


def init_params(cfg: ModelConfig, seed: int) -> DenoiserParams:
    """Scaled-normal init (std 0.02); output projection starts at zero so the
    initial logits are identical (zero) at every position."""
    rng = np.random.default_rng(seed)
    std = 0.02

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    t: dict[str, Tensor] = {}
    t["token_emb"] = normal(cfg.vocab_size, cfg.d_model)
    t["pos_emb"] = normal(cfg.max_len, cfg.d_model)
    for li in range(cfg.n_layers):
        p = f"layer{li}."
        t[p + "ln1.g"] = ones(cfg.d_model)
        t[p + "ln1.b"] = zeros(cfg.d_model)
        t[p + "attn.wq"] = normal(cfg.d_model, cfg.d_model)
        t[p + "attn.wk"] = normal(cfg.d_model, cfg.d_model)
        t[p + "attn.wv"] = normal(cfg.d_model, cfg.d_model)
        t[p + "attn.wo"] = normal(cfg.d_model, cfg.d_model)
        t[p + "ln2.g"] = ones(cfg.d_model)
        t[p + "ln2.b"] = zeros(cfg.d_model)
        t[p + "mlp.w1"] = normal(cfg.d_model, cfg.d_ff)
        t[p + "mlp.b1"] = zeros(cfg.d_ff)
        t[p + "mlp.w2"] = normal(cfg.d_ff, cfg.d_model)
        t[p + "mlp.b2"] = zeros(cfg.d_model)
    t["ln_f.g"] = ones(cfg.d_model)
    t["ln_f.b"] = zeros(cfg.d_model)
    t["out_proj"] = zeros(cfg.d_model, cfg.vocab_size)
    return DenoiserParams(cfg, t)


def block_attention_mask(length: int, block_size: int) -> np.ndarray:
    """Boolean LxL matrix: i may attend to j iff block(j) <= block(i)."""
    if block_size < 1 or length % block_size != 0:
        raise DimensionError(
            f"block_size {block_size} must divide sequence length {length}"
        )
    blocks = np.arange(length) // block_size
    return blocks[None, :] <= blocks[:, None]


def _validate_tokens(cfg: ModelConfig, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DomainError("token id out of vocabulary range")
    length = ids.shape[-1]
    if length > cfg.max_len:
        raise ConfigError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    if length % cfg.block_size != 0:
        raise DimensionError("sequence length must be a multiple of block_size")


def forward_logits_batch(params: DenoiserParams, tokens) -> Tensor:
    """Logits over the vocabulary at every position, for a [N, L] batch."""
    cfg = params.cfg
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError("forward_logits_batch expects a [N, L] batch")
    _validate_tokens(cfg, ids)
    n, length = ids.shape
    t = params.tensors

    pos = np.broadcast_to(np.arange(length), (n, length))
    h = nc.add(nc.embedding(t["token_emb"], ids), nc.embedding(t["pos_emb"], pos))

    allow = block_attention_mask(length, cfg.block_size)
    nh, hd = cfg.n_heads, cfg.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)

    for li in range(cfg.n_layers):
        p = f"layer{li}."
        a = nc.layer_norm(h, t[p + "ln1.g"], t[p + "ln1.b"])
        q = nc.matmul(a, t[p + "attn.wq"])
        k = nc.matmul(a, t[p + "attn.wk"])
        v = nc.matmul(a, t[p + "attn.wv"])
        # [N, L, d] -> [N, nh, L, hd]
        q = nc.transpose(nc.reshape(q, (n, length, nh, hd)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(k, (n, length, nh, hd)), (0, 2, 1, 3))
        v = nc.transpose(nc.reshape(v, (n, length, nh, hd)), (0, 2, 1, 3))
        scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        attn = nc.masked_softmax(scores, allow)
        ctx = nc.matmul(attn, v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (n, length, cfg.d_model))
        h = nc.add(h, nc.matmul(ctx, t[p + "attn.wo"]))

        a2 = nc.layer_norm(h, t[p + "ln2.g"], t[p + "ln2.b"])
        hidden = nc.gelu(nc.add(nc.matmul(a2, t[p + "mlp.w1"]), t[p + "mlp.b1"]))
        h = nc.add(h, nc.add(nc.matmul(hidden, t[p + "mlp.w2"]), t[p + "mlp.b2"]))

    h = nc.layer_norm(h, t["ln_f.g"], t["ln_f.b"])
    return nc.matmul(h, t["out_proj"])


def forward_logits(
    params: DenoiserParams, tokens, cfg: ModelConfig | None = None
) -> Tensor:
    """Logits [L, V] for a single sequence."""
    if cfg is not None and cfg != params.cfg:
        raise ConfigError("config does not match the one the params were built with")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("forward_logits expects a single token sequence")
    out = forward_logits_batch(params, ids[None, :])
    return nc.reshape(out, (ids.shape[0], params.cfg.vocab_size))


def sequence_log_prob(params: DenoiserParams, x_t, x_0, positions) -> Tensor:
    """Sum over `positions` of log p(x_0[i] | x_t); differentiable in params.

    Every position must be masked in x_t (the predictor only defines a
    denoising distribution there).
    """
    xt = np.asarray(x_t, dtype=np.int64)
    x0 = np.asarray(x_0, dtype=np.int64)
    pos = np.asarray(sorted(positions), dtype=np.int64)
    if pos.size == 0:
        return nc.constant(0.0)
    if xt.shape != x0.shape:
        raise ContractError("x_t and x_0 must have the same length")
    if pos.min() < 0 or pos.max() >= xt.shape[0]:
        raise ContractError("position out of range")
    if np.any(xt[pos] != params.cfg.mask_id):
        raise ContractError("all positions must be masked in x_t")
    lsm = nc.log_softmax(forward_logits(params, xt))
    return nc.gather_sum(lsm, (pos, x0[pos]))


# ---------------------------------------------------------------------------
# checkpoint format: header (magic, version, config) then named raw tensors
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: DenoiserParams) -> None:
    cfg = params.cfg
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<8I", *(getattr(cfg, name) for name in _CFG_FIELDS)))
        f.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            f.write(tensor.data.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path, requires_grad: bool = True) -> DenoiserParams:
    path = Path(path)
    blob = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CorruptRecordError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise CorruptRecordError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CorruptRecordError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(**dict(zip(_CFG_FIELDS, struct.unpack("<8I", take(32)))))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims)
        tensors[name] = Tensor(data.copy(), requires_grad=requires_grad)
    if off != len(blob):
        raise CorruptRecordError(f"{path}: trailing bytes after last tensor")
    return DenoiserParams(cfg, tensors)

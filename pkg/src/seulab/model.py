"""Deterministic desk-scale latent-diffusion analog.

The generator mirrors the structure of the production pipeline it stands
in for: a prompt becomes an M x W token-embedding matrix, a fixed seeded
noise latent is refined for L steps by a UNet whose cross-attention
blocks hold ResNets and transformers (SA -> CA -> FFN with residuals),
and a fixed-weight local decoder expands the latent into an RGB image in
[0, 1].  Short-cut connections concatenate each down block's output into
the same-level up block, the deepest down/up blocks are attention-free,
and the mid block holds two ResNets around its transformer.

Everything is a pure function of (config seed, prompt, weights): no
global RNG state is ever touched, so generations are bit-reproducible
and may run concurrently on shared base weights.

Weights live in a binary16 checkpoint (see ``build_weights``); the
forward pass computes in float64.  Non-finite values arising from
corrupted weights propagate freely and are only clamped by the decoder.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .checkpoint import (
    Block,
    CheckpointStore,
    Layer,
    Matrix,
    NamingScheme,
    TensorSelector,
    build_checkpoint,
    parse_checkpoint,
)

_ATTENTION_MATRICES = (Matrix.WQ, Matrix.WK, Matrix.WV, Matrix.WO)


def _entropy(*parts) -> list[int]:
    """Stable integer entropy for SeedSequence from ints and strings."""
    out = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:8], "little"))
        else:
            out.append(int(part))
    return out


def seeded_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(*parts))))


@dataclass(frozen=True)
class DiffuserConfig:
    """Scale and topology knobs for the toy generator.

    Defaults keep a full generation in the tens of milliseconds while
    preserving the structural features faults are injected into: three
    down levels whose deepest block is ResNet-only, matching up levels,
    and a single-transformer mid block.
    """

    latent_size: int = 16
    image_size: int = 64
    latent_channels: int = 4
    channels: tuple[int, ...] = (16, 32, 64)
    transformers_per_down_block: int = 2
    transformers_per_up_block: int = 3
    transformers_per_mid_block: int = 1
    heads: int = 2
    embed_width: int = 32
    text_length: int = 8
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.latent_size >= self.image_size:
            raise ValueError("latent_size must be smaller than image_size")
        if self.image_size % self.latent_size != 0:
            raise ValueError("image_size must be a multiple of latent_size")
        small = [
            self.latent_size, self.image_size, self.latent_channels,
            self.transformers_per_down_block, self.transformers_per_up_block,
            self.transformers_per_mid_block, self.heads, self.embed_width,
            self.text_length,
        ]
        if min(small) < 1 or min(self.channels) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if len(self.channels) < 2:
            raise ValueError("need at least two resolution levels")
        if self.latent_size % (1 << (len(self.channels) - 1)) != 0:
            raise ValueError("latent_size must be divisible by 2**(levels-1)")
        for ch in self.channels:
            if ch % self.heads != 0:
                raise ValueError("every channel count must be divisible by heads")

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    def transformer_count(self, block: Block, level: int) -> int:
        """Transformers in one block; 0 for the attention-free deepest blocks."""
        if block == Block.MID:
            return self.transformers_per_mid_block if level == 0 else 0
        if not 0 <= level < self.num_levels:
            return 0
        if level == self.num_levels - 1:
            return 0
        if block == Block.DOWN:
            return self.transformers_per_down_block
        return self.transformers_per_up_block

    def resnet_count(self, block: Block, level: int) -> int:
        if block == Block.MID:
            return 2
        if block == Block.DOWN:
            return self.transformers_per_down_block
        return self.transformers_per_up_block

    def valid_selectors(self) -> list[TensorSelector]:
        out = []
        blocks = [(Block.DOWN, range(self.num_levels)), (Block.MID, range(1)),
                  (Block.UP, range(self.num_levels))]
        for block, levels in blocks:
            for level in levels:
                for t in range(self.transformer_count(block, level)):
                    for layer in (Layer.SA, Layer.CA):
                        for matrix in _ATTENTION_MATRICES:
                            out.append(TensorSelector(block, level, t, layer, matrix))
                    out.append(TensorSelector(block, level, t, Layer.FFN, Matrix.WF1))
                    out.append(TensorSelector(block, level, t, Layer.FFN, Matrix.WF2))
        return out

    def naming_scheme(self) -> NamingScheme:
        """Canonical toy names, e.g. down.0.t0.sa.wv and mid.t0.ffn.w1."""
        table = {}
        for sel in self.valid_selectors():
            if sel.block == Block.MID:
                prefix = f"mid.t{sel.transformer_index}"
            else:
                prefix = f"{sel.block.value}.{sel.level}.t{sel.transformer_index}"
            if sel.layer == Layer.FFN:
                leaf = "w1" if sel.matrix == Matrix.WF1 else "w2"
                table[sel] = f"{prefix}.ffn.{leaf}"
            else:
                table[sel] = f"{prefix}.{sel.layer.value}.{sel.matrix.value}"
        return NamingScheme("toy", table)

    def transformer_tensor_names(self) -> list[str]:
        return sorted(set(self.naming_scheme().table.values()))


def _transformer_shapes(prefix: str, ch: int, width: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.sa.wq", (ch, ch)),
        (f"{prefix}.sa.wk", (ch, ch)),
        (f"{prefix}.sa.wv", (ch, ch)),
        (f"{prefix}.sa.wo", (ch, ch)),
        (f"{prefix}.ca.wq", (ch, ch)),
        (f"{prefix}.ca.wk", (width, ch)),
        (f"{prefix}.ca.wv", (width, ch)),
        (f"{prefix}.ca.wo", (ch, ch)),
        (f"{prefix}.ffn.w1", (ch, 4 * ch)),
        (f"{prefix}.ffn.w2", (4 * ch, ch)),
    ]


def weight_shapes(cfg: DiffuserConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor in the toy checkpoint with its shape."""
    ch = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {"in.conv": (ch[0], cfg.latent_channels, 3, 3)}
    deepest = cfg.num_levels - 1

    for level in range(cfg.num_levels):
        c = ch[level]
        for r in range(cfg.resnet_count(Block.DOWN, level)):
            shapes[f"down.{level}.res{r}.conv1"] = (c, c, 3, 3)
            shapes[f"down.{level}.res{r}.conv2"] = (c, c, 3, 3)
        for t in range(cfg.transformer_count(Block.DOWN, level)):
            shapes.update(_transformer_shapes(f"down.{level}.t{t}", c, cfg.embed_width))
        if level < deepest:
            shapes[f"down.{level}.down.conv"] = (ch[level + 1], c, 3, 3)

    c = ch[deepest]
    shapes["mid.res0.conv1"] = (c, c, 3, 3)
    shapes["mid.res0.conv2"] = (c, c, 3, 3)
    for t in range(cfg.transformers_per_mid_block):
        shapes.update(_transformer_shapes(f"mid.t{t}", c, cfg.embed_width))
    shapes["mid.res1.conv1"] = (c, c, 3, 3)
    shapes["mid.res1.conv2"] = (c, c, 3, 3)

    for level in range(cfg.num_levels):
        c = ch[level]
        for r in range(cfg.resnet_count(Block.UP, level)):
            c_in = 2 * c if r == 0 else c
            shapes[f"up.{level}.res{r}.conv1"] = (c, c_in, 3, 3)
            shapes[f"up.{level}.res{r}.conv2"] = (c, c, 3, 3)
            if c_in != c:
                shapes[f"up.{level}.res{r}.proj"] = (c, c_in, 1, 1)
        for t in range(cfg.transformer_count(Block.UP, level)):
            shapes.update(_transformer_shapes(f"up.{level}.t{t}", c, cfg.embed_width))
        if level > 0:
            shapes[f"up.{level}.up.conv"] = (ch[level - 1], c, 3, 3)

    shapes["out.conv"] = (cfg.latent_channels, ch[0], 3, 3)
    return shapes


def _init_f16(
    rng: np.random.Generator, shape: tuple[int, ...], fields: tuple[int, int] = (4, 10)
) -> np.ndarray:
    """Draw binary16 weights directly at the bit level.

    Sign and the ten mantissa bits are independent fair coins and the
    exponent field is uniform over the given inclusive range, so every
    weight is a normal value with magnitude below 1 (exponent MSB always
    0) and exactly uniform mantissa-bit statistics.  The default band
    4..10 spans (2**-11, 2**-4).
    """
    lo, hi = fields
    if not 1 <= lo <= hi <= 14:
        raise ValueError("exponent field band must stay within 1..14")
    n = math.prod(shape)
    sign = rng.integers(0, 2, n, dtype=np.uint16) << 15
    exponent = rng.integers(lo, hi + 1, n, dtype=np.uint16) << 10
    mantissa = rng.integers(0, 1024, n, dtype=np.uint16)
    patterns = (sign | exponent | mantissa).astype("<u2")
    return patterns.view(np.float16).reshape(shape)


def _conv_field_band(shape: tuple[int, ...]) -> tuple[int, int]:
    """Exponent band giving a convolution roughly unit signal gain.

    Per-entry RMS of a band centered on field f is ~1.53 * 2**(f-15);
    matmul gain is sqrt(fan_in) times that, so the center is chosen per
    fan-in.  This keeps corrupted values flowing to the output instead
    of being crushed by uniformly tiny kernels.
    """
    fan_in = math.prod(shape[1:])
    center = 15 + math.log2(0.6 / (1.53 * math.sqrt(fan_in)))
    mid = min(13, max(2, round(center)))
    return (mid - 1, mid + 1)


def build_weights(cfg: DiffuserConfig) -> CheckpointStore:
    """Freshly initialized binary16 checkpoint for the toy topology.

    Transformer matrices all use the default sub-unit exponent band;
    convolution kernels get fan-aware bands (still every |w| < 1).
    """
    transformer_names = set(cfg.transformer_tensor_names())
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        rng = seeded_rng(cfg.seed, "weights", name)
        if name in transformer_names:
            tensors[name] = _init_f16(rng, shape)
        else:
            tensors[name] = _init_f16(rng, shape, fields=_conv_field_band(shape))
    return parse_checkpoint(build_checkpoint(tensors, metadata={"format": "toy-diffuser"}))


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x); inf and nan propagate, silu(-inf) = 0.

    exp(-x) may overflow for large negative x, which still yields the
    correct limit x / inf = -0.0, so the overflow warning is suppressed.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = x / (1.0 + np.exp(-x))
    out[np.isneginf(x)] = 0.0
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Same-padded KxK convolution on a (C, H, W) map, K odd."""
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {x.shape[0]}")
    if kh == kw == 1:
        out = np.tensordot(kernel[:, :, 0, 0], x, axes=(1, 0))
        return out[:, ::stride, ::stride]
    pad = kh // 2
    h, w = x.shape[1], x.shape[2]
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((kh * kw, c_in, oh, ow), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[dy * kw + dx] = xp[:, dy:dy + h + 2 * pad - kh + 1:stride,
                                    dx:dx + w + 2 * pad - kw + 1:stride]
    flat = cols.transpose(1, 0, 2, 3).reshape(c_in * kh * kw, oh * ow)
    weights = kernel.reshape(c_out, c_in * kh * kw)
    return (weights @ flat).reshape(c_out, oh, ow)


def attention(
    x: np.ndarray, context: np.ndarray,
    wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
    heads: int = 1,
) -> np.ndarray:
    """Scaled dot-product attention over token rows.

    x is (T, d) and attends to context (S, e) through projections
    Q = x @ wq, K = context @ wk, V = context @ wv; head outputs are
    concatenated and mixed by wo.  Self-attention passes context = x,
    cross-attention passes the text embedding rows.
    """
    t, d = x.shape
    s, e = context.shape
    if wq.shape != (d, d) or wo.shape[0] != d or wo.shape[1] != d:
        raise ValueError("wq/wo must be (d, d) for d input channels")
    if wk.shape[0] != e or wv.shape[0] != e or wk.shape[1] != d or wv.shape[1] != d:
        raise ValueError("wk/wv must map context width to the token width")
    if d % heads != 0:
        raise ValueError("token width must be divisible by heads")
    dh = d // heads
    q = (x @ wq).reshape(t, heads, dh).transpose(1, 0, 2)
    k = (context @ wk).reshape(s, heads, dh).transpose(1, 0, 2)
    v = (context @ wv).reshape(s, heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    with np.errstate(invalid="ignore"):
        scores = scores - scores.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        weights = np.exp(scores)
        weights = weights / weights.sum(axis=-1, keepdims=True)
    merged = (weights @ v).transpose(1, 0, 2).reshape(t, d)
    return merged @ wo


def ffn(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Two-layer feed-forward with SiLU in between; output shape = input shape."""
    t, d = x.shape
    if w1.shape[0] != d or w2.shape[1] != d or w1.shape[1] != w2.shape[0]:
        raise ValueError("ffn weight shapes incompatible with the token width")
    return silu(x @ w1) @ w2


@dataclass
class GenerationResult:
    """Final image plus the raw latent and a non-finite marker for the trial log."""

    image: np.ndarray
    latent: np.ndarray
    non_finite: bool = False


class ToyDiffuser:
    """Config-bound generator; weights are supplied per call as store views."""

    def __init__(self, config: DiffuserConfig | None = None):
        self.config = config or DiffuserConfig()
        cfg = self.config
        n = cfg.steps
        # Linear per-step coefficients: the fraction of the predicted noise
        # removed at each step decays from 1/n to 0.1/n.
        if n > 0:
            self._schedule = np.linspace(1.0, 0.1, n) / n
        else:
            self._schedule = np.zeros(0)
        scale = cfg.image_size // cfg.latent_size
        rng = seeded_rng(cfg.seed, "latent-decoder")
        self._decoder = rng.standard_normal((3 * scale * scale, cfg.latent_channels))
        self._decoder *= 0.4 / np.sqrt(cfg.latent_channels)
        self._pad_row = self._token_row(None)

    # -- text ---------------------------------------------------------------

    def _token_row(self, token: str | None) -> np.ndarray:
        rng = seeded_rng(self.config.seed, "text-token", token if token is not None else "\x00pad")
        return rng.standard_normal(self.config.embed_width) / np.sqrt(self.config.embed_width)

    def embed_prompt(self, prompt: str) -> np.ndarray:
        """Deterministic (text_length, embed_width) embedding of a prompt.

        Rows are per-word vectors derived from the config seed; missing
        words are a fixed pad row, so the empty prompt embeds as all-pad.
        """
        words = prompt.split()[: self.config.text_length]
        rows = [self._token_row(w) for w in words]
        while len(rows) < self.config.text_length:
            rows.append(self._pad_row)
        return np.stack(rows)

    # -- latent -------------------------------------------------------------

    def initial_latent(self) -> np.ndarray:
        """The fixed seeded noise latent shared by all prompts."""
        cfg = self.config
        rng = seeded_rng(cfg.seed, "initial-latent")
        return rng.standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size))

    # -- UNet ---------------------------------------------------------------

    def load_tensors(self, weights: CheckpointStore) -> dict[str, np.ndarray]:
        """Materialize all checkpoint tensors once as float64 arrays."""
        return {
            name: np.asarray(weights.tensor(name), dtype=np.float64)
            for name in weight_shapes(self.config)
        }

    def _time_signal(self, t: int) -> np.ndarray:
        c0 = self.config.channels[0]
        phases = (np.arange(c0) + 1.0) * (t + 1.0) * (np.pi / 16.0)
        return (0.1 * np.sin(phases))[:, None, None]

    def _resnet(self, x: np.ndarray, w: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
        h = conv2d(x, w[f"{prefix}.conv1"])
        h = conv2d(silu(h), w[f"{prefix}.conv2"])
        proj = w.get(f"{prefix}.proj")
        base = conv2d(x, proj) if proj is not None else x
        return base + h

    def _transformer(
        self, x: np.ndarray, text: np.ndarray, w: Mapping[str, np.ndarray], prefix: str
    ) -> np.ndarray:
        c, h_dim, w_dim = x.shape
        tokens = x.reshape(c, h_dim * w_dim).T
        tokens = tokens + attention(
            tokens, tokens,
            w[f"{prefix}.sa.wq"], w[f"{prefix}.sa.wk"],
            w[f"{prefix}.sa.wv"], w[f"{prefix}.sa.wo"],
            heads=self.config.heads,
        )
        tokens = tokens + attention(
            tokens, text,
            w[f"{prefix}.ca.wq"], w[f"{prefix}.ca.wk"],
            w[f"{prefix}.ca.wv"], w[f"{prefix}.ca.wo"],
            heads=self.config.heads,
        )
        tokens = tokens + ffn(tokens, w[f"{prefix}.ffn.w1"], w[f"{prefix}.ffn.w2"])
        return tokens.T.reshape(c, h_dim, w_dim)

    def _block(
        self, x: np.ndarray, text: np.ndarray, w: Mapping[str, np.ndarray],
        block: Block, level: int,
    ) -> np.ndarray:
        name = "mid" if block == Block.MID else f"{block.value}.{level}"
        n_res = self.config.resnet_count(block, level)
        n_tr = self.config.transformer_count(block, level)
        if block == Block.MID:
            x = self._resnet(x, w, "mid.res0")
            for t in range(n_tr):
                x = self._transformer(x, text, w, f"mid.t{t}")
            return self._resnet(x, w, "mid.res1")
        for r in range(n_res):
            x = self._resnet(x, w, f"{name}.res{r}")
            if r < n_tr:
                x = self._transformer(x, text, w, f"{name}.t{r}")
        return x

    def unet_forward(
        self,
        latent: np.ndarray,
        text: np.ndarray,
        weights: CheckpointStore | Mapping[str, np.ndarray],
        t: int,
        trace: dict[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        """One noise estimate: down path, mid block, up path with skips.

        When ``trace`` is a dict it receives copies of every block input
        and output plus the skip tensors, keyed e.g. ``down.0.out``,
        ``skip.1``, ``mid.out``, ``up.2.in``.
        """
        cfg = self.config
        w = weights if isinstance(weights, Mapping) else self.load_tensors(weights)

        def record(key: str, value: np.ndarray) -> None:
            if trace is not None:
                trace[key] = value.copy()

        x = conv2d(np.asarray(latent, dtype=np.float64), w["in.conv"]) + self._time_signal(t)
        skips: list[np.ndarray] = []
        deepest = cfg.num_levels - 1
        for level in range(cfg.num_levels):
            record(f"down.{level}.in", x)
            x = self._block(x, text, w, Block.DOWN, level)
            record(f"down.{level}.out", x)
            skips.append(x)
            record(f"skip.{level}", x)
            if level < deepest:
                x = conv2d(x, w[f"down.{level}.down.conv"], stride=2)

        record("mid.in", x)
        x = self._block(x, text, w, Block.MID, 0)
        record("mid.out", x)

        for level in range(deepest, -1, -1):
            x = np.concatenate([x, skips[level]], axis=0)
            record(f"up.{level}.in", x)
            x = self._block(x, text, w, Block.UP, level)
            record(f"up.{level}.out", x)
            if level > 0:
                x = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
                x = conv2d(x, w[f"up.{level}.up.conv"])
        return conv2d(x, w["out.conv"])

    # -- sampling -----------------------------------------------------------

    def denoise_loop(
        self,
        initial: np.ndarray,
        text: np.ndarray,
        weights: CheckpointStore | Mapping[str, np.ndarray],
    ) -> np.ndarray:
        """Run all scheduled steps; corrupted weights stay in effect throughout."""
        w = weights if isinstance(weights, Mapping) else self.load_tensors(weights)
        x = np.array(initial, dtype=np.float64)
        for t in range(self.config.steps):
            x = x - self._schedule[t] * self.unet_forward(x, text, w, t)
        return x

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        """Expand the latent to a (3, N, N) image clamped to [0, 1].

        Each latent pixel maps through a fixed seeded linear decoder to
        exactly one (N/N_L)-square output patch, so a change confined to
        one latent pixel can only touch that patch.  +inf clamps to 1,
        -inf to 0, and NaN lands on the lower bound.
        """
        cfg = self.config
        scale = cfg.image_size // cfg.latent_size
        n = cfg.latent_size
        pix = np.asarray(latent, dtype=np.float64).reshape(cfg.latent_channels, n * n)
        patches = (self._decoder @ pix).reshape(3, scale, scale, n, n)
        image = 0.5 + patches.transpose(0, 3, 1, 4, 2).reshape(
            3, n * scale, n * scale
        )
        image = np.where(np.isnan(image), -1.0, image)
        return np.clip(image, 0.0, 1.0)

    def generate(
        self, prompt: str, weights: CheckpointStore | Mapping[str, np.ndarray]
    ) -> np.ndarray:
        """Prompt to image, bit-deterministic in (config seed, prompt, weights)."""
        return self.run(prompt, weights).image

    def run(
        self, prompt: str, weights: CheckpointStore | Mapping[str, np.ndarray]
    ) -> GenerationResult:
        text = self.embed_prompt(prompt)
        latent = self.denoise_loop(self.initial_latent(), text, weights)
        image = self.decode_latent(latent)
        return GenerationResult(
            image=image,
            latent=latent,
            non_finite=not bool(np.isfinite(latent).all()),
        )

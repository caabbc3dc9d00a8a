"""The edge-attention super-resolution network.

Data flow for one LR image ``y`` (N, 1, h, w)::

    X_SF = conv3x3(y)                                  # shallow features
    X    = X_SF
    repeat k times: X = basic_block(X, y)              # edge attention
    x_sr = reconstruct(X + X_SF)                       # pixel shuffle by tau

Inside a basic block the features run through ``m`` residual blocks and
then split.  The upper path gives deep features ``D``; the lower path
rebuilds a one-channel LR image whose à-trous details, stacked with the
details of ``y``, drive sigmoid attention maps ``A``.  The block returns
``conv(ViT(D * A + D))``.

All parameters live once in :attr:`EmsrModel.params`; the noisy and
noisier branches of :func:`forward_shared` both read from that mapping.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .atw import atw_details
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class EmsrConfig:
    k_basic_blocks: int = 3
    m_res_blocks: int = 4
    n_parallel_res_blocks: int = 1
    channels: int = 64
    vit_heads: int = 16
    window: int = 4
    mlp_ratio: float = 2.0
    tau: int = 3
    atw_scales: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.channels % self.vit_heads:
            raise ValueError(f"channels {self.channels} not divisible by {self.vit_heads} heads")
        for f in ("k_basic_blocks", "m_res_blocks", "n_parallel_res_blocks", "channels", "vit_heads", "window", "tau", "atw_scales"):
            if getattr(self, f) < (0 if f in ("k_basic_blocks", "m_res_blocks", "n_parallel_res_blocks") else 1):
                raise ValueError(f"{f} out of range: {getattr(self, f)}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @classmethod
    def tiny(cls, **overrides) -> EmsrConfig:
        base = dict(k_basic_blocks=1, m_res_blocks=1, n_parallel_res_blocks=1, channels=8,
                    vit_heads=2, window=4, mlp_ratio=2.0, tau=2, atw_scales=3)
        base.update(overrides)
        return cls(**base)

    @property
    def head_dim(self) -> int:
        return self.channels // self.vit_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.channels))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> EmsrConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in d.items():
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            out[key] = float(val) if kinds[key] in ("float", float) else int(val)
        return cls(**out)


class EmsrModel:
    """Architecture config plus one named tensor per parameter."""

    def __init__(self, config: EmsrConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = _init_params(config, np.random.default_rng(seed))
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ValueError(f"parameter table does not match config (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise ShapeError(f"parameter {name}: shape {t.shape}, config needs {expected[name]}")
            t.requires_grad = True
            t.name = name
        self.params = params

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def __call__(self, y) -> Tensor:
        return forward(y, self)


# ---------------------------------------------------------------- parameters


def _conv_shapes(prefix: str, cout: int, cin: int, k: int = 3) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w": (cout, cin, k, k), f"{prefix}.b": (cout,)}


def param_shapes(cfg: EmsrConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table, in a fixed order that depends only on the config."""
    c, j = cfg.channels, cfg.atw_scales
    shapes: dict[str, tuple[int, ...]] = {}
    shapes |= _conv_shapes("fe", c, 1)
    for i in range(cfg.k_basic_blocks):
        b = f"b{i}"
        for r in range(cfg.m_res_blocks):
            shapes |= _conv_shapes(f"{b}.res{r}.conv1", c, c) | _conv_shapes(f"{b}.res{r}.conv2", c, c)
        for path in ("up", "low"):
            for r in range(cfg.n_parallel_res_blocks):
                shapes |= _conv_shapes(f"{b}.{path}{r}.conv1", c, c) | _conv_shapes(f"{b}.{path}{r}.conv2", c, c)
        shapes |= _conv_shapes(f"{b}.lr_out", 1, c)
        shapes |= _conv_shapes(f"{b}.fuse", c, 2 * j)
        shapes |= _conv_shapes(f"{b}.att.conv1", c, c) | _conv_shapes(f"{b}.att.conv2", c, c)
        v = f"{b}.vit"
        shapes |= {f"{v}.ln1.g": (c,), f"{v}.ln1.b": (c,)}
        shapes |= {f"{v}.q": (c, c), f"{v}.k": (c, c), f"{v}.v": (c, c)}
        shapes |= {f"{v}.ln2.g": (c,), f"{v}.ln2.b": (c,)}
        hid = cfg.mlp_hidden
        shapes |= {f"{v}.fc1.w": (c, hid), f"{v}.fc1.b": (hid,), f"{v}.fc2.w": (hid, c), f"{v}.fc2.b": (c,)}
        shapes |= _conv_shapes(f"{b}.out", c, c)
    shapes |= _conv_shapes("rec.up", c * cfg.tau * cfg.tau, c)
    shapes |= _conv_shapes("rec.map1", c, c) | _conv_shapes("rec.map2", 1, c)
    return shapes


def _init_params(cfg: EmsrConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    # fan-in scaled uniform weights, zero biases, unit LN gains
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3] if len(shape) == 4 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- blocks


def _conv(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def _as_input(y) -> Tensor:
    if isinstance(y, Tensor):
        return y
    a = np.asarray(y, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    return Tensor(a)


def feature_extract(y, model: EmsrModel) -> Tensor:
    return _conv(_as_input(y), model.params, "fe")


def residual_block(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    h = ad.relu(_conv(x, params, "conv1"))
    return ad.add(_conv(h, params, "conv2"), x)


def attention_block(edge_feats: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """conv -> ReLU -> conv -> sigmoid; every output lies in (0, 1)."""
    h = ad.relu(_conv(edge_feats, params, "conv1"))
    return ad.sigmoid(_conv(h, params, "conv2"))


def window_partition(x: Tensor, window: int) -> Tensor:
    """(N, C, H, W) -> (N * H/M * W/M, M*M, C) tokens grouped by window."""
    n, c, h, w = x.shape
    if h % window or w % window:
        ph, pw = (-h) % window, (-w) % window
        raise ShapeError(
            f"feature map {h}x{w} not divisible by window {window}; pad by {ph} rows and {pw} columns"
        )
    t = ad.reshape(x, (n, c, h // window, window, w // window, window))
    t = ad.permute(t, (0, 2, 4, 3, 5, 1))
    return ad.reshape(t, (n * (h // window) * (w // window), window * window, c))


def window_merge(t: Tensor, shape: tuple[int, int, int, int], window: int) -> Tensor:
    n, c, h, w = shape
    t = ad.reshape(t, (n, h // window, w // window, window, window, c))
    t = ad.permute(t, (0, 5, 1, 3, 2, 4))
    return ad.reshape(t, (n, c, h, w))


def window_attention(tokens: Tensor, params: Mapping[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention inside each window.

    ``tokens`` is (B, T, C).  Returns the concatenated head outputs (B, T, C)
    and the attention weights (B, heads, T, T).
    """
    b, t, c = tokens.shape
    d = c // heads
    flat = ad.reshape(tokens, (b * t, c))

    def split(w: Tensor) -> Tensor:
        z = ad.reshape(ad.linear(flat, w), (b, t, heads, d))
        return ad.permute(z, (0, 2, 1, 3))

    q, k, v = split(params["q"]), split(params["k"]), split(params["v"])
    scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = ad.softmax_rows(scores)
    out = ad.permute(ad.matmul(attn, v), (0, 2, 1, 3))
    return ad.reshape(out, (b, t, c)), attn


def vit_block(x: Tensor, params: Mapping[str, Tensor], heads: int, window: int, eps: float = 1e-5,
              return_attention: bool = False):
    """X' = W-MSA(LN(X)) + X ; X'' = FFN(LN(X')) + X'."""
    n, c, h, w = x.shape
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    tokens = window_partition(x, window)
    normed = ad.layer_norm(tokens, params["ln1.g"], params["ln1.b"], eps)
    msa, attn = window_attention(normed, params, heads)
    x1 = ad.add(msa, tokens)

    flat = ad.reshape(x1, (-1, c))
    hid = ad.relu(ad.linear(ad.layer_norm(flat, params["ln2.g"], params["ln2.b"], eps), params["fc1.w"], params["fc1.b"]))
    x2 = ad.add(ad.linear(hid, params["fc2.w"], params["fc2.b"]), flat)
    out = window_merge(ad.reshape(x2, tokens.shape), x.shape, window)
    return (out, attn) if return_attention else out


def basic_block(x_in: Tensor, y, model: EmsrModel, index: int, attention_override=None) -> Tensor:
    """One edge-attention block.

    ``attention_override`` (array or callable on the computed maps) replaces
    the attention maps; it exists for tests that isolate the gating path.
    """
    cfg = model.config
    p = model.sub(f"b{index}")
    y = _as_input(y)
    h, w = x_in.shape[-2:]
    if h % cfg.window or w % cfg.window:
        window_partition(x_in, cfg.window)  # raises with the padding hint

    feats = x_in
    for r in range(cfg.m_res_blocks):
        feats = residual_block(feats, model.sub(f"b{index}.res{r}"))

    deep = feats
    for r in range(cfg.n_parallel_res_blocks):
        deep = residual_block(deep, model.sub(f"b{index}.up{r}"))

    low = feats
    for r in range(cfg.n_parallel_res_blocks):
        low = residual_block(low, model.sub(f"b{index}.low{r}"))
    y_hat = ad.relu(_conv(low, p, "lr_out"))

    edges = ad.concat([atw_details(y, cfg.atw_scales), atw_details(y_hat, cfg.atw_scales)], axis=1)
    fused = _conv(edges, p, "fuse")
    maps = attention_block(fused, model.sub(f"b{index}.att"))
    if attention_override is not None:
        maps = attention_override(maps) if callable(attention_override) else _as_input(attention_override)
        if maps.shape != deep.shape:
            raise ShapeError(f"attention override {maps.shape} does not match features {deep.shape}")

    gated = ad.add(ad.mul(deep, maps), deep)
    z = vit_block(gated, model.sub(f"b{index}.vit"), cfg.vit_heads, cfg.window, cfg.ln_eps)
    return _conv(z, p, "out")


def reconstruct(x: Tensor, tau: int, params: Mapping[str, Tensor]) -> Tensor:
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    up = ad.pixel_shuffle(_conv(x, params, "up"), tau)
    return _conv(ad.relu(_conv(up, params, "map1")), params, "map2")


def forward(y, model: EmsrModel) -> Tensor:
    y = _as_input(y)
    if y.data.ndim != 4 or y.shape[1] != 1:
        raise ShapeError(f"expected a (N, 1, h, w) grayscale batch, got {y.shape}")
    shallow = feature_extract(y, model)
    x = shallow
    for i in range(model.config.k_basic_blocks):
        x = basic_block(x, y, model, i)
    return reconstruct(ad.add(x, shallow), model.config.tau, model.sub("rec"))


def forward_shared(y, y_prime, model: EmsrModel) -> tuple[Tensor, Tensor]:
    """Run the noisy and the noisier input through the same parameters."""
    y, y_prime = _as_input(y), _as_input(y_prime)
    if y.shape != y_prime.shape:
        raise ShapeError(f"forward_shared: extents differ {y.shape} vs {y_prime.shape}")
    return forward(y, model), forward(y_prime, model)

"""Gated spatio-temporal convolutional forecaster.

Two "sandwich" blocks (gated temporal conv, first-order spatial graph conv,
gated temporal conv, layer norm), an optional embedding-fusion stage between
the second block and the head, and a head that collapses the remaining time
axis and maps channels to the forecast horizons.

Everything here is expressed in the tensor module's op vocabulary so the tape
can differentiate it. Activations are (batch, channel, time, node)
throughout; node order is positional and must agree between the input
windows, the propagation matrix, and the embedding rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import (
    Tensor,
    add,
    bias_add,
    broadcast_to,
    channel_map,
    concat,
    conv1d_time,
    matmul,
    mul,
    narrow,
    node_mix,
    layer_norm,
    relu,
    reshape,
    sigmoid,
    transpose2d,
)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters; immutable so checkpoints can embed it."""

    input_steps: int = 12
    horizon: int = 3
    kernel_t: int = 3
    block1: tuple[int, int, int] = (1, 16, 64)
    block2: tuple[int, int, int] = (64, 16, 64)
    embed_channels: int = 16
    embed_dim: int = 1536
    use_llm_block: bool = False

    def __post_init__(self):
        for name in ("input_steps", "horizon", "kernel_t", "embed_channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for bname in ("block1", "block2"):
            block = getattr(self, bname)
            if len(block) != 3 or any(int(c) < 1 for c in block):
                raise ValidationError(f"{bname} must be three channel counts >= 1, got {block}")
            object.__setattr__(self, bname, tuple(int(c) for c in block))
        if self.block2[0] != self.block1[2]:
            raise ValidationError(
                f"block2 input channels ({self.block2[0]}) must equal block1 output "
                f"channels ({self.block1[2]})"
            )
        if self.collapsed_steps < 1:
            raise ValidationError(
                f"input_steps={self.input_steps} leaves no time steps after four temporal "
                f"convolutions of kernel {self.kernel_t}: need input_steps - "
                f"4*(kernel_t-1) >= 1"
            )

    @property
    def collapsed_steps(self) -> int:
        """Time-axis length after both blocks: M - 4*(K_t - 1)."""
        return self.input_steps - 4 * (self.kernel_t - 1)

    def to_dict(self) -> dict:
        return {
            "input_steps": self.input_steps,
            "horizon": self.horizon,
            "kernel_t": self.kernel_t,
            "block1": list(self.block1),
            "block2": list(self.block2),
            "embed_channels": self.embed_channels,
            "embed_dim": self.embed_dim,
            "use_llm_block": self.use_llm_block,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            input_steps=int(d["input_steps"]),
            horizon=int(d["horizon"]),
            kernel_t=int(d["kernel_t"]),
            block1=tuple(d["block1"]),
            block2=tuple(d["block2"]),
            embed_channels=int(d["embed_channels"]),
            embed_dim=int(d["embed_dim"]),
            use_llm_block=bool(d["use_llm_block"]),
        )


@dataclass
class TemporalConvParams:
    kernel: Tensor  # (2*c_out, c_in, K_t)
    bias: Tensor  # (2*c_out,)
    residual: Tensor | None  # (c_in, c_out) 1x1 map, present iff c_in != c_out


@dataclass
class BlockParams:
    tconv1: TemporalConvParams
    sconv_weight: Tensor  # (c_mid, c_mid)
    sconv_bias: Tensor  # (c_mid,)
    tconv2: TemporalConvParams
    ln_gain: Tensor  # (c_out,)
    ln_shift: Tensor  # (c_out,)


@dataclass
class FusionParams:
    proj: Tensor  # (D_e, c_e)
    mix: Tensor  # (c_out + c_e, c_out)
    mix_bias: Tensor  # (c_out,)


@dataclass
class OutputParams:
    collapse_kernel: Tensor  # (c_out, c_out, T')
    collapse_bias: Tensor  # (c_out,)
    fc_weight: Tensor  # (c_out, H), shared across nodes
    fc_bias: Tensor  # (H,)


@dataclass
class ModelParams:
    block1: BlockParams
    block2: BlockParams
    output: OutputParams
    fusion: FusionParams | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed order (the checkpoint manifest order)."""
        out: list[tuple[str, Tensor]] = []
        for bname, block in (("block1", self.block1), ("block2", self.block2)):
            for tname, tconv in (("tconv1", block.tconv1), ("tconv2", block.tconv2)):
                out.append((f"{bname}.{tname}.kernel", tconv.kernel))
                out.append((f"{bname}.{tname}.bias", tconv.bias))
                if tconv.residual is not None:
                    out.append((f"{bname}.{tname}.residual", tconv.residual))
            out.append((f"{bname}.sconv_weight", block.sconv_weight))
            out.append((f"{bname}.sconv_bias", block.sconv_bias))
            out.append((f"{bname}.ln_gain", block.ln_gain))
            out.append((f"{bname}.ln_shift", block.ln_shift))
        if self.fusion is not None:
            out.append(("fusion.proj", self.fusion.proj))
            out.append(("fusion.mix", self.fusion.mix))
            out.append(("fusion.mix_bias", self.fusion.mix_bias))
        out.append(("output.collapse_kernel", self.output.collapse_kernel))
        out.append(("output.collapse_bias", self.output.collapse_bias))
        out.append(("output.fc_weight", self.output.fc_weight))
        out.append(("output.fc_bias", self.output.fc_bias))
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def copy_data(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_data(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ValidationError(f"state is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {state[name].shape}, expected {p.data.shape}"
                )
            p.data = state[name].astype(np.float64).copy()


def param_count(cfg: ArchConfig) -> int:
    """Closed-form learnable-parameter count for an ArchConfig."""

    def tconv(c_in: int, c_out: int) -> int:
        n = 2 * c_out * c_in * cfg.kernel_t + 2 * c_out
        if c_in != c_out:
            n += c_in * c_out
        return n

    def block(c_in: int, c_mid: int, c_out: int) -> int:
        return tconv(c_in, c_mid) + (c_mid * c_mid + c_mid) + tconv(c_mid, c_out) + 2 * c_out

    total = block(*cfg.block1) + block(*cfg.block2)
    if cfg.use_llm_block:
        c_out = cfg.block2[2]
        total += cfg.embed_dim * cfg.embed_channels
        total += (c_out + cfg.embed_channels) * c_out + c_out
    c_out = cfg.block2[2]
    total += c_out * c_out * cfg.collapsed_steps + c_out
    total += c_out * cfg.horizon + cfg.horizon
    return total


def init_params(cfg: ArchConfig, seed: int) -> ModelParams:
    """Seeded uniform(-s, s) init with s = sqrt(1/fan_in); layer-norm at identity."""
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
        s = float(np.sqrt(1.0 / fan_in))
        return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)

    def tconv(c_in: int, c_out: int, name: str) -> TemporalConvParams:
        fan = c_in * cfg.kernel_t
        kernel = uniform((2 * c_out, c_in, cfg.kernel_t), fan, f"{name}.kernel")
        bias = uniform((2 * c_out,), fan, f"{name}.bias")
        residual = None
        if c_in != c_out:
            residual = uniform((c_in, c_out), c_in, f"{name}.residual")
        return TemporalConvParams(kernel=kernel, bias=bias, residual=residual)

    def block(channels: tuple[int, int, int], name: str) -> BlockParams:
        c_in, c_mid, c_out = channels
        return BlockParams(
            tconv1=tconv(c_in, c_mid, f"{name}.tconv1"),
            sconv_weight=uniform((c_mid, c_mid), c_mid, f"{name}.sconv_weight"),
            sconv_bias=uniform((c_mid,), c_mid, f"{name}.sconv_bias"),
            tconv2=tconv(c_mid, c_out, f"{name}.tconv2"),
            ln_gain=Tensor(np.ones(c_out), requires_grad=True, name=f"{name}.ln_gain"),
            ln_shift=Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.ln_shift"),
        )

    b1 = block(cfg.block1, "block1")
    b2 = block(cfg.block2, "block2")
    fusion = None
    if cfg.use_llm_block:
        c_out = cfg.block2[2]
        fusion = FusionParams(
            proj=uniform((cfg.embed_dim, cfg.embed_channels), cfg.embed_dim, "fusion.proj"),
            mix=uniform((c_out + cfg.embed_channels, c_out), c_out + cfg.embed_channels, "fusion.mix"),
            mix_bias=uniform((c_out,), c_out + cfg.embed_channels, "fusion.mix_bias"),
        )
    c_out = cfg.block2[2]
    t_prime = cfg.collapsed_steps
    output = OutputParams(
        collapse_kernel=uniform((c_out, c_out, t_prime), c_out * t_prime, "output.collapse_kernel"),
        collapse_bias=uniform((c_out,), c_out * t_prime, "output.collapse_bias"),
        fc_weight=uniform((c_out, cfg.horizon), c_out, "output.fc_weight"),
        fc_bias=uniform((cfg.horizon,), c_out, "output.fc_bias"),
    )
    return ModelParams(block1=b1, block2=b2, output=output, fusion=fusion)


# ---------------------------------------------------------------------------
# layers

def temporal_gated_conv(x: Tensor, params: TemporalConvParams, kernel_t: int) -> Tensor:
    """Gated causal-window conv along time: (P + residual) * sigmoid(Q).

    The conv maps to 2*c_out channels split into (P, Q); the residual is the
    input cropped to the surviving time steps (the most recent ones), passed
    through a 1x1 channel map when the widths differ.
    """
    c_out = params.kernel.shape[0] // 2
    y = conv1d_time(x, params.kernel, params.bias)
    p = narrow(y, 1, 0, c_out)
    q = narrow(y, 1, c_out, c_out)
    t_out = x.shape[2] - kernel_t + 1
    r = narrow(x, 2, kernel_t - 1, t_out)
    if params.residual is not None:
        r = channel_map(r, params.residual)
    elif x.shape[1] != c_out:
        raise ShapeError(
            f"temporal conv without a residual map needs c_in == c_out, got {x.shape[1]} vs {c_out}"
        )
    return mul(add(p, r), sigmoid(q))


def spatial_graph_conv(x: Tensor, a_norm: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """First-order graph convolution ReLU(A_norm. H W + b) at each (batch, time)."""
    if x.shape[3] != a_norm.shape[0]:
        raise ShapeError(
            f"input has {x.shape[3]} nodes but the propagation matrix is "
            f"{a_norm.shape[0]}x{a_norm.shape[1]}"
        )
    h = channel_map(x, w)
    h = node_mix(h, a_norm)
    return relu(bias_add(h, bias))


def st_conv_block(x: Tensor, params: BlockParams, a_norm: Tensor, kernel_t: int) -> Tensor:
    """Temporal conv, spatial conv, temporal conv, then layer norm."""
    h = temporal_gated_conv(x, params.tconv1, kernel_t)
    h = spatial_graph_conv(h, a_norm, params.sconv_weight, params.sconv_bias)
    h = temporal_gated_conv(h, params.tconv2, kernel_t)
    return layer_norm(h, params.ln_gain, params.ln_shift)


def llm_fusion_block(h: Tensor, embeddings: Tensor, params: FusionParams) -> Tensor:
    """Fuse per-node embedding features into the channel axis.

    e = ReLU(E @ proj) is computed once per forward pass and broadcast over
    batch and time; the concatenated (c_out + c_e) channels are mixed back to
    c_out with a bias and ReLU. E itself is a constant: gradients reach proj
    and mix only.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] != h.shape[3]:
        raise ShapeError(
            f"embeddings shape {embeddings.shape} does not cover {h.shape[3]} nodes"
        )
    if embeddings.shape[1] != params.proj.shape[0]:
        raise ValidationError(
            f"embedding dimension {embeddings.shape[1]} does not match the fusion "
            f"projection's expected {params.proj.shape[0]}"
        )
    e = relu(matmul(embeddings, params.proj))  # (n, c_e)
    c_e = e.shape[1]
    b, _, t_prime, n = h.shape
    e_bt = broadcast_to(reshape(transpose2d(e), (1, c_e, 1, n)), (b, c_e, t_prime, n))
    z = concat([h, e_bt], axis=1)
    z = channel_map(z, params.mix)
    return relu(bias_add(z, params.mix_bias))


def output_layer(h: Tensor, params: OutputParams) -> Tensor:
    """Collapse the time axis with a full-length conv, then map channels to horizons."""
    z = conv1d_time(h, params.collapse_kernel, params.collapse_bias)
    z = channel_map(z, params.fc_weight)  # (B, H, 1, n)
    z = bias_add(z, params.fc_bias)
    b, horizon, _, n = z.shape
    return reshape(z, (b, horizon, n))


def forward(
    x: Tensor,
    params: ModelParams,
    a_norm: Tensor,
    embeddings: Tensor | None,
    cfg: ArchConfig,
) -> Tensor:
    """Full model: (B, M, n) demand windows to (B, H, n) forecasts."""
    if x.ndim != 3:
        raise ShapeError(f"input must be (batch, steps, nodes), got shape {x.shape}")
    b, m, n = x.shape
    if m != cfg.input_steps:
        raise ShapeError(f"input has {m} steps but the config expects {cfg.input_steps}")
    if a_norm.shape != (n, n):
        raise ShapeError(f"propagation matrix {a_norm.shape} does not match {n} nodes")
    if cfg.use_llm_block and embeddings is None:
        raise ValidationError("use_llm_block is set but no embeddings were given")
    if cfg.use_llm_block and params.fusion is None:
        raise ValidationError("use_llm_block is set but params carry no fusion block")
    h = reshape(x, (b, 1, m, n))
    h = st_conv_block(h, params.block1, a_norm, cfg.kernel_t)
    h = st_conv_block(h, params.block2, a_norm, cfg.kernel_t)
    if cfg.use_llm_block:
        h = llm_fusion_block(h, embeddings, params.fusion)
    return output_layer(h, params.output)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(
    path: str,
    params: ModelParams,
    cfg: ArchConfig,
    seed: int,
    meta: dict | None = None,
    extra_arrays: list[tuple[str, np.ndarray]] | None = None,
) -> None:
    """Write params (manifest order) + config + seed into a container file."""
    from .container import write_container

    named = params.named_parameters()
    arrays = [(f"param.{name}", p.data) for name, p in named]
    arrays.extend(extra_arrays or [])
    header_meta = {
        "arch": cfg.to_dict(),
        "seed": int(seed),
        "manifest": [name for name, _ in named],
    }
    header_meta.update(meta or {})
    write_container(path, "checkpoint", arrays, header_meta)


def load_checkpoint(path: str) -> tuple[ModelParams, ArchConfig, int, dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (params, cfg, seed, meta, extra arrays).

    The manifest must match what the stored ArchConfig implies, and every
    payload shape must match; anything else raises ValidationError.
    """
    from .container import expect_kind, read_container

    kind, arrays, meta = read_container(path)
    expect_kind(path, "checkpoint", kind)
    try:
        cfg = ArchConfig.from_dict(meta["arch"])
        seed = int(meta["seed"])
        manifest = list(meta["manifest"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: checkpoint header missing field: {exc}") from exc
    params = init_params(cfg, seed=0)
    expected = [name for name, _ in params.named_parameters()]
    if manifest != expected:
        raise ValidationError(
            f"{path}: checkpoint manifest does not match the stored config "
            f"(got {len(manifest)} params, expected {len(expected)})"
        )
    state = {}
    for name in manifest:
        key = f"param.{name}"
        if key not in arrays:
            raise ValidationError(f"{path}: checkpoint payload missing {key!r}")
        state[name] = arrays[key]
    params.load_data(state)
    extras = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return params, cfg, seed, meta, extras

"""Block and model assembly: context operators, the gated geometric block,
the global-context branch, variant presets, and the checkpoint format.

The block is isotropic: every layer maps (B, h, w, D) -> (B, h, w, D). The
residual branch is scaled by a per-channel LayerScale vector, so a zero
LayerScale makes each block the exact identity regardless of its interior
parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError
from .geometry import (CLI_MODES, CTX_MODES, ShiftSet, clifford_interact,
                       interact_width)
from .tensor import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"CLFN"
CHECKPOINT_VERSION = 1


@dataclass
class BlockConfig:
    dim: int
    shifts: ShiftSet
    cli_mode: str = "full"
    ctx_mode: str = "diff"
    beta: int = 0
    layerscale_init: float = 1e-2
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if not isinstance(self.shifts, ShiftSet):
            self.shifts = ShiftSet(tuple(self.shifts))
        if self.cli_mode not in CLI_MODES:
            raise ConfigError(f"cli_mode must be one of {CLI_MODES}")
        if self.ctx_mode not in CTX_MODES:
            raise ConfigError(f"ctx_mode must be one of {CTX_MODES}")
        if self.beta not in (0, 1):
            raise ConfigError(f"beta must be 0 or 1, got {self.beta}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if self.dim <= max(self.shifts):
            raise ConfigError(
                f"dim {self.dim} must exceed the largest shift "
                f"{max(self.shifts)}"
            )


@dataclass
class ModelConfig:
    patch_size: int
    dim: int
    depth: int
    num_classes: int
    block: BlockConfig
    variant_name: str = "custom"


@dataclass
class BlockParams:
    """Per-block learnables, in checkpoint declaration order."""

    norm_gain: Tensor
    norm_bias: Tensor
    det_weight: Tensor
    conv1_kernel: Tensor
    conv1_bias: Tensor
    bn1: BatchNormState
    conv2_kernel: Tensor
    conv2_bias: Tensor
    bn2: BatchNormState
    proj_weight: Tensor
    glo_weight: Tensor | None
    gate_weight: Tensor
    gate_bias: Tensor
    gamma: Tensor


@dataclass
class ModelParams:
    embed_weight: Tensor
    embed_bias: Tensor
    embed_norm_gain: Tensor
    embed_norm_bias: Tensor
    blocks: list = field(default_factory=list)
    final_norm_gain: Tensor = None
    final_norm_bias: Tensor = None
    head_weight: Tensor = None
    head_bias: Tensor = None


# ---------------------------------------------------------------------------
# parameter construction

def init_block_params(config, rng, dtype=np.float32):
    d = config.dim
    width = interact_width(d, config.shifts, config.cli_mode)
    glo = None
    if config.beta:
        glo = T.trunc_normal(rng, (width, d), dtype=dtype)
    return BlockParams(
        norm_gain=T.ones(d, requires_grad=True, dtype=dtype),
        norm_bias=T.zeros(d, requires_grad=True, dtype=dtype),
        det_weight=T.trunc_normal(rng, (d, d), dtype=dtype),
        conv1_kernel=T.trunc_normal(rng, (d, 3, 3), dtype=dtype),
        conv1_bias=T.zeros(d, requires_grad=True, dtype=dtype),
        bn1=BatchNormState(d, dtype=dtype),
        conv2_kernel=T.trunc_normal(rng, (d, 3, 3), dtype=dtype),
        conv2_bias=T.zeros(d, requires_grad=True, dtype=dtype),
        bn2=BatchNormState(d, dtype=dtype),
        proj_weight=T.trunc_normal(rng, (width, d), dtype=dtype),
        glo_weight=glo,
        gate_weight=T.trunc_normal(rng, (2 * d, d), dtype=dtype),
        gate_bias=T.zeros(d, requires_grad=True, dtype=dtype),
        gamma=T.full(d, config.layerscale_init, requires_grad=True, dtype=dtype),
    )


def init_model_params(config, seed=0, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x11F]))
    d = config.dim
    cols = config.patch_size * config.patch_size * 3
    params = ModelParams(
        embed_weight=T.trunc_normal(rng, (cols, d), dtype=dtype),
        embed_bias=T.zeros(d, requires_grad=True, dtype=dtype),
        embed_norm_gain=T.ones(d, requires_grad=True, dtype=dtype),
        embed_norm_bias=T.zeros(d, requires_grad=True, dtype=dtype),
    )
    for _ in range(config.depth):
        params.blocks.append(init_block_params(config.block, rng, dtype=dtype))
    params.final_norm_gain = T.ones(d, requires_grad=True, dtype=dtype)
    params.final_norm_bias = T.zeros(d, requires_grad=True, dtype=dtype)
    params.head_weight = T.trunc_normal(rng, (d, config.num_classes), dtype=dtype)
    params.head_bias = T.zeros(config.num_classes, requires_grad=True, dtype=dtype)
    return params


def _block_entries(i, bp):
    pre = f"blocks.{i}."
    entries = [
        (pre + "norm_gain", bp.norm_gain, True),
        (pre + "norm_bias", bp.norm_bias, True),
        (pre + "det_weight", bp.det_weight, True),
        (pre + "conv1_kernel", bp.conv1_kernel, True),
        (pre + "conv1_bias", bp.conv1_bias, True),
        (pre + "bn1.gain", bp.bn1.gain, True),
        (pre + "bn1.bias", bp.bn1.bias, True),
        (pre + "bn1.running_mean", bp.bn1.running_mean, False),
        (pre + "bn1.running_var", bp.bn1.running_var, False),
        (pre + "conv2_kernel", bp.conv2_kernel, True),
        (pre + "conv2_bias", bp.conv2_bias, True),
        (pre + "bn2.gain", bp.bn2.gain, True),
        (pre + "bn2.bias", bp.bn2.bias, True),
        (pre + "bn2.running_mean", bp.bn2.running_mean, False),
        (pre + "bn2.running_var", bp.bn2.running_var, False),
        (pre + "proj_weight", bp.proj_weight, True),
    ]
    if bp.glo_weight is not None:
        entries.append((pre + "glo_weight", bp.glo_weight, True))
    entries += [
        (pre + "gate_weight", bp.gate_weight, True),
        (pre + "gate_bias", bp.gate_bias, True),
        (pre + "gamma", bp.gamma, True),
    ]
    return entries


def named_entries(params):
    """(name, tensor-or-array, is_learnable) in the frozen checkpoint order."""
    entries = [
        ("embed_weight", params.embed_weight, True),
        ("embed_bias", params.embed_bias, True),
        ("embed_norm_gain", params.embed_norm_gain, True),
        ("embed_norm_bias", params.embed_norm_bias, True),
    ]
    for i, bp in enumerate(params.blocks):
        entries += _block_entries(i, bp)
    entries += [
        ("final_norm_gain", params.final_norm_gain, True),
        ("final_norm_bias", params.final_norm_bias, True),
        ("head_weight", params.head_weight, True),
        ("head_bias", params.head_bias, True),
    ]
    return entries


def named_params(params):
    """Learnable tensors only, in checkpoint order."""
    return [(n, t) for n, t, learn in named_entries(params) if learn]


def param_count(params):
    """Number of learnable scalars."""
    return sum(t.size for _, t in named_params(params))


# ---------------------------------------------------------------------------
# forward

def local_context(x, bp, training):
    """Factorized local context: two depthwise 3x3 stages, BN+SiLU after each.

    The stack has a 5x5 receptive field; swapping in a single-stage form is a
    one-line change confined to this function.
    """
    z = T.dw_conv3x3(x, bp.conv1_kernel, bp.conv1_bias)
    z = T.silu(T.batch_norm(z, bp.bn1, training))
    z = T.dw_conv3x3(z, bp.conv2_kernel, bp.conv2_bias)
    return T.silu(T.batch_norm(z, bp.bn2, training))


def make_context(z_det, z_ctx, ctx_mode):
    """diff subtracts the detail stream (high-pass); abs keeps raw context."""
    if ctx_mode == "diff":
        return T.sub(z_ctx, z_det)
    if ctx_mode == "abs":
        return z_ctx
    raise ConfigError(f"ctx_mode must be one of {CTX_MODES}, got {ctx_mode!r}")


def gffn_g(x, glo_weight, shifts, mode):
    """Global-context stream: interact each token with the field mean.

    The mean is a single D-vector per sample, so the cost stays linear in
    the token count.
    """
    b, _, _, d = x.shape
    c_glo = T.reshape(T.global_avg_pool(x), (b, 1, 1, d))
    return T.linear(clifford_interact(x, c_glo, shifts, mode), glo_weight)


def drop_path_mask(batch, rate, rng, dtype=np.float32):
    """Per-sample keep mask scaled by 1/keep (stochastic depth)."""
    keep = 1.0 - rate
    mask = (rng.random(batch) < keep).astype(dtype) / dtype(keep)
    return Tensor(mask.reshape(batch, 1, 1, 1))


def clifford_block(x, bp, config, training, drop_rate=None, rng=None):
    """One gated geometric block; maps (B, h, w, D) -> (B, h, w, D)."""
    x_ln = T.layer_norm(x, bp.norm_gain, bp.norm_bias)
    z_det = T.linear(x_ln, bp.det_weight)
    z_ctx = local_context(x_ln, bp, training)
    z_ctx = make_context(z_det, z_ctx, config.ctx_mode)

    g_feat = T.linear(
        clifford_interact(z_det, z_ctx, config.shifts, config.cli_mode),
        bp.proj_weight)
    if config.beta:
        g_feat = T.add(g_feat, gffn_g(x_ln, bp.glo_weight,
                                      config.shifts, config.cli_mode))

    alpha = T.sigmoid(T.linear(T.concat_channels([x_ln, g_feat]),
                               bp.gate_weight, bp.gate_bias))
    h_mix = T.add(T.silu(x_ln), T.mul(alpha, g_feat))
    branch = T.mul(bp.gamma, h_mix)

    rate = config.drop_path_rate if drop_rate is None else drop_rate
    if training and rate > 0.0:
        if rng is None:
            raise ConfigError("drop path is active but no rng was supplied")
        branch = T.mul(drop_path_mask(x.shape[0], rate, rng, x.dtype), branch)
    return T.add(x, branch)


def block_drop_rates(config):
    """Stochastic-depth schedule: linear ramp from 0 to the configured rate."""
    L = config.depth
    top = config.block.drop_path_rate
    if L == 1:
        return [0.0]
    return [top * i / (L - 1) for i in range(L)]


def model_forward(images, params, config, training=False, rng=None):
    """Patch embed -> norm -> L blocks -> norm -> pool -> linear head."""
    x = T.conv_patch_embed(images, params.embed_weight, config.patch_size)
    x = T.add(x, params.embed_bias)
    x = T.layer_norm(x, params.embed_norm_gain, params.embed_norm_bias)
    for bp, rate in zip(params.blocks, block_drop_rates(config)):
        x = clifford_block(x, bp, config.block, training,
                           drop_rate=rate, rng=rng)
    x = T.layer_norm(x, params.final_norm_gain, params.final_norm_bias)
    return T.linear(T.global_avg_pool(x), params.head_weight, params.head_bias)


# ---------------------------------------------------------------------------
# variants

_VARIANTS = {
    # name: (dim, depth, shifts, cli_mode)
    "nano": (128, 12, (1, 2), "full"),
    "lite": (128, 12, (1, 2, 4, 8, 16), "full"),
    "net32": (128, 32, (1, 2, 4), "full"),
    "net64": (128, 64, (1, 2, 4, 8, 16), "inner"),
    # reduced preset for smoke training and quick experiments
    "nano-mini": (64, 4, (1, 2), "full"),
}

# Published reference budgets; cmd_params gates against these.
PARAM_BUDGETS = {
    "nano": 1_430_000,
    "lite": 2_610_000,
    "net32": 4_800_000,
    "net64": 8_600_000,
    "nano-gffng": 2_220_000,
}


def variant_names():
    names = sorted(_VARIANTS)
    return names + [n + "-gffng" for n in names]


def variant_config(name, num_classes=100):
    base = name
    beta = 0
    if name.endswith("-gffng"):
        base = name[:-len("-gffng")]
        beta = 1
    if base not in _VARIANTS:
        raise ConfigError(
            f"unknown variant {name!r}; known: {', '.join(variant_names())}"
        )
    dim, depth, shifts, cli_mode = _VARIANTS[base]
    block = BlockConfig(dim=dim, shifts=ShiftSet(shifts), cli_mode=cli_mode,
                        ctx_mode="diff", beta=beta, layerscale_init=1e-2,
                        drop_path_rate=0.1)
    return ModelConfig(patch_size=2, dim=dim, depth=depth,
                       num_classes=num_classes, block=block,
                       variant_name=name)


def build_variant(name, num_classes=100, seed=0, dtype=np.float32):
    """Named preset plus freshly initialized parameters."""
    config = variant_config(name, num_classes=num_classes)
    return config, init_model_params(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint io

def config_to_dict(config):
    b = config.block
    return {
        "variant_name": config.variant_name,
        "patch_size": config.patch_size,
        "dim": config.dim,
        "depth": config.depth,
        "num_classes": config.num_classes,
        "block": {
            "dim": b.dim,
            "shifts": list(b.shifts.offsets),
            "cli_mode": b.cli_mode,
            "ctx_mode": b.ctx_mode,
            "beta": b.beta,
            "layerscale_init": b.layerscale_init,
            "drop_path_rate": b.drop_path_rate,
        },
    }


def config_from_dict(d):
    bd = dict(d["block"])
    bd["shifts"] = ShiftSet(tuple(bd["shifts"]))
    return ModelConfig(
        patch_size=d["patch_size"], dim=d["dim"], depth=d["depth"],
        num_classes=d["num_classes"], block=BlockConfig(**bd),
        variant_name=d.get("variant_name", "custom"),
    )


def save_checkpoint(path, config, params):
    """Binary checkpoint: magic, version, config JSON, named fp32 arrays."""
    entries = named_entries(params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(config_to_dict(config), sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(entries)))
        for name, value, _ in entries:
            arr = value.data if isinstance(value, Tensor) else value
            raw = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", raw.ndim))
            f.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            f.write(raw.tobytes())


def load_checkpoint(path):
    """Rebuild (config, params) from a checkpoint; bit-exact round-trip."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (clen,) = struct.unpack("<I", take(4))
    config = config_from_dict(json.loads(take(clen).decode()))
    params = init_model_params(config, seed=0)
    expected = named_entries(params)
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(
            f"{path}: {count} entries, expected {len(expected)}"
        )
    for name, value, _ in expected:
        (nlen,) = struct.unpack("<I", take(4))
        got = take(nlen).decode()
        if got != name:
            raise CheckpointError(f"{path}: entry {got!r}, expected {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        arr = np.frombuffer(take(4 * int(np.prod(shape, dtype=np.int64))),
                            dtype="<f4").reshape(shape)
        target = value.data if isinstance(value, Tensor) else value
        if target.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape {arr.shape} for {name!r}, "
                f"expected {target.shape}"
            )
        arr = arr.astype(np.float32)
        if isinstance(value, Tensor):
            value.data = arr
        else:
            _set_bn_buffer(params, name, arr)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return config, params


def _set_bn_buffer(params, name, arr):
    parts = name.split(".")
    bp = params.blocks[int(parts[1])]
    bn = getattr(bp, parts[2])
    setattr(bn, parts[3], arr)

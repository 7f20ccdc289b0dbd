"""
Model module for the SLAB transformer toolkit.

Assembles pre-norm transformer blocks (norm -> attention -> residual,
norm -> MLP -> residual) into small isotropic classifiers: a strided patch
embedding (or a token embedding for sequence tasks), learned position
embeddings, a stack of blocks, a final norm, mean pooling over tokens and a
linear head.

Also provides the analytic multiply-accumulate count of a configuration and
the inference-time fusion that rewrites every converged PRepBN as a
BatchNorm and folds it into the linear layer that consumes it.
"""

import copy
import math
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config import ConfigError
from tensor_core import Tensor, ShapeMismatch, gelu
from normalization import (
    BNParams, LNParams, Mode, ModeLike, NotConverged, PRepBNState, RepBNParams, Schedule,
    as_mode, batchnorm, fuse_bn_into_linear, layernorm, prepbn, reparam_repbn_to_bn, rmsnorm,
)
from attention import AttentionParams, TokenGrid, sla_attention, softmax_attention

logger = logging.getLogger(__name__)

NORM_KINDS = ("layernorm", "prepbn", "batchnorm")
ATTN_KINDS = ("softmax", "sla")
INPUT_KINDS = ("image", "tokens")
LN_KINDS = ("layernorm", "rmsnorm")


@dataclass
class ModelConfig:
    """
    Architecture of an isotropic SLAB classifier.

    ``decay_steps`` and ``schedule`` configure the PRepBN blend; ``fused``
    marks a model whose norms have been folded into linear layers.
    """
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    norm_kind: str = "prepbn"
    attn_kind: str = "sla"
    droppath_rate: float = 0.0
    input_kind: str = "image"
    image_size: int = 8
    in_channels: int = 1
    patch_size: int = 2
    vocab_size: int = 16
    seq_len: int = 16
    num_classes: int = 4
    decay_steps: int = 1000
    schedule: str = "linear"
    ln_kind: str = "layernorm"
    learn_eta: bool = True
    dwc_kernel_size: int = 3
    eps_denom: float = 1e-6
    precision: str = "float32"
    fused: bool = False
    seed: int = 0

    @property
    def grid(self) -> TokenGrid:
        if self.input_kind == "tokens":
            return TokenGrid(1, self.seq_len)
        side = self.image_size // self.patch_size
        return TokenGrid(side, side)

    @property
    def num_tokens(self) -> int:
        return self.grid.tokens

    @property
    def hidden_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def dtype(self) -> Any:
        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> None:
        """
        Check architectural invariants.

        Raises:
            ConfigError: Naming the offending [model] key
        """
        def fail(key: str, message: str):
            raise ConfigError(f"[model] {key}: {message}", "model", key)

        if self.depth < 1:
            fail("depth", f"must be >= 1, got {self.depth}")
        if self.dim <= 0 or self.heads <= 0:
            fail("dim", f"dim and heads must be positive, got dim={self.dim}, heads={self.heads}")
        if self.dim % self.heads:
            fail("heads", f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.mlp_ratio <= 0 or self.hidden_dim < 1:
            fail("mlp_ratio", f"must give a positive hidden width, got {self.mlp_ratio}")
        if self.norm_kind not in NORM_KINDS:
            fail("norm_kind", f"must be one of {', '.join(NORM_KINDS)}, got '{self.norm_kind}'")
        if self.attn_kind not in ATTN_KINDS:
            fail("attn_kind", f"must be one of {', '.join(ATTN_KINDS)}, got '{self.attn_kind}'")
        if self.input_kind not in INPUT_KINDS:
            fail("input_kind", f"must be one of {', '.join(INPUT_KINDS)}, got '{self.input_kind}'")
        if self.ln_kind not in LN_KINDS:
            fail("ln_kind", f"must be one of {', '.join(LN_KINDS)}, got '{self.ln_kind}'")
        if not 0.0 <= self.droppath_rate < 1.0:
            fail("droppath_rate", f"must be in [0, 1), got {self.droppath_rate}")
        if self.input_kind == "image":
            if self.patch_size <= 0 or self.image_size % self.patch_size:
                fail("patch_size", f"image_size {self.image_size} is not divisible by {self.patch_size}")
            if self.in_channels <= 0:
                fail("in_channels", f"must be positive, got {self.in_channels}")
        elif self.seq_len <= 0 or self.vocab_size <= 0:
            fail("seq_len", f"seq_len and vocab_size must be positive, got {self.seq_len}, {self.vocab_size}")
        if self.num_classes < 2:
            fail("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.decay_steps <= 0:
            fail("decay_steps", f"must be positive, got {self.decay_steps}")
        if self.schedule not in [s.value for s in Schedule]:
            fail("schedule", f"must be one of linear, cosine, step, got '{self.schedule}'")
        if self.dwc_kernel_size <= 0 or self.dwc_kernel_size % 2 == 0:
            fail("dwc_kernel_size", f"must be a positive odd integer, got {self.dwc_kernel_size}")
        if self.eps_denom <= 0:
            fail("eps_denom", f"must be positive, got {self.eps_denom}")
        if self.precision not in ("float32", "float64"):
            fail("precision", f"must be float32 or float64, got '{self.precision}'")
        if self.fused and self.norm_kind != "batchnorm":
            fail("fused", "only batchnorm models can be marked fused")


class NormSlot:
    """One normalization position in the network, dispatching on its kind."""

    KINDS = ("layernorm", "rmsnorm", "batchnorm", "prepbn", "identity")

    def __init__(self, kind: str, params: Optional[Union[LNParams, BNParams, PRepBNState]] = None):
        if kind not in self.KINDS:
            raise ValueError(f"Unknown norm kind '{kind}'")
        self.kind = kind
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, dtype: Any = None) -> "NormSlot":
        dtype = dtype or config.dtype
        c = config.dim
        if config.fused:
            return cls("identity")
        if config.norm_kind == "layernorm":
            return cls(config.ln_kind, LNParams.create(c, dtype))
        if config.norm_kind == "batchnorm":
            return cls("batchnorm", BNParams.create(c, dtype))
        state = PRepBNState(
            ln=LNParams.create(c, dtype),
            repbn=RepBNParams.create(c, dtype, learn_eta=config.learn_eta),
            total_steps=config.decay_steps,
            schedule=Schedule(config.schedule),
            ln_kind=config.ln_kind,
        )
        return cls("prepbn", state)

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        if self.kind == "identity":
            return x
        if self.kind == "layernorm":
            return layernorm(x, self.params)
        if self.kind == "rmsnorm":
            return rmsnorm(x, self.params)
        if self.kind == "batchnorm":
            return batchnorm(x, self.params, mode)
        return prepbn(x, self.params, mode)

    def tensors(self) -> Dict[str, Tensor]:
        p = self.params
        if self.kind in ("layernorm", "rmsnorm"):
            return {"scale": p.scale, "shift": p.shift}
        if self.kind == "batchnorm":
            return _bn_tensors(p, "")
        if self.kind == "prepbn":
            out = {"ln.scale": p.ln.scale, "ln.shift": p.ln.shift}
            out.update(_bn_tensors(p.repbn.bn, "repbn."))
            out["repbn.eta"] = p.repbn.eta
            return out
        return {}

    def header(self) -> Dict[str, Any]:
        """Non-tensor state needed to restore this slot exactly."""
        p = self.params
        if self.kind in ("layernorm", "rmsnorm"):
            return {"kind": self.kind, "eps": p.eps}
        if self.kind == "batchnorm":
            return {"kind": self.kind, "eps": p.eps, "momentum": p.momentum}
        if self.kind == "prepbn":
            return {
                "kind": self.kind,
                "ln_eps": p.ln.eps,
                "bn_eps": p.repbn.bn.eps,
                "momentum": p.repbn.bn.momentum,
                "total_steps": p.total_steps,
                "current_step": p.current_step,
                "schedule": p.schedule.value,
                "ln_kind": p.ln_kind,
            }
        return {"kind": self.kind}

    def restore(self, header: Dict[str, Any]) -> None:
        if header.get("kind") != self.kind:
            raise ValueError(f"Norm kind mismatch: stored '{header.get('kind')}', expected '{self.kind}'")
        p = self.params
        if self.kind in ("layernorm", "rmsnorm"):
            p.eps = float(header["eps"])
        elif self.kind == "batchnorm":
            p.eps, p.momentum = float(header["eps"]), float(header["momentum"])
        elif self.kind == "prepbn":
            p.ln.eps = float(header["ln_eps"])
            p.repbn.bn.eps = float(header["bn_eps"])
            p.repbn.bn.momentum = float(header["momentum"])
            p.total_steps = int(header["total_steps"])
            p.current_step = int(header["current_step"])
            p.schedule = Schedule(header["schedule"])
            p.ln_kind = header["ln_kind"]

    def batchnorm_params(self) -> Optional[BNParams]:
        if self.kind == "batchnorm":
            return self.params
        if self.kind == "prepbn":
            return self.params.repbn.bn
        return None

    def to_bn(self) -> BNParams:
        """
        Equivalent eval-mode BatchNorm of this slot.

        Raises:
            NotConverged: For token norms, or a PRepBN whose gamma is still > 0
        """
        if self.kind == "batchnorm":
            return self.params
        if self.kind == "prepbn":
            g = self.params.gamma
            if g > 0.0:
                raise NotConverged(f"PRepBN gamma is {g:.6f}; training must reach gamma = 0 before fusion", g)
            return reparam_repbn_to_bn(self.params.repbn)
        raise NotConverged(f"A {self.kind} slot has no offline BatchNorm form")


def _bn_tensors(p: BNParams, prefix: str) -> Dict[str, Tensor]:
    return {
        f"{prefix}alpha": p.alpha,
        f"{prefix}beta": p.beta,
        f"{prefix}running_mean": p.running_mean,
        f"{prefix}running_var": p.running_var,
    }


@dataclass
class Block:
    """Pre-norm transformer block: attention branch then MLP branch, both residual."""
    norm1: NormSlot
    attn: AttentionParams
    norm2: NormSlot
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    attn_kind: str = "sla"
    droppath_rate: float = 0.0

    def tensors(self) -> Dict[str, Tensor]:
        out = {f"norm1.{k}": v for k, v in self.norm1.tensors().items()}
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o", "dwc_kernel"):
            out[f"attn.{name}"] = getattr(self.attn, name)
        out.update({f"norm2.{k}": v for k, v in self.norm2.tensors().items()})
        out["mlp.fc1.weight"] = self.fc1_w
        out["mlp.fc1.bias"] = self.fc1_b
        out["mlp.fc2.weight"] = self.fc2_w
        out["mlp.fc2.bias"] = self.fc2_b
        return out


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype: Any) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), requires_grad=True)


def _zeros(n: int, dtype: Any) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def make_block(config: ModelConfig, rng: np.random.Generator) -> Block:
    """Randomly initialized block for ``config``."""
    dtype = config.dtype
    return Block(
        norm1=NormSlot.create(config),
        attn=AttentionParams.init(config.dim, config.heads, config.dwc_kernel_size, rng, dtype, config.eps_denom),
        norm2=NormSlot.create(config),
        fc1_w=_linear_init(rng, config.dim, config.hidden_dim, dtype),
        fc1_b=_zeros(config.hidden_dim, dtype),
        fc2_w=_linear_init(rng, config.hidden_dim, config.dim, dtype),
        fc2_b=_zeros(config.dim, dtype),
        attn_kind=config.attn_kind,
        droppath_rate=config.droppath_rate,
    )


def droppath(branch_out: Tensor, rate: float, mode: ModeLike,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Stochastic depth on a residual branch of shape (B, ...).

    In train mode each sample's branch is kept with probability 1 - rate and
    scaled by 1 / (1 - rate); otherwise the branch passes through.
    """
    if rate == 0.0 or as_mode(mode) is not Mode.TRAIN:
        return branch_out
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"droppath rate must be in [0, 1), got {rate}")
    rng = rng or np.random.default_rng()
    keep = 1.0 - rate
    shape = (branch_out.shape[0],) + (1,) * (branch_out.ndim - 1)
    mask = (rng.random(shape) < keep).astype(branch_out.dtype) / np.asarray(keep, dtype=branch_out.dtype)
    return branch_out * Tensor(mask)


def block_forward(x: Tensor, block: Block, mode: ModeLike, grid: TokenGrid,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    x + DropPath(Attn(Norm1(x))), then x + DropPath(MLP(Norm2(x))).

    Args:
        x: Tokens of shape (N, C) or (B, N, C)
        block: Block parameters
        mode: Forward mode; droppath is active only in train mode
        grid: Token layout for the SLA convolution branch
        rng: Generator for droppath masks

    Returns:
        Tensor with the shape of ``x``
    """
    mode = as_mode(mode)
    h = block.norm1(x, mode)
    if block.attn_kind == "sla":
        a = sla_attention(h, block.attn, grid)
    else:
        a = softmax_attention(h, block.attn)
    x = x + droppath(a, block.droppath_rate, mode, rng)

    h = block.norm2(x, mode)
    m = gelu(h @ block.fc1_w + block.fc1_b) @ block.fc2_w + block.fc2_b
    return x + droppath(m, block.droppath_rate, mode, rng)


class SlabModel:
    """
    Isotropic transformer classifier built from a ``ModelConfig``.

    This class provides:
    - Patch or token embedding with learned position embeddings
    - A stack of pre-norm blocks with the configured norm and attention kinds
    - Named tensor access for checkpointing and optimization
    - PRepBN schedule control (advance, decay steps, current gamma)
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        config.validate()
        self.config = config
        self.logger = logging.getLogger(__name__)
        rng = rng or np.random.default_rng(config.seed)
        dtype = config.dtype
        c = config.dim

        if config.input_kind == "image":
            self.embed_w = _linear_init(rng, config.patch_dim, c, dtype)
        else:
            self.embed_w = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, c)).astype(dtype), requires_grad=True)
        self.embed_b = _zeros(c, dtype)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, (config.num_tokens, c)).astype(dtype), requires_grad=True)
        self.blocks: List[Block] = [make_block(config, rng) for _ in range(config.depth)]
        self.norm = NormSlot.create(config)
        self.head_w = _linear_init(rng, c, config.num_classes, dtype)
        self.head_b = _zeros(config.num_classes, dtype)
        self._droppath_rng = np.random.default_rng(config.seed + 1)

    # *** tensor access ***
    def named_tensors(self) -> Dict[str, Tensor]:
        """All stored tensors in a fixed order (learnable and running statistics)."""
        embed = "patch_embed" if self.config.input_kind == "image" else "token_embed"
        out = {f"{embed}.weight": self.embed_w, f"{embed}.bias": self.embed_b, "pos_embed": self.pos_embed}
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in block.tensors().items()})
        out.update({f"norm.{k}": v for k, v in self.norm.tensors().items()})
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def named_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into the model's tensors.

        Raises:
            KeyError: If names are missing or unexpected
            ShapeMismatch: If an array has the wrong shape
        """
        tensors = self.named_tensors()
        missing = set(tensors) - set(state)
        unexpected = set(state) - set(tensors)
        if missing or unexpected:
            raise KeyError(f"State mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, tensor in tensors.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeMismatch(f"{name}: stored shape {value.shape} != model shape {tensor.shape}")
            tensor.data = np.ascontiguousarray(value.astype(tensor.dtype))

    def num_tensor_elements(self, learnable_only: bool = False) -> int:
        tensors = self.named_parameters() if learnable_only else self.named_tensors()
        return int(sum(t.size for t in tensors.values()))

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    # *** normalization control ***
    def norm_slots(self) -> Dict[str, NormSlot]:
        slots = {}
        for i, block in enumerate(self.blocks):
            slots[f"blocks.{i}.norm1"] = block.norm1
            slots[f"blocks.{i}.norm2"] = block.norm2
        slots["norm"] = self.norm
        return slots

    def norm_states(self) -> Dict[str, Dict[str, Any]]:
        return {name: slot.header() for name, slot in self.norm_slots().items()}

    def restore_norm_states(self, states: Dict[str, Dict[str, Any]]) -> None:
        slots = self.norm_slots()
        if set(states) != set(slots):
            raise KeyError(f"Norm state names {sorted(states)} do not match model slots {sorted(slots)}")
        for name, slot in slots.items():
            slot.restore(states[name])

    def prepbn_states(self) -> List[PRepBNState]:
        return [s.params for s in self.norm_slots().values() if s.kind == "prepbn"]

    def has_batchnorm(self) -> bool:
        return any(s.batchnorm_params() is not None for s in self.norm_slots().values())

    @property
    def gamma(self) -> Optional[float]:
        """Current PRepBN blend weight, or None for models without PRepBN."""
        states = self.prepbn_states()
        return states[0].gamma if states else None

    def advance_schedule(self, steps: int = 1) -> None:
        for state in self.prepbn_states():
            state.advance(steps)

    def set_decay_steps(self, total_steps: int) -> None:
        if total_steps <= 0:
            raise ValueError(f"decay steps must be positive, got {total_steps}")
        for state in self.prepbn_states():
            state.total_steps = total_steps
        self.config = replace(self.config, decay_steps=total_steps)

    def set_droppath(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"droppath rate must be in [0, 1), got {rate}")
        for block in self.blocks:
            block.droppath_rate = rate
        self.config = replace(self.config, droppath_rate=rate)

    # *** forward ***
    def embed(self, inputs: Union[Tensor, np.ndarray]) -> Tensor:
        """Map an image batch (B, C, H, W) or token batch (B, N) to tokens (B, N, C)."""
        cfg = self.config
        data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)

        if cfg.input_kind == "tokens":
            if data.ndim != 2 or data.shape[1] != cfg.seq_len:
                raise ShapeMismatch(f"Token batch must have shape (B, {cfg.seq_len}), got {data.shape}")
            ids = data.astype(np.int64)
            if ids.min() < 0 or ids.max() >= cfg.vocab_size:
                raise ValueError(f"Token ids must lie in [0, {cfg.vocab_size})")
            one_hot = np.eye(cfg.vocab_size, dtype=cfg.dtype)[ids]
            tokens = Tensor(one_hot) @ self.embed_w + self.embed_b
        else:
            if data.ndim == 3 and cfg.in_channels == 1:
                data = data[:, None]
            expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
            if data.ndim != 4 or data.shape[1:] != expected:
                raise ShapeMismatch(f"Image batch must have shape (B, {expected}), got {data.shape}")
            b, p, side = data.shape[0], cfg.patch_size, cfg.image_size // cfg.patch_size
            patches = data.astype(cfg.dtype).reshape(b, cfg.in_channels, side, p, side, p)
            patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(b, side * side, cfg.patch_dim)
            tokens = Tensor(patches) @ self.embed_w + self.embed_b
        return tokens + self.pos_embed

    def forward(self, inputs: Union[Tensor, np.ndarray], mode: ModeLike = Mode.EVAL,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Compute class logits of shape (B, num_classes).

        Args:
            inputs: Image batch (B, C, H, W) or token batch (B, N)
            mode: train, eval or calibrate
            rng: Generator for droppath masks in train mode
        """
        mode = as_mode(mode)
        rng = rng or self._droppath_rng
        grid = self.config.grid
        x = self.embed(inputs)
        for block in self.blocks:
            x = block_forward(x, block, mode, grid, rng)
        x = self.norm(x, mode)
        return x.mean(axis=1) @ self.head_w + self.head_b

    __call__ = forward


def model_forward(model: SlabModel, inputs: Union[Tensor, np.ndarray], mode: ModeLike = Mode.EVAL,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits of ``model`` for an image or token batch."""
    return model.forward(inputs, mode, rng)


def attention_flops(n: int, dim: int, heads: int, attn_kind: str, kernel_size: int = 3) -> Dict[str, int]:
    """
    Multiply-accumulates of one attention layer on N tokens.

    Softmax: scores and mixing each cost N^2 C. SLA: K^T V and Q (K^T V)
    each cost N C^2 / h, the normalizer N C, and the depth-wise convolution
    N C k^2.
    """
    d = dim // heads
    if attn_kind == "softmax":
        core, dwc = 2 * n * n * dim, 0
    else:
        core, dwc = 2 * n * dim * d + n * dim, n * dim * kernel_size * kernel_size
    return {"attn_qkv": 3 * n * dim * dim, "attn_core": core, "attn_dwc": dwc, "attn_proj": n * dim * dim}


def block_flops(n: int, dim: int, heads: int, hidden: int, attn_kind: str, kernel_size: int = 3) -> Dict[str, int]:
    """Multiply-accumulates of one transformer block on N tokens."""
    table = attention_flops(n, dim, heads, attn_kind, kernel_size)
    table["mlp"] = 2 * n * dim * hidden
    return table


def count_flops(config: ModelConfig) -> Dict[str, int]:
    """
    Per-component multiply-accumulate counts of one input through ``config``.

    Normalization, activations and residual additions are not counted; the
    figures match an instrumented count of the matmul and convolution kernels.

    Returns:
        Ordered table with keys embed, attn_qkv, attn_core, attn_dwc,
        attn_proj, mlp (summed over blocks), blocks, head and total
    """
    n, c = config.num_tokens, config.dim
    if config.input_kind == "tokens":
        embed = n * config.vocab_size * c
    else:
        embed = n * config.patch_dim * c
    per_block = block_flops(n, c, config.heads, config.hidden_dim, config.attn_kind, config.dwc_kernel_size)

    table = {"embed": embed}
    table.update({k: v * config.depth for k, v in per_block.items()})
    table["blocks"] = sum(per_block.values()) * config.depth
    table["head"] = c * config.num_classes
    table["total"] = table["embed"] + table["blocks"] + table["head"]
    return table


def fuse_block(block: Block) -> Block:
    """Fold both norms of ``block`` into their consumers; returns a new block."""
    block = copy.deepcopy(block)
    bn1 = block.norm1.to_bn()
    attn = block.attn
    attn.w_q, attn.b_q = fuse_bn_into_linear(bn1, attn.w_q, attn.b_q)
    attn.w_k, attn.b_k = fuse_bn_into_linear(bn1, attn.w_k, attn.b_k)
    attn.w_v, attn.b_v = fuse_bn_into_linear(bn1, attn.w_v, attn.b_v)
    block.fc1_w, block.fc1_b = fuse_bn_into_linear(block.norm2.to_bn(), block.fc1_w, block.fc1_b)
    block.norm1 = NormSlot("identity")
    block.norm2 = NormSlot("identity")
    return block


def fuse_model(model: SlabModel) -> SlabModel:
    """
    Inference model with every norm folded into the linear layer after it.

    norm1 folds into the Q/K/V projections, norm2 into the first MLP layer
    and the final norm (through mean pooling) into the head. The residual
    stream never passes through a norm, so these are the only consumers.
    A model that is already fused is returned unchanged.

    Raises:
        NotConverged: If a PRepBN still has gamma > 0, or the model uses token norms
    """
    if model.config.fused:
        logger.info("Model is already fused; nothing to do")
        return model
    if model.config.norm_kind == "layernorm":
        raise NotConverged(f"{model.config.ln_kind} models have no offline form to fuse")
    for state in model.prepbn_states():
        if state.gamma > 0.0:
            raise NotConverged(f"PRepBN gamma is {state.gamma:.6f}; training must reach gamma = 0 before fusion",
                               state.gamma)

    before = model.num_tensor_elements()
    fused = copy.deepcopy(model)
    fused.blocks = [fuse_block(b) for b in model.blocks]
    fused.head_w, fused.head_b = fuse_bn_into_linear(model.norm.to_bn(), model.head_w, model.head_b)
    fused.norm = NormSlot("identity")
    fused.config = replace(model.config, norm_kind="batchnorm", fused=True)
    logger.info(f"Fused {len(fused.blocks)} blocks: {before} -> {fused.num_tensor_elements()} stored values")
    return fused

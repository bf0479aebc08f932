"""Small vision transformer whose linear sites can host parallel branches.

An *ex-fusion* branch is a bias-free weight matrix ``psi`` with the same
shape as its host weight. While attached, the site computes
``x @ W + b + scale * (x @ psi)``. Branches may sit on the attention output
projection and on both MLP linears of the incremental blocks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat, gelu, layer_norm, matmul, softmax
from .autodiff.tensor import ShapeError, get_dtype

SITES = ("proj", "fc1", "fc2")


@dataclass
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    plain_blocks: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0 <= self.plain_blocks <= self.depth:
            raise ValueError("plain_blocks must lie in [0, depth]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def forward_with_exfusion(x: Tensor, weight: Tensor, bias: Tensor | None, psi: Tensor | None, scale: float) -> Tensor:
    """Host linear layer plus an optional scaled bias-free parallel branch."""
    if psi is not None and psi.shape != weight.shape:
        raise ShapeError(f"branch shape {psi.shape} != host shape {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    if psi is not None:
        if scale <= 0:
            raise ValueError("branch scale must be positive")
        out = out + matmul(x, psi) * scale
    return out


class SABlock:
    """Pre-norm self-attention block: LN -> MHSA -> residual, LN -> MLP -> residual."""

    PARAMS = (
        "ln1.weight", "ln1.bias",
        "attn.qkv.weight", "attn.qkv.bias",
        "attn.proj.weight", "attn.proj.bias",
        "ln2.weight", "ln2.bias",
        "mlp.fc1.weight", "mlp.fc1.bias",
        "mlp.fc2.weight", "mlp.fc2.bias",
    )
    SITE_WEIGHT = {"proj": "attn.proj.weight", "fc1": "mlp.fc1.weight", "fc2": "mlp.fc2.weight"}

    def __init__(self, params: dict[str, Tensor], num_heads: int, incremental: bool):
        self.params = params
        self.num_heads = num_heads
        self.incremental = incremental
        self.exfusion: dict[str, Tensor] = {}

    @classmethod
    def init(cls, dim: int, num_heads: int, mlp_ratio: int, incremental: bool, rng) -> "SABlock":
        hidden = dim * mlp_ratio
        shapes = {
            "ln1.weight": (dim,), "ln1.bias": (dim,),
            "attn.qkv.weight": (dim, 3 * dim), "attn.qkv.bias": (3 * dim,),
            "attn.proj.weight": (dim, dim), "attn.proj.bias": (dim,),
            "ln2.weight": (dim,), "ln2.bias": (dim,),
            "mlp.fc1.weight": (dim, hidden), "mlp.fc1.bias": (hidden,),
            "mlp.fc2.weight": (hidden, dim), "mlp.fc2.bias": (dim,),
        }
        params = {}
        for name in cls.PARAMS:
            shape = shapes[name]
            if name.startswith("ln") and name.endswith("weight"):
                data = np.ones(shape)
            elif name.endswith("bias"):
                data = np.zeros(shape)
            else:
                data = trunc_normal(rng, shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(params, num_heads, incremental)

    def attach(self, site: str, psi: Tensor) -> None:
        if site not in SITES:
            raise ValueError(f"ex-fusion cannot attach to {site!r}; allowed sites are {SITES}")
        if not self.incremental:
            raise ValueError("this block does not host ex-fusion branches")
        host = self.params[self.SITE_WEIGHT[site]]
        if psi.shape != host.shape:
            raise ShapeError(f"branch shape {psi.shape} != host {host.shape} at {site}")
        self.exfusion[site] = psi

    def attention(self, x: Tensor) -> Tensor:
        """Multi-head attention output before the projection layer."""
        p = self.params
        n, t, d = x.shape
        h = self.num_heads
        dh = d // h
        h1 = layer_norm(x, p["ln1.weight"], p["ln1.bias"])
        qkv = matmul(h1, p["attn.qkv.weight"]) + p["attn.qkv.bias"]
        qkv = qkv.reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        att = softmax(scores, axis=-1)
        out = matmul(att, v)
        return out.transpose(0, 2, 1, 3).reshape(n, t, d)

    def forward(self, x: Tensor, scale: float = 0.0) -> Tensor:
        p, ex = self.params, self.exfusion
        xa = self.attention(x)
        x = x + forward_with_exfusion(xa, p["attn.proj.weight"], p["attn.proj.bias"], ex.get("proj"), scale)
        h2 = layer_norm(x, p["ln2.weight"], p["ln2.bias"])
        m = gelu(forward_with_exfusion(h2, p["mlp.fc1.weight"], p["mlp.fc1.bias"], ex.get("fc1"), scale))
        m = forward_with_exfusion(m, p["mlp.fc2.weight"], p["mlp.fc2.bias"], ex.get("fc2"), scale)
        return x + m


class IncrementalViT:
    """Patch embedder, a stack of SABlocks and a per-task expandable classifier.

    Classifier columns follow task order: head 0 covers the base classes,
    head t the classes of task t. Labels passed to the losses are column
    indices.
    """

    def __init__(self, config: ViTConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        d, np_ = config.embed_dim, config.num_patches
        self.embed = {
            "patch.weight": Tensor(trunc_normal(rng, (config.patch_pixels, d)), requires_grad=True),
            "patch.bias": Tensor(np.zeros(d), requires_grad=True),
            "cls": Tensor(trunc_normal(rng, (d,)), requires_grad=True),
            "pos": Tensor(trunc_normal(rng, (np_ + 1, d)), requires_grad=True),
        }
        self.blocks = [
            SABlock.init(d, config.num_heads, config.mlp_ratio, i >= config.plain_blocks, rng)
            for i in range(config.depth)
        ]
        self.heads: list[tuple[Tensor, Tensor]] = []
        self.exfusion_scale = 0.0

    # parameters -------------------------------------------------------
    def backbone_params(self) -> dict[str, Tensor]:
        out = dict(self.embed)
        for i, blk in enumerate(self.blocks):
            for name, t in blk.params.items():
                out[f"blocks.{i}.{name}"] = t
        return out

    def exfusion_params(self) -> dict[str, Tensor]:
        return {
            f"blocks.{i}.{site}.psi": psi
            for i, blk in enumerate(self.blocks)
            for site, psi in blk.exfusion.items()
        }

    def head_params(self) -> dict[str, Tensor]:
        out = {}
        for t, (w, b) in enumerate(self.heads):
            out[f"head.{t}.weight"] = w
            out[f"head.{t}.bias"] = b
        return out

    def named_params(self) -> dict[str, Tensor]:
        return {**self.backbone_params(), **self.exfusion_params(), **self.head_params()}

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.requires_grad}

    def backbone_param_count(self) -> int:
        return sum(t.size for t in self.backbone_params().values())

    @property
    def num_classes(self) -> int:
        return sum(w.shape[1] for w, _ in self.heads)

    @property
    def head_widths(self) -> list[int]:
        return [w.shape[1] for w, _ in self.heads]

    def incremental_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.incremental]

    # classifier -------------------------------------------------------
    def expand_classifier(self, num_new: int, rng: np.random.Generator) -> None:
        if num_new < 1:
            raise ValueError("classifier expansion needs at least one class")
        d = self.config.embed_dim
        w = Tensor(trunc_normal(rng, (d, num_new)), requires_grad=True)
        b = Tensor(np.zeros(num_new), requires_grad=True)
        self.heads.append((w, b))

    def classify(self, z: Tensor) -> Tensor:
        if not self.heads:
            raise RuntimeError("classifier has no heads")
        if z.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"feature width {z.shape[-1]} != embed_dim {self.config.embed_dim}")
        outs = [matmul(z, w) + b for w, b in self.heads]
        return outs[0] if len(outs) == 1 else concat(outs, axis=-1)

    # forward ----------------------------------------------------------
    def patchify(self, images: np.ndarray) -> np.ndarray:
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ShapeError(
                f"expected images (N, {c.image_size}, {c.image_size}, {c.channels}), got {images.shape}"
            )
        n, p, g = images.shape[0], c.patch_size, c.image_size // c.patch_size
        x = images.reshape(n, g, p, g, p, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(n, g * g, c.patch_pixels), dtype=get_dtype())

    def tokens(self, images: np.ndarray) -> Tensor:
        e = self.embed
        patches = Tensor(self.patchify(images))
        n, d = patches.shape[0], self.config.embed_dim
        tok = matmul(patches, e["patch.weight"]) + e["patch.bias"]
        cls = Tensor(np.zeros((n, 1, d))) + e["cls"].reshape(1, 1, d)
        return concat([cls, tok], axis=1) + e["pos"]

    def forward_features(self, images: np.ndarray) -> Tensor:
        x = self.tokens(images)
        for blk in self.blocks:
            x = blk.forward(x, self.exfusion_scale)
        return x[:, 0, :]

    def __call__(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        z = self.forward_features(images)
        return z, self.classify(z)

    # state ------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_params().items()}

    def copy(self) -> "IncrementalViT":
        """Deep copy carrying parameters, branches, heads and trainable flags."""
        new = IncrementalViT.__new__(IncrementalViT)
        new.config = self.config
        new.embed = {k: _clone(v) for k, v in self.embed.items()}
        new.blocks = []
        for blk in self.blocks:
            nb = SABlock({k: _clone(v) for k, v in blk.params.items()}, blk.num_heads, blk.incremental)
            nb.exfusion = {k: _clone(v) for k, v in blk.exfusion.items()}
            new.blocks.append(nb)
        new.heads = [(_clone(w), _clone(b)) for w, b in self.heads]
        new.exfusion_scale = self.exfusion_scale
        return new

    def astype(self, dtype) -> "IncrementalViT":
        new = self.copy()
        for t in new.named_params().values():
            t.data = t.data.astype(dtype)
        return new

    def load_arrays(self, arrays: dict[str, np.ndarray], head_widths: list[int]) -> None:
        """Replace parameters from a name->array map (heads rebuilt from widths)."""
        d = self.config.embed_dim
        self.heads = [
            (Tensor(np.zeros((d, w)), requires_grad=True), Tensor(np.zeros(w), requires_grad=True))
            for w in head_widths
        ]
        for blk in self.blocks:
            blk.exfusion = {}
        params = self.named_params()
        for i, blk in enumerate(self.blocks):
            for site in SITES:
                key = f"blocks.{i}.{site}.psi"
                if key in arrays:
                    blk.attach(site, Tensor(arrays[key], requires_grad=True, dtype=arrays[key].dtype))
                    params[key] = blk.exfusion[site]
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"{k}: stored {arrays[k].shape} vs model {t.shape}")
            t.data = np.array(arrays[k], copy=True)


def _clone(t: Tensor) -> Tensor:
    out = Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
    out.name = t.name
    return out

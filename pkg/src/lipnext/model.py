"""The full network: isometric stem, LipNeXt blocks, L2 pool, linear head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .layers import (
    ActivationSpec,
    BlockParams,
    ShiftSpec,
    head_backward,
    block_backward_cf,
    block_forward_cf,
    head_forward,
    l2_pool_cf,
    l2_pool_cf_backward,
    patchify,
    unpatchify,
)
from .linalg import OrthogonalParam, random_orthogonal


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 4
    width: int = 64
    alpha: float = 1 / 16
    beta: float = 0.75
    patch: int = 2
    n_classes: int = 10
    input_shape: tuple = (32, 32, 3)
    padding: str = "circular"
    activation: str = "beta_abs"
    pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        h, w, cin = self.input_shape
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise ValueError(f"input {h}x{w} not divisible by patch size {self.patch}")
        if cin * self.patch**2 > self.width:
            raise ValueError(f"stem produces {cin * self.patch ** 2} channels, more than width {self.width}")
        self.shift_spec.partition(self.width, 4)
        if self.activation == "beta_abs":
            self.act_spec.count(self.width)
        elif self.width % 2:
            raise ValueError("minmax activation needs an even width")

    @property
    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(self.alpha, self.padding)

    @property
    def act_spec(self) -> ActivationSpec:
        return ActivationSpec(self.beta, self.activation)

    @property
    def grid(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        return h // self.patch, w // self.patch

    def to_json(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardCache:
    x_shape: tuple
    blocks: list
    pooled_in: np.ndarray
    features: np.ndarray


@dataclass
class LipNeXt:
    spec: ModelSpec
    blocks: list[BlockParams]
    head_V: np.ndarray
    head_c: np.ndarray
    _names: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, spec: ModelSpec, rng=None) -> "LipNeXt":
        """Random orthogonal mixing, zero biases and embeddings, small Gaussian head."""
        if rng is None or isinstance(rng, int):
            rng = np.random.default_rng(spec.seed if rng is None else rng)
        c = spec.width
        h, w = spec.grid
        blocks = [
            BlockParams(
                R=random_orthogonal(c, rng),
                M=random_orthogonal(c, rng),
                b=np.zeros(c),
                p=np.zeros((h, w, 1)),
            )
            for _ in range(spec.depth)
        ]
        V = rng.standard_normal((spec.n_classes, c)) / np.sqrt(c)
        return cls(spec, blocks, V, np.zeros(spec.n_classes))

    # -- parameter access --------------------------------------------------

    def parameter_names(self, trainable: bool = True) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names += [f"block{i}.R", f"block{i}.M", f"block{i}.b"]
            if self.spec.pos_embed or not trainable:
                names.append(f"block{i}.p")
        return names + ["head.V", "head.c"]

    def orthogonal_names(self) -> list[str]:
        return [n for n in self.parameter_names() if n.endswith((".R", ".M"))]

    def get(self, name: str):
        if name == "head.V":
            return self.head_V
        if name == "head.c":
            return self.head_c
        block, attr = name.split(".")
        return getattr(self.blocks[int(block[5:])], attr)

    def set(self, name: str, value) -> None:
        if name == "head.V":
            self.head_V = value
        elif name == "head.c":
            self.head_c = value
        else:
            block, attr = name.split(".")
            setattr(self.blocks[int(block[5:])], attr, value)

    def max_drift(self) -> tuple[float, str]:
        worst = (0.0, "")
        for name in self.orthogonal_names():
            worst = max(worst, (self.get(name).drift(), name))
        return worst

    # -- forward / backward ------------------------------------------------

    def stem(self, x: np.ndarray) -> np.ndarray:
        """Channels-first lifted patches ``(width, ..., H/q, W/q)``."""
        y = patchify(x, self.spec.patch)
        out = np.zeros((self.spec.width,) + y.shape[:-1], dtype=y.dtype)
        out[: y.shape[-1]] = np.moveaxis(y, -1, 0)
        return out

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-3:] != self.spec.input_shape:
            raise ValueError(f"input shape {x.shape[-3:]} does not match model {self.spec.input_shape}")
        return x

    def backbone(self, x, dtype=np.float64) -> np.ndarray:
        """Pooled 1-Lipschitz features, shape ``(..., width)``."""
        h = self.stem(self._check_input(x).astype(dtype, copy=False))
        shift, act = self.spec.shift_spec, self.spec.act_spec
        for params in self.blocks:
            h, _ = block_forward_cf(h, params, shift, act)
        return l2_pool_cf(h)

    def logits(self, x, dtype=np.float64) -> np.ndarray:
        feats = self.backbone(x, dtype).astype(np.float64)
        return head_forward(feats, self.head_V, self.head_c)

    def forward_train(self, x, dtype=np.float64):
        x = self._check_input(x)
        h = self.stem(x.astype(dtype, copy=False))
        shift, act = self.spec.shift_spec, self.spec.act_spec
        caches = []
        for params in self.blocks:
            h, cache = block_forward_cf(h, params, shift, act)
            caches.append(cache)
        feats = l2_pool_cf(h).astype(np.float64)
        logits = head_forward(feats, self.head_V, self.head_c)
        return logits, ForwardCache(x.shape, caches, h, feats)

    def backward(self, cache: ForwardCache, grad_logits, grad_V_extra=None, input_grad: bool = False):
        """Euclidean gradients for every trainable parameter, keyed by name."""
        gf, gV, gc = head_backward(cache.features, self.head_V, grad_logits)
        if grad_V_extra is not None:
            gV = gV + grad_V_extra
        grads = {"head.V": gV, "head.c": gc}
        g = l2_pool_cf_backward(cache.pooled_in, cache.features, gf)
        for i in reversed(range(len(self.blocks))):
            bg = block_backward_cf(cache.blocks[i], g, overwrite=True)
            g = bg.x
            grads[f"block{i}.R"] = bg.R
            grads[f"block{i}.M"] = bg.M
            grads[f"block{i}.b"] = bg.b
            if self.spec.pos_embed:
                grads[f"block{i}.p"] = bg.p
        if input_grad:
            cin = self.spec.input_shape[-1]
            g = np.moveaxis(g[: cin * self.spec.patch**2], 0, -1)
            g = unpatchify(g, self.spec.patch, cin)
            grads["input"] = g.astype(np.float64)
        return grads

    def copy(self) -> "LipNeXt":
        blocks = [BlockParams(b.R.copy(), b.M.copy(), b.b.copy(), b.p.copy()) for b in self.blocks]
        return LipNeXt(self.spec, blocks, self.head_V.copy(), self.head_c.copy())


def is_orthogonal_name(name: str) -> bool:
    return name.endswith((".R", ".M"))


__all__ = ["ModelSpec", "LipNeXt", "ForwardCache", "OrthogonalParam", "is_orthogonal_name"]

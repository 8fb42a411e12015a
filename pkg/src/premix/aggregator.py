"""Masked transformer MIL aggregator with attention pooling and two heads.

Layout of one pass::

    bag regions -> affine embed (+ sinusoidal positions) -> L pre-norm encoder
    layers (masked multi-head attention, GELU feed-forward) -> final norm
    -> attention pooling -> slide embedding
    slide embedding -> projector (pre-training)  or  -> classifier (downstream)

Padded positions are held at exactly zero through the whole encoder, so the
pooling step needs only the validity mask. Mixup at the input (``loc1``),
after the first attention residual (``loc2``) or at the encoder output
(``loc3``) is selected with :class:`MixSpec`.

Parameters live in :class:`AggregatorParams` as plain numpy arrays.  Every
forward function accepts an optional ``leaves`` dict of autograd tensors so
several passes can share one graph (the pre-training loss needs four).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from premix import autograd as ag
from premix.autograd import Tensor
from premix.bagio import PaddedBatch
from premix.mixing import LOCATIONS, manifold_mix


@dataclass(frozen=True)
class ArchConfig:
    d: int = 192
    hidden: int = 192
    layers: int = 2
    heads: int = 3
    ff_ratio: int = 4
    attn_dim: int = 128
    projector: tuple[int, ...] = (512, 512, 256)
    identity_projector: bool = False
    positional: bool = True
    n_classes: int = 2
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "projector", tuple(int(p) for p in self.projector))

    def validate(self) -> None:
        if min(self.d, self.hidden, self.layers, self.heads, self.ff_ratio, self.attn_dim) < 1:
            raise ValueError("architecture sizes must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not self.identity_projector and not self.projector:
            raise ValueError("projector needs at least one layer")

    @property
    def out_dim(self) -> int:
        return self.hidden if self.identity_projector else self.projector[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projector"] = list(self.projector)
        return d


@dataclass(frozen=True)
class MixSpec:
    """One concrete mixing decision for a forward pass.

    ``location`` is one location name or a tuple of them; every listed
    location mixes with the same ``lam``.
    """

    location: str | tuple[str, ...]
    lam: float

    def __post_init__(self) -> None:
        for loc in self.sites:
            if loc not in LOCATIONS:
                raise ValueError(f"unknown mixing location {loc!r}")

    @property
    def sites(self) -> tuple[str, ...]:
        return (self.location,) if isinstance(self.location, str) else tuple(self.location)


@dataclass(frozen=True)
class MixConfig:
    locations: tuple[str, ...] = ("loc1", "loc2", "loc3")
    beta_a: float = 1.0
    beta_b: float = 1.0
    # "one": a single enabled location per batch; "all": every enabled location
    policy: str = "one"

    def __post_init__(self) -> None:
        object.__setattr__(self, "locations", tuple(self.locations))
        for loc in self.locations:
            if loc not in LOCATIONS:
                raise ValueError(f"unknown mixing location {loc!r}")
        if self.policy not in ("one", "all"):
            raise ValueError(f"mixing policy must be 'one' or 'all', got {self.policy!r}")

    @property
    def enabled(self) -> bool:
        return bool(self.locations)

    def draw(self, rng: np.random.Generator) -> MixSpec | None:
        """One batch-wide lambda and, under policy "one", one uniformly chosen location."""
        if not self.locations:
            return None
        if self.policy == "all":
            return MixSpec(self.locations, float(rng.beta(self.beta_a, self.beta_b)))
        loc = self.locations[int(rng.integers(len(self.locations)))]
        return MixSpec(loc, float(rng.beta(self.beta_a, self.beta_b)))


def _is_bias_or_norm(name: str) -> bool:
    parts = name.split(".")
    return parts[-1] == "b" or any(p.startswith(("ln", "bn")) for p in parts)


@dataclass
class AggregatorParams:
    config: ArchConfig
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def group(self, name: str) -> str:
        return "bias_and_norm" if _is_bias_or_norm(name) else "weights"

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.tensors.items()}

    def copy(self) -> "AggregatorParams":
        return AggregatorParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    h, a = cfg.hidden, cfg.attn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed.w": (cfg.d, h), "embed.b": (h,)}
    for l in range(cfg.layers):
        p = f"enc{l}."
        shapes[p + "ln1.g"] = (h,)
        shapes[p + "ln1.b"] = (h,)
        for m in "qkvo":
            shapes[p + f"attn.{m}.w"] = (h, h)
            shapes[p + f"attn.{m}.b"] = (h,)
        shapes[p + "ln2.g"] = (h,)
        shapes[p + "ln2.b"] = (h,)
        shapes[p + "ff1.w"] = (h, h * cfg.ff_ratio)
        shapes[p + "ff1.b"] = (h * cfg.ff_ratio,)
        shapes[p + "ff2.w"] = (h * cfg.ff_ratio, h)
        shapes[p + "ff2.b"] = (h,)
    shapes["enc.lnf.g"] = (h,)
    shapes["enc.lnf.b"] = (h,)
    shapes["pool.v.w"] = (h, a)
    shapes["pool.v.b"] = (a,)
    shapes["pool.w"] = (a,)
    if cfg.identity_projector:
        shapes["proj0.w"] = (h, h)
        shapes["proj0.b"] = (h,)
    else:
        dims = (h,) + cfg.projector
        last = len(cfg.projector) - 1
        for k in range(len(cfg.projector)):
            shapes[f"proj{k}.w"] = (dims[k], dims[k + 1])
            shapes[f"proj{k}.b"] = (dims[k + 1],)
            if k < last:
                shapes[f"proj{k}.bn.g"] = (dims[k + 1],)
                shapes[f"proj{k}.bn.b"] = (dims[k + 1],)
    shapes["cls.w"] = (h, cfg.n_classes)
    shapes["cls.b"] = (cfg.n_classes,)
    return shapes


def init_params(seed: int, cfg: ArchConfig, dtype=np.float32) -> AggregatorParams:
    """Uniform fan-in init for weights, zero biases, unit/zero norm affines."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif _is_bias_or_norm(name):
            arr = np.zeros(shape)
        elif cfg.identity_projector and name == "proj0.w":
            arr = np.eye(shape[0])
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(dtype)
    buffers = {}
    if not cfg.identity_projector:
        for k, p in enumerate(cfg.projector[:-1]):
            buffers[f"proj{k}.bn.mean"] = np.zeros(p, dtype=dtype)
            buffers[f"proj{k}.bn.var"] = np.ones(p, dtype=dtype)
    return AggregatorParams(cfg, tensors, buffers)


@dataclass
class ForwardCache:
    """The recorded graph of one (or several chained) forward passes."""

    leaves: dict[str, Tensor]
    inputs: list[Tensor]
    output: Tensor
    valid: np.ndarray | None = None


def backward(cache: ForwardCache, grad_output=None):
    """Exact gradients of ``sum(output * grad_output)``.

    Returns ``(param_grads, input_grad)``; ``input_grad`` is a list when the
    cache holds several inputs.
    """
    if grad_output is not None and np.shape(grad_output) not in ((), cache.output.shape):
        raise ValueError(
            f"output gradient shape {np.shape(grad_output)} does not match {cache.output.shape}"
        )
    for t in list(cache.leaves.values()) + cache.inputs:
        t.grad = None
    cache.output.backward(grad_output)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in cache.leaves.items()
    }
    ins = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in cache.inputs]
    return grads, (ins[0] if len(ins) == 1 else ins)


# -- building blocks ---------------------------------------------------------


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def masked_softmax(scores, valid):
    """Softmax restricted to ``valid`` entries; arrays in, array out."""
    if isinstance(scores, Tensor):
        return ag.masked_softmax(scores, valid)
    with ag.no_grad():
        return ag.masked_softmax(Tensor(np.asarray(scores, dtype=float)), valid).data


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return c * ag.power(var + eps, -0.5) * g + b


def _mask3(valid: np.ndarray, dtype) -> np.ndarray:
    return valid[..., None].astype(dtype)


def _attention(x: Tensor, valid: np.ndarray, lv: dict, p: str, heads: int) -> Tensor:
    n, r, h = x.shape
    dh = h // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(n, r, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ lv[p + "attn.q.w"] + lv[p + "attn.q.b"])
    k = split(x @ lv[p + "attn.k.w"] + lv[p + "attn.k.b"])
    v = split(x @ lv[p + "attn.v.w"] + lv[p + "attn.v.b"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ag.masked_softmax(scores, valid[:, None, None, :])
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, r, h)
    return ctx @ lv[p + "attn.o.w"] + lv[p + "attn.o.b"]


def _as_input(params: AggregatorParams, batch) -> tuple[Tensor, np.ndarray]:
    if isinstance(batch, PaddedBatch):
        data, valid = batch.data, batch.valid
    else:
        data, valid = batch
    if isinstance(data, Tensor):
        return data, np.asarray(valid, dtype=bool)
    return Tensor(np.asarray(data, dtype=params.dtype), requires_grad=True), np.asarray(
        valid, dtype=bool
    )


def encoder_forward(
    params: AggregatorParams,
    batch,
    mix: MixSpec | None = None,
    leaves: dict[str, Tensor] | None = None,
):
    """Run the masked encoder. Returns ``(hidden, valid, cache)``.

    ``valid`` is the mask after mixing (the union of partner masks when a
    mixing location fired).
    """
    cfg = params.config
    lv = leaves if leaves is not None else params.leaves()
    x_in, valid = _as_input(params, batch)
    if x_in.shape[-1] != cfg.d:
        raise ValueError(f"input feature dim {x_in.shape[-1]} != configured d={cfg.d}")
    if not valid.any(axis=1).all():
        raise ValueError("every sample needs at least one valid region")
    dtype = params.dtype

    x = x_in
    if mix is not None and "loc1" in mix.sites:
        x, valid = manifold_mix(x, valid, mix.lam)
    m = _mask3(valid, dtype)
    x = x @ lv["embed.w"] + lv["embed.b"]
    if cfg.positional:
        x = x + positional_encoding(x.shape[1], cfg.hidden).astype(dtype)
    x = x * m

    for l in range(cfg.layers):
        p = f"enc{l}."
        a = _attention(_layer_norm(x, lv[p + "ln1.g"], lv[p + "ln1.b"], cfg.ln_eps), valid, lv, p, cfg.heads)
        x = x + a * m
        if l == 0 and mix is not None and "loc2" in mix.sites:
            x, valid = manifold_mix(x, valid, mix.lam)
            m = _mask3(valid, dtype)
        f = _layer_norm(x, lv[p + "ln2.g"], lv[p + "ln2.b"], cfg.ln_eps)
        f = ag.gelu(f @ lv[p + "ff1.w"] + lv[p + "ff1.b"]) @ lv[p + "ff2.w"] + lv[p + "ff2.b"]
        x = x + f * m

    x = _layer_norm(x, lv["enc.lnf.g"], lv["enc.lnf.b"], cfg.ln_eps) * m
    if mix is not None and "loc3" in mix.sites:
        x, valid = manifold_mix(x, valid, mix.lam)
    return x, valid, ForwardCache(lv, [x_in], x, valid)


def attention_pool(params: AggregatorParams, hidden, valid, leaves=None) -> Tensor:
    """Attention pooling: weights ``softmax_valid(w . tanh(V h_t))`` over regions."""
    lv = leaves if leaves is not None else params.leaves()
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden, dtype=params.dtype))
    n, r, h = hidden.shape
    scores = (ag.tanh(hidden @ lv["pool.v.w"] + lv["pool.v.b"]) @ lv["pool.w"].reshape(-1, 1)).reshape(n, r)
    weights = ag.masked_softmax(scores, valid)
    return (weights.reshape(n, 1, r) @ hidden).reshape(n, h)


def project(params: AggregatorParams, embedding, training: bool = True, leaves=None) -> Tensor:
    """Projector head: (affine -> batch norm -> ReLU) x k, then affine."""
    cfg = params.config
    lv = leaves if leaves is not None else params.leaves()
    z = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding, dtype=params.dtype))
    if cfg.identity_projector:
        return z @ lv["proj0.w"] + lv["proj0.b"]
    n = z.shape[0]
    if training and n < 2:
        raise ValueError("projector batch norm needs a batch of at least 2 in training mode")
    last = len(cfg.projector) - 1
    for k in range(last + 1):
        z = z @ lv[f"proj{k}.w"] + lv[f"proj{k}.b"]
        if k == last:
            break
        key = f"proj{k}.bn"
        if training:
            mu = z.mean(axis=0, keepdims=True)
            c = z - mu
            var = (c * c).mean(axis=0, keepdims=True)
            zn = c * ag.power(var + cfg.bn_eps, -0.5)
            mom = cfg.bn_momentum
            rm, rv = params.buffers[key + ".mean"], params.buffers[key + ".var"]
            rm *= 1 - mom
            rm += mom * mu.data[0]
            rv *= 1 - mom
            rv += mom * var.data[0] * n / (n - 1)
        else:
            rm, rv = params.buffers[key + ".mean"], params.buffers[key + ".var"]
            zn = (z - rm) * (1.0 / np.sqrt(rv + cfg.bn_eps)).astype(params.dtype)
        z = ag.relu(zn * lv[key + ".g"] + lv[key + ".b"])
    return z


def classify(params: AggregatorParams, embedding, leaves=None) -> Tensor:
    lv = leaves if leaves is not None else params.leaves()
    z = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding, dtype=params.dtype))
    return z @ lv["cls.w"] + lv["cls.b"]


# -- whole-model conveniences -------------------------------------------------


def embed(params, batch, mix: MixSpec | None = None, leaves=None):
    """Encoder + pooling. Returns ``(slide embedding N x h, cache)``."""
    lv = leaves if leaves is not None else params.leaves()
    hidden, valid, cache = encoder_forward(params, batch, mix, lv)
    emb = attention_pool(params, hidden, valid, lv)
    return emb, ForwardCache(lv, cache.inputs, emb, valid)


def projection_forward(params, batch, training: bool = True, leaves=None):
    lv = leaves if leaves is not None else params.leaves()
    emb, cache = embed(params, batch, None, lv)
    z = project(params, emb, training, lv)
    return z, ForwardCache(lv, cache.inputs, z, cache.valid)


def logits_forward(params, batch, mix: MixSpec | None = None, leaves=None):
    lv = leaves if leaves is not None else params.leaves()
    emb, cache = embed(params, batch, mix, lv)
    logits = classify(params, emb, lv)
    return logits, ForwardCache(lv, cache.inputs, logits, cache.valid)


def predict(params: AggregatorParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and slide embeddings, no graph recorded."""
    with ag.no_grad():
        emb, _ = embed(params, batch)
        logits = classify(params, emb)
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(x)
    return p / p.sum(axis=1, keepdims=True), emb.data

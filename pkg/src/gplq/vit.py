"""Small vision-transformer testbed.

Pre-norm encoder blocks, mean-pooled penultimate features, and a classifier
head, built on the gradient tape in autodiff.py. Every linear-layer input and
both attention matmul operand pairs are registered as hookable activation
sites; a hook replaces the intermediate with its fake-quantized value before
anything downstream consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quant
from .autodiff import Node, Tape
from .rng import Rng, mix_seed


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 96
    depth: int = 4
    heads: int = 3
    mlp_ratio: int = 4
    num_classes: int = 10
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio


class Model:
    """Named parameter tensors plus the registry of hookable sites."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "Model":
        rng = Rng(mix_seed(seed, 0x111717), streams=256)
        d, h = cfg.embed_dim, cfg.hidden_dim
        params: dict[str, np.ndarray] = {}

        def w(name, out_dim, in_dim, std=0.02):
            params[name + ".w"] = rng.normal((out_dim, in_dim), std=std)
            params[name + ".b"] = np.zeros(out_dim)

        def ln(name):
            params[name + ".g"] = np.ones(d)
            params[name + ".b"] = np.zeros(d)

        w("patch_embed", d, cfg.patch_dim)
        for i in range(cfg.depth):
            blk = f"block{i}"
            ln(blk + ".ln1")
            w(blk + ".qkv", 3 * d, d)
            w(blk + ".proj", d, d)
            ln(blk + ".ln2")
            w(blk + ".fc1", h, d)
            w(blk + ".fc2", d, h)
        ln("norm")
        w("head", cfg.num_classes, d)
        return cls(cfg, params)

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def linear_layers(self) -> list[str]:
        """Linear layers in forward (topological) order."""
        out = ["patch_embed"]
        for i in range(self.cfg.depth):
            blk = f"block{i}"
            out += [blk + ".qkv", blk + ".proj", blk + ".fc1", blk + ".fc2"]
        out.append("head")
        return out

    def sites(self) -> list[str]:
        """All hookable activation sites."""
        out = ["patch_embed.in"]
        for i in range(self.cfg.depth):
            blk = f"block{i}"
            out += [blk + ".qkv.in", blk + ".attn.q", blk + ".attn.k",
                    blk + ".attn.p", blk + ".attn.v",
                    blk + ".proj.in", blk + ".fc1.in", blk + ".fc2.in"]
        out.append("head.in")
        return out

    def default_quant_sites(self) -> list[str]:
        """Default activation-quantization sites: inputs of every linear layer
        except the raw-pixel patch embedding, plus both attention matmul
        operand pairs."""
        return [s for s in self.sites() if s != "patch_embed.in"]


@dataclass
class ForwardResult:
    logits: np.ndarray | None
    features: np.ndarray | None
    tape: Tape | None
    captured: dict[str, np.ndarray]


class _CaptureDone(Exception):
    pass


def patchify(batch: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    n = batch.shape[0]
    ps = cfg.patch_size
    grid = cfg.image_size // ps
    x = batch.reshape(n, cfg.channels, grid, ps, grid, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(n, grid * grid, cfg.patch_dim))


def _quant_site(tape, x: Node, site: str, state, qcfg) -> Node:
    y = quant.fake_quantize(x.value, state, qcfg)
    if tape is None:
        return Node(y)
    if state.learnable and not state.frozen:
        sleaf = tape.leaf("quant/" + site + ".scale", state.scale)

        def grad_fn(g):
            return (quant.ste_input_grad(x.value, g, state, qcfg),
                    quant.lsq_scale_grad(x.value, g, state, qcfg))

        return ad.record(tape, y, (x, sleaf), grad_fn)

    def grad_fn(g):
        return (quant.ste_input_grad(x.value, g, state, qcfg),)

    return ad.record(tape, y, (x,), grad_fn)


def _dynamic_weight_quant(tape, w: Node, qcfg) -> Node:
    # scale recomputed from the live weight each call (min-max per channel);
    # gradient passes straight through to the latent weight
    state = quant.weight_scale(w.value, qcfg)
    y = quant.fake_quantize(w.value, state, qcfg)

    def grad_fn(g):
        return (quant.ste_input_grad(w.value, g, state, qcfg),)

    return ad.record(tape, y, (w,), grad_fn)


def forward(model: Model, batch, quant_hooks=None, record: bool = False,
            weight_override=None, weight_quant_hooks=None, compensation=None,
            captures=None, stop_at_capture: bool = False) -> ForwardResult:
    """Run the encoder.

    quant_hooks: site -> (QuantizerState, QuantizerConfig); hooked
    intermediates are fake-quantized in place. weight_override substitutes
    fixed weight values per linear layer (post-training quantization);
    weight_quant_hooks fake-quantizes live weights with straight-through
    gradients (the one-shot joint-QAT baseline). compensation adds a linear
    correction term, keyed by layer. captures collects post-hook inputs of
    the named sites; with stop_at_capture the forward stops early once all
    captures are filled and returns only those.
    """
    cfg = model.cfg
    batch = np.asarray(batch, dtype=np.float64)
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise ValueError(f"batch shape {batch.shape} does not match model input {expect}")

    registry = set(model.sites())
    hooks = dict(quant_hooks or {})
    for site in hooks:
        if site not in registry:
            raise KeyError(f"unknown quantization site {site!r}")
    want = set(captures or ())
    for site in want:
        if site not in registry:
            raise KeyError(f"unknown capture site {site!r}")
    got: dict[str, np.ndarray] = {}

    tape = Tape() if record else None

    def leaf(name: str) -> Node:
        if tape is None:
            return Node(model.params[name])
        return tape.leaf(name, model.params[name])

    def hooked(site: str, node: Node) -> Node:
        if site in hooks:
            state, qcfg = hooks[site]
            node = _quant_site(tape, node, site, state, qcfg)
        if not np.all(np.isfinite(node.value)):
            raise ValueError(f"non-finite intermediate at site {site!r}")
        if site in want:
            got[site] = node.value
            if stop_at_capture and len(got) == len(want):
                raise _CaptureDone
        return node

    def lin(layer: str, x: Node) -> Node:
        if weight_override and layer in weight_override:
            w_node: Node = Node(weight_override[layer])
        elif weight_quant_hooks and layer in weight_quant_hooks:
            w_node = _dynamic_weight_quant(tape, leaf(layer + ".w"),
                                           weight_quant_hooks[layer])
        else:
            w_node = leaf(layer + ".w")
        y = ad.linear(tape, x, w_node, leaf(layer + ".b"))
        if compensation and layer in compensation:
            comp = compensation[layer]
            bias = Node(comp.bias) if comp.bias is not None else None
            y = ad.add(tape, y, ad.linear(tape, x, Node(comp.w_star), bias))
        return y

    d = cfg.embed_dim
    nheads, dh = cfg.heads, cfg.head_dim
    try:
        x = hooked("patch_embed.in", Node(patchify(batch, cfg)))
        x = lin("patch_embed", x)  # [N, T, d]
        n, t = x.value.shape[0], x.value.shape[1]
        for i in range(cfg.depth):
            blk = f"block{i}"
            h = ad.layernorm(tape, x, leaf(blk + ".ln1.g"), leaf(blk + ".ln1.b"))
            h = hooked(blk + ".qkv.in", h)
            qkv = lin(blk + ".qkv", h)  # [N, T, 3d]

            def heads_view(node):
                node = ad.reshape(tape, node, (n, t, nheads, dh))
                return ad.transpose(tape, node, (0, 2, 1, 3))  # [N, H, T, dh]

            q = heads_view(ad.narrow(tape, qkv, 0, d))
            k = heads_view(ad.narrow(tape, qkv, d, d))
            v = heads_view(ad.narrow(tape, qkv, 2 * d, d))
            q = hooked(blk + ".attn.q", q)
            k = hooked(blk + ".attn.k", k)
            att = ad.matmul(tape, q, ad.transpose(tape, k, (0, 1, 3, 2)))
            att = ad.scale(tape, att, 1.0 / math.sqrt(dh))
            p = ad.softmax_last(tape, att)  # [N, H, T, T]
            p = hooked(blk + ".attn.p", p)
            v = hooked(blk + ".attn.v", v)
            ctx = ad.matmul(tape, p, v)  # [N, H, T, dh]
            ctx = ad.reshape(tape, ad.transpose(tape, ctx, (0, 2, 1, 3)), (n, t, d))
            ctx = hooked(blk + ".proj.in", ctx)
            x = ad.add(tape, x, lin(blk + ".proj", ctx))

            h2 = ad.layernorm(tape, x, leaf(blk + ".ln2.g"), leaf(blk + ".ln2.b"))
            h2 = hooked(blk + ".fc1.in", h2)
            a = ad.gelu(tape, lin(blk + ".fc1", h2))
            a = hooked(blk + ".fc2.in", a)
            x = ad.add(tape, x, lin(blk + ".fc2", a))

        xn = ad.layernorm(tape, x, leaf("norm.g"), leaf("norm.b"))
        feats = ad.mean_axis(tape, xn, 1)  # [N, d] penultimate features
        head_in = hooked("head.in", feats)
        logits = lin("head", head_in)
    except _CaptureDone:
        return ForwardResult(None, None, None, got)

    if not np.all(np.isfinite(logits.value)):
        raise ValueError("non-finite logits")
    if tape is not None:
        tape.outputs = {"logits": logits, "features": feats}
    return ForwardResult(logits.value, feats.value, tape, got)


def backward(tape: Tape, logits_grad=None, features_grad=None) -> dict[str, np.ndarray]:
    """Gradients for all parameters (and unfrozen quantizer scales, keyed
    `quant/<site>.scale`) from upstream gradients at the logits and/or the
    penultimate features."""
    if tape is None:
        raise ValueError("forward pass was not recorded")
    seeds = {}
    if logits_grad is not None:
        seeds[tape.outputs["logits"]] = logits_grad
    if features_grad is not None:
        seeds[tape.outputs["features"]] = features_grad
    if not seeds:
        raise ValueError("no gradient seeds given")
    return ad.backward(tape, seeds)


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient (softmax - onehot) / N."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adamw() -> AdamWState:
    return AdamWState(step=0, m={}, v={})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam step, in place on params."""
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[name]
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state

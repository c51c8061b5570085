"""Unconditional and conditional (scale/bias modulated) MLPs in numpy.

Parameters live in an ordered ``dict`` of float64 arrays; weight matrices are
stored (out, in). Both architectures share the output rule: one sigmoid unit
for ``d_out == 1`` and a two-way softmax for ``d_out == 2``.

Conditional network::

    F_in  = base_branch(x_base)                  (ReLU after every layer)
    e     = cond_branch(x_cond)                  (ReLU after every layer)
    scale = W_s e + b_s ;  shift = W_b e + b_b   (single affine heads)
    out   = head(F_in * scale + shift)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError

Params = dict[str, np.ndarray]

# initial scale/shift head weights are shrunk so modulation starts near identity
HEAD_GAIN = 0.1

MAGIC = b"GRSK"
VERSION = 1


@dataclass(frozen=True)
class Architecture:
    kind: str                      # "unconditional" | "conditional"
    n_base: int
    n_cond: int
    d_out: int
    hidden: tuple[int, ...] = (256, 128, 64, 32)
    base_hidden: tuple[int, ...] = (128, 64)
    cond_hidden: tuple[int, ...] = (64, 32)
    head_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.kind not in ("unconditional", "conditional"):
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if self.d_out not in (1, 2):
            raise ConfigError(f"d_out must be 1 or 2, got {self.d_out}")
        if self.n_base < 1 or self.n_cond < 0:
            raise ConfigError("input widths must be positive")
        if self.kind == "unconditional":
            h = self.hidden
            if any(a <= b for a, b in zip(h, h[1:])):
                raise ConfigError(f"hidden widths must strictly decrease, got {h}")
        elif not self.base_hidden or not self.cond_hidden:
            raise ConfigError("conditional branches need at least one layer each")

    @property
    def modulation_width(self) -> int:
        return self.base_hidden[-1]

    def layers(self) -> list[tuple[str, int, int]]:
        """(prefix, fan_in, fan_out) for every affine layer in declaration order."""
        out = []
        if self.kind == "unconditional":
            widths = [self.n_base + self.n_cond, *self.hidden]
            out += [(f"mlp.{k}", a, b) for k, (a, b) in enumerate(zip(widths, widths[1:]))]
            out.append(("out", widths[-1], self.d_out))
            return out
        widths = [self.n_base, *self.base_hidden]
        out += [(f"base.{k}", a, b) for k, (a, b) in enumerate(zip(widths, widths[1:]))]
        widths = [self.n_cond, *self.cond_hidden]
        out += [(f"cond.{k}", a, b) for k, (a, b) in enumerate(zip(widths, widths[1:]))]
        h = self.modulation_width
        out.append(("scale", self.cond_hidden[-1], h))
        out.append(("shift", self.cond_hidden[-1], h))
        widths = [h, *self.head_hidden]
        out += [(f"head.{k}", a, b) for k, (a, b) in enumerate(zip(widths, widths[1:]))]
        out.append(("out", widths[-1], self.d_out))
        return out

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for prefix, fan_in, fan_out in self.layers():
            shapes.append((f"{prefix}.W", (fan_out, fan_in)))
            shapes.append((f"{prefix}.b", (fan_out,)))
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def describe(self) -> str:
        def ints(t):
            return ",".join(map(str, t))
        return (f"kind={self.kind}\nn_base={self.n_base}\nn_cond={self.n_cond}\nd_out={self.d_out}\n"
                f"hidden={ints(self.hidden)}\nbase_hidden={ints(self.base_hidden)}\n"
                f"cond_hidden={ints(self.cond_hidden)}\nhead_hidden={ints(self.head_hidden)}\n")

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)

        def ints(s):
            return tuple(int(v) for v in s.split(",") if v)
        try:
            return cls(kv["kind"], int(kv["n_base"]), int(kv["n_cond"]), int(kv["d_out"]),
                       ints(kv["hidden"]), ints(kv["base_hidden"]), ints(kv["cond_hidden"]),
                       ints(kv["head_hidden"]))
        except KeyError as exc:
            raise ConfigError(f"architecture descriptor lacks {exc}") from None


def init_params(arch: Architecture, seed: int) -> Params:
    """Glorot-uniform weights, zero biases; the scale head starts at 1."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for prefix, fan_in, fan_out in arch.layers():
        bound = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if prefix in ("scale", "shift"):
            w *= HEAD_GAIN
        params[f"{prefix}.W"] = w
        params[f"{prefix}.b"] = np.ones(fan_out) if prefix == "scale" else np.zeros(fan_out)
    return params


# --------------------------------------------------------------------------
# forward


@dataclass
class ForwardCache:
    arch: Architecture
    acts: dict[str, np.ndarray] = field(default_factory=dict)


def film(f_in, scale, bias):
    """Feature-wise modulation ``f_in * scale + bias``."""
    f_in, scale, bias = (np.asarray(a, dtype=float) for a in (f_in, scale, bias))
    if not f_in.shape == scale.shape == bias.shape:
        raise ConfigError(f"modulation shape mismatch: {f_in.shape}, {scale.shape}, {bias.shape}")
    return f_in * scale + bias


def _check(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in layer {name!r}")


def _affine(params, prefix, x, acts):
    with np.errstate(over="ignore", invalid="ignore"):
        z = x @ params[f"{prefix}.W"].T + params[f"{prefix}.b"]
    _check(prefix, z)
    if acts is not None:
        acts[f"{prefix}.in"] = x
        acts[f"{prefix}.z"] = z
    return z


def _relu_stack(params, prefix, n_layers, x, acts):
    for k in range(n_layers):
        x = np.maximum(_affine(params, f"{prefix}.{k}", x, acts), 0.0)
    return x


def _output(logits, d_out):
    if d_out == 1:
        return np.exp(-np.logaddexp(0.0, -logits))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != width:
        raise ConfigError(f"{what} has width {x.shape[1]}, network expects {width}")
    return x, single


def forward_unconditional(params: Params, arch: Architecture, x, cache: ForwardCache | None = None):
    """Probabilities of shape (N, d_out) for a batch (or (d_out,) for one row).

    ``x`` is the base vector followed by the condition vector.
    """
    x, single = _as_batch(x, arch.n_base + arch.n_cond, "input")
    acts = cache.acts if cache is not None else None
    h = _relu_stack(params, "mlp", len(arch.hidden), x, acts)
    logits = _affine(params, "out", h, acts)
    out = _output(logits, arch.d_out)
    if acts is not None:
        acts["out.p"] = out
    return out[0] if single else out


def forward_conditional(params: Params, arch: Architecture, x_base, x_cond, cache: ForwardCache | None = None):
    x_base, single = _as_batch(x_base, arch.n_base, "base input")
    x_cond, _ = _as_batch(np.asarray(x_cond, dtype=float).reshape(x_base.shape[0], -1),
                          arch.n_cond, "condition input")
    acts = cache.acts if cache is not None else None
    f_in = _relu_stack(params, "base", len(arch.base_hidden), x_base, acts)
    emb = _relu_stack(params, "cond", len(arch.cond_hidden), x_cond, acts)
    scale = _affine(params, "scale", emb, acts)
    shift = _affine(params, "shift", emb, acts)
    mod = film(f_in, scale, shift)
    h = _relu_stack(params, "head", len(arch.head_hidden), mod, acts)
    logits = _affine(params, "out", h, acts)
    out = _output(logits, arch.d_out)
    if acts is not None:
        acts["film.f_in"] = f_in
        acts["film.emb"] = emb
        acts["out.p"] = out
    return out[0] if single else out


def forward_base_head(params: Params, arch: Architecture, x_base):
    """Conditional network with the modulation removed: head(base_branch(x))."""
    x_base, single = _as_batch(x_base, arch.n_base, "base input")
    f_in = _relu_stack(params, "base", len(arch.base_hidden), x_base, None)
    h = _relu_stack(params, "head", len(arch.head_hidden), f_in, None)
    out = _output(_affine(params, "out", h, None), arch.d_out)
    return out[0] if single else out


def forward(params: Params, arch: Architecture, x_base, x_cond, cache: ForwardCache | None = None):
    """Dispatch on architecture; the unconditional net sees [base, cond] concatenated."""
    if arch.kind == "conditional":
        return forward_conditional(params, arch, x_base, x_cond, cache)
    xb = np.atleast_2d(np.asarray(x_base, dtype=float))
    x = np.concatenate([xb, np.asarray(x_cond, dtype=float).reshape(xb.shape[0], -1)], axis=1)
    out = forward_unconditional(params, arch, x, cache)
    return out[0] if np.ndim(x_base) == 1 else out


# --------------------------------------------------------------------------
# backward


def _affine_back(params, grads, prefix, dz, acts):
    grads[f"{prefix}.W"] = dz.T @ acts[f"{prefix}.in"]
    grads[f"{prefix}.b"] = dz.sum(axis=0)
    return dz @ params[f"{prefix}.W"]


def _relu_stack_back(params, grads, prefix, n_layers, da, acts):
    for k in reversed(range(n_layers)):
        name = f"{prefix}.{k}"
        dz = da * (acts[f"{name}.z"] > 0)
        da = _affine_back(params, grads, name, dz, acts)
    return da


def backward(params: Params, cache: ForwardCache, upstream, wrt: str = "output") -> Params:
    """Reverse-mode gradients of a scalar loss for every parameter.

    Args:
        upstream: d(loss)/d(output probabilities), shape (N, d_out); with
            ``wrt="logits"`` it is the gradient at the head's pre-activation.
    """
    arch, acts = cache.arch, cache.acts
    if "out.z" not in acts:
        raise ConfigError("cache was not filled by a forward pass")
    expected = {name for name, _ in arch.shapes()}
    if set(params) != expected:
        raise ConfigError("parameter set does not match the cached architecture")
    g = np.asarray(upstream, dtype=float).reshape(acts["out.p"].shape)
    p = acts["out.p"]
    if wrt == "output":
        if arch.d_out == 1:
            dz = g * p * (1.0 - p)
        else:
            dz = p * (g - (g * p).sum(axis=1, keepdims=True))
    elif wrt == "logits":
        dz = g
    else:
        raise ConfigError(f"wrt must be 'output' or 'logits', got {wrt!r}")

    grads: Params = {}
    if arch.kind == "unconditional":
        dh = _affine_back(params, grads, "out", dz, acts)
        _relu_stack_back(params, grads, "mlp", len(arch.hidden), dh, acts)
    else:
        dh = _affine_back(params, grads, "out", dz, acts)
        dmod = _relu_stack_back(params, grads, "head", len(arch.head_hidden), dh, acts)
        f_in, scale = acts["film.f_in"], acts["scale.z"]
        df_in = dmod * scale
        dscale = dmod * f_in
        dshift = dmod
        demb = _affine_back(params, grads, "scale", dscale, acts)
        demb = demb + _affine_back(params, grads, "shift", dshift, acts)
        _relu_stack_back(params, grads, "cond", len(arch.cond_hidden), demb, acts)
        _relu_stack_back(params, grads, "base", len(arch.base_hidden), df_in, acts)
    return {name: grads[name] for name, _ in arch.shapes()}


# --------------------------------------------------------------------------
# gradient checking


def small_architecture(kind: str, d_out: int, n_base: int = 3, n_cond: int = 2) -> Architecture:
    """A net under 64 parameters for finite-difference checks."""
    if kind == "unconditional":
        return Architecture(kind, n_base, n_cond, d_out, hidden=(4, 3))
    return Architecture(kind, n_base, n_cond, d_out, base_hidden=(3,), cond_hidden=(2,), head_hidden=(2,))


def _mean_loss(params, arch, loss, xb, xc, gt, cache=None):
    pred = forward(params, arch, xb, xc, cache)
    value, grad = loss.value_and_grad(pred, gt)
    return float(np.mean(value)), pred, grad


def grad_check(arch: Architecture, loss, seed: int, n_samples: int = 4, eps: float = 1e-5,
               backward_fn: Callable = backward) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter is |a - n| / max(1e-8, |a| + |n|).
    """
    if loss.d_out != arch.d_out:
        raise ConfigError("loss and architecture disagree on d_out")
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed)
    # nonzero biases so every code path carries signal
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.3, size=params[name].shape)
    xb = rng.normal(size=(n_samples, arch.n_base))
    xc = rng.normal(size=(n_samples, arch.n_cond))
    pred = loss.outage_prob(forward(params, arch, xb, xc))
    gt = rng.uniform(0.0, 1.0, size=n_samples)
    # keep the exponential loss away from its |.| kink
    close = np.abs(gt - pred) < 0.05
    gt[close] = np.clip(pred[close] + np.where(pred[close] < 0.5, 0.2, -0.2), 0.0, 1.0)

    cache = ForwardCache(arch)
    _, pred, grad = _mean_loss(params, arch, loss, xb, xc, gt, cache)
    upstream = np.reshape(grad, pred.shape) / n_samples
    analytic = backward_fn(params, cache, upstream)

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up, _, _ = _mean_loss(params, arch, loss, xb, xc, gt)
            flat[k] = orig - eps
            down, _, _ = _mean_loss(params, arch, loss, xb, xc, gt)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            err = abs(ga[k] - num) / max(1e-8, abs(ga[k]) + abs(num))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arch: Architecture, params: Params, meta: dict[str, str] | None = None):
    """Write ``GRSK`` | u32 version | u32 len | descriptor text | float64 LE params."""
    text = arch.describe()
    for key, value in (meta or {}).items():
        if "\n" in str(value) or "=" in key:
            raise ConfigError(f"checkpoint metadata {key!r} must be a single line")
        text += f"meta.{key}={value}\n"
    blob = text.encode("utf-8")
    flat = np.concatenate([params[name].reshape(-1) for name, _ in arch.shapes()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[Architecture, Params, dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: not a gridrisk checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    text = data[12:12 + n].decode("utf-8")
    arch = Architecture.parse("\n".join(l for l in text.splitlines() if not l.startswith("meta.")))
    meta = dict(l[5:].split("=", 1) for l in text.splitlines() if l.startswith("meta."))
    flat = np.frombuffer(data[12 + n:], dtype="<f8").astype(float)
    if flat.size != arch.n_params():
        raise ConfigError(f"{path}: expected {arch.n_params()} parameters, found {flat.size}")
    params, pos = {}, 0
    for name, shape in arch.shapes():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return arch, params, meta

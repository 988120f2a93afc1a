"""Neural layers over sequences, declarative architecture specs, and the
parameter/FLOP counting rules used throughout the benchmark.

Sequences are ``[T, dim]`` tensors.  The GRU uses one bias per gate
(z, r, candidate) and applies the reset gate to the previous state before the
recurrent candidate matrix:

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_c + (r * h) U_c + b_c)
    h' = (1 - z) * c + z * h

``gru_sequence`` runs the whole unrolled loop as a single graph node with a
hand-derived backward (the per-step input projections are batched into one
matmul), which is what makes desk-scale training affordable;
``gru_cell_step`` is the reference single-step path built from generic ops
and must agree with it exactly.

FLOP convention: one multiply-accumulate is one FLOP, so a component's FLOPs
per input timestep equal its parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ContractError, ShapeError
from .tensor import Tensor

GATE_ALPHA = 0.125  # LeakyReLU slope used everywhere in the reference models
CONTROLLER_PARAMS = 2  # the surprisal controller is exactly (w, b)


# ---------------------------------------------------------------------------
# Declarative specs
# ---------------------------------------------------------------------------

_KINDS = {"linear", "gru", "bigru", "conv1d", "leaky_relu", "dropout", "log_softmax"}


@dataclass
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int | None = None  # conv1d tap count (odd)
    p: float | None = None  # dropout probability
    alpha: float | None = None  # leaky_relu slope

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("linear", "gru", "bigru", "conv1d"):
            if self.in_dim <= 0 or self.out_dim <= 0:
                raise ShapeError(f"{self.kind}: dims must be positive, got "
                                 f"{self.in_dim}x{self.out_dim}")
        if self.kind == "bigru" and self.out_dim % 2 != 0:
            raise ShapeError(f"bigru: out_dim must be even, got {self.out_dim}")
        if self.kind == "conv1d":
            if self.kernel is None or self.kernel % 2 == 0 or self.kernel < 1:
                raise ShapeError(f"conv1d: kernel length must be odd, got {self.kernel}")
        if self.kind == "dropout" and not (self.p is not None and 0 <= self.p < 1):
            raise ShapeError(f"dropout: p must lie in [0, 1), got {self.p}")

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("linear", "gru", "bigru", "conv1d"):
            d["in"] = self.in_dim
            d["out"] = self.out_dim
        if self.kernel is not None:
            d["kernel"] = self.kernel
        if self.p is not None:
            d["p"] = self.p
        if self.alpha is not None:
            d["alpha"] = self.alpha
        return d

    @staticmethod
    def from_json(d: dict) -> "LayerSpec":
        spec = LayerSpec(
            kind=d["kind"],
            in_dim=d.get("in", 0),
            out_dim=d.get("out", 0),
            kernel=d.get("kernel"),
            p=d.get("p"),
            alpha=d.get("alpha"),
        )
        spec.validate()
        return spec


def linear(i, o):
    return LayerSpec("linear", i, o)


def gru(i, o):
    return LayerSpec("gru", i, o)


def bigru(i, o):
    return LayerSpec("bigru", i, o)


def conv1d(i, o, kernel=11):
    return LayerSpec("conv1d", i, o, kernel=kernel)


def lrelu(alpha=GATE_ALPHA):
    return LayerSpec("leaky_relu", alpha=alpha)


def drop(p=0.5):
    return LayerSpec("dropout", p=p)


def logsm():
    return LayerSpec("log_softmax")


def stack_dims(specs: list[LayerSpec]) -> tuple[int, int]:
    """(input dim, output dim) of a stack, ignoring shape-preserving layers."""
    dims = [s for s in specs if s.kind in ("linear", "gru", "bigru", "conv1d")]
    if not dims:
        raise ShapeError("stack has no dimensioned layers")
    return dims[0].in_dim, dims[-1].out_dim


@dataclass
class ArchitectureSpec:
    """Named layer stacks for the full conditional model.

    ``pre_net``/``post_net`` may be None; the experts must then consume the
    routing input / emit the model output directly.  ``label_count`` includes
    the blank symbol.
    """

    ar_encoder: list[LayerSpec]
    ar_predictor: LayerSpec
    pre_net: list[LayerSpec] | None
    small_net: list[LayerSpec]
    big_net: list[LayerSpec]
    post_net: list[LayerSpec] | None
    label_count: int
    name: str = "custom"

    def validate(self) -> None:
        for s in self.all_layers():
            s.validate()
        s_in, s_out = stack_dims(self.small_net)
        b_in, b_out = stack_dims(self.big_net)
        if (s_in, s_out) != (b_in, b_out):
            raise ShapeError(
                f"small/big experts must share dims: {s_in}x{s_out} vs {b_in}x{b_out}"
            )
        if self.pre_net is not None and stack_dims(self.pre_net)[1] != s_in:
            raise ShapeError("pre_net output dim must equal expert input dim")
        tail = self.post_net if self.post_net is not None else self.small_net
        if tail[-1].kind != "log_softmax":
            raise ShapeError("model output must end in log_softmax")
        out_dim = stack_dims(tail)[1] if self.post_net is not None else s_out
        if out_dim != self.label_count:
            raise ShapeError(
                f"output dim {out_dim} != label_count {self.label_count}"
            )

    def all_layers(self):
        for stck in (self.ar_encoder, [self.ar_predictor], self.pre_net or [],
                     self.small_net, self.big_net, self.post_net or []):
            yield from stck

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "label_count": self.label_count,
            "ar_encoder": [s.to_json() for s in self.ar_encoder],
            "ar_predictor": self.ar_predictor.to_json(),
            "pre_net": None if self.pre_net is None else [s.to_json() for s in self.pre_net],
            "small_net": [s.to_json() for s in self.small_net],
            "big_net": [s.to_json() for s in self.big_net],
            "post_net": None if self.post_net is None else [s.to_json() for s in self.post_net],
        }

    @staticmethod
    def from_json(d: dict) -> "ArchitectureSpec":
        def stck(v):
            return None if v is None else [LayerSpec.from_json(s) for s in v]

        spec = ArchitectureSpec(
            ar_encoder=stck(d["ar_encoder"]),
            ar_predictor=LayerSpec.from_json(d["ar_predictor"]),
            pre_net=stck(d.get("pre_net")),
            small_net=stck(d["small_net"]),
            big_net=stck(d["big_net"]),
            post_net=stck(d.get("post_net")),
            label_count=d["label_count"],
            name=d.get("name", "custom"),
        )
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Parameter / FLOP counting
# ---------------------------------------------------------------------------


def layer_params(spec: LayerSpec) -> int:
    if spec.kind == "linear":
        return spec.in_dim * spec.out_dim + spec.out_dim
    if spec.kind == "gru":
        h = spec.out_dim
        return 3 * (spec.in_dim * h + h * h + h)
    if spec.kind == "bigru":
        h = spec.out_dim // 2
        return 2 * 3 * (spec.in_dim * h + h * h + h)
    if spec.kind == "conv1d":
        return spec.kernel * spec.in_dim * spec.out_dim + spec.out_dim
    return 0


def stack_params(specs: list[LayerSpec] | None) -> int:
    return 0 if specs is None else sum(layer_params(s) for s in specs)


@dataclass
class ParamCount:
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def __getitem__(self, key: str) -> int:
        return self.components[key]

    def rounded_millions(self, key: str) -> float:
        """Value in millions rounded to 3 significant figures (reporting style)."""
        v = self.components[key]
        if v == 0:
            return 0.0
        m = v / 1e6
        from math import floor, log10

        digits = 2 - floor(log10(abs(m)))
        return round(m, digits)


def count_params(spec: ArchitectureSpec) -> ParamCount:
    return ParamCount({
        "ar": stack_params(spec.ar_encoder) + layer_params(spec.ar_predictor),
        "pre_net": stack_params(spec.pre_net),
        "small_net": stack_params(spec.small_net),
        "big_net": stack_params(spec.big_net),
        "post_net": stack_params(spec.post_net),
        "controller": CONTROLLER_PARAMS,
    })


def flops_per_timestep(specs: list[LayerSpec] | None) -> int:
    """FLOPs a component spends on one input timestep (== its parameter count)."""
    return stack_params(specs)


# ---------------------------------------------------------------------------
# Parameterised layers
# ---------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Linear:
    def __init__(self, in_dim, out_dim, rng, name="linear"):
        self.W = uniform_init(rng, (in_dim, out_dim), in_dim, f"{name}.W")
        self.b = zeros_param(out_dim, f"{name}.b")

    def forward(self, x, training=False, rng=None):
        return tz.matmul(x, self.W) + self.b

    def params(self):
        return [self.W, self.b]


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x W + b for ``x`` of shape [.., in]."""
    return tz.matmul(x, W) + b


class GRULayer:
    """Unidirectional GRU over a [T, in] sequence, zero initial state."""

    def __init__(self, in_dim, hidden, rng, name="gru"):
        self.hidden = hidden
        self.W = uniform_init(rng, (in_dim, 3 * hidden), in_dim, f"{name}.W")
        self.U = uniform_init(rng, (hidden, 3 * hidden), hidden, f"{name}.U")
        self.b = zeros_param(3 * hidden, f"{name}.b")

    def forward(self, x, training=False, rng=None):
        return gru_sequence(x, self.W, self.U, self.b)

    def params(self):
        return [self.W, self.U, self.b]


def gru_cell_step(x_t: Tensor, h_prev: Tensor, params: GRULayer) -> Tensor:
    """One GRU step via generic ops; reference path for the fused sequence op."""
    H = params.hidden
    ax = tz.matmul(x_t, params.W) + params.b
    a_zr = tz.narrow(ax, 0, 0, 2 * H) + tz.matmul(h_prev, tz.narrow(params.U, 1, 0, 2 * H))
    zr = tz.sigmoid(a_zr)
    z = tz.narrow(zr, 0, 0, H)
    r = tz.narrow(zr, 0, H, 2 * H)
    a_c = tz.narrow(ax, 0, 2 * H, 3 * H) + tz.matmul(r * h_prev, tz.narrow(params.U, 1, 2 * H, 3 * H))
    c = tz.tanh(a_c)
    return (1.0 + (-z)) * c + z * h_prev


def gru_sequence(seq: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """Full unrolled GRU as one graph node with hand-derived BPTT."""
    X = seq.data
    if X.ndim != 2:
        raise ShapeError(f"gru_sequence: expected [T, in], got {X.shape}")
    T = X.shape[0]
    if T < 1:
        raise ContractError("gru_sequence: empty sequence")
    H = U.data.shape[0]
    AX = X @ W.data + b.data  # [T, 3H]
    Uzr = U.data[:, : 2 * H]
    Uc = U.data[:, 2 * H:]
    Z = np.empty((T, H))
    R = np.empty((T, H))
    C = np.empty((T, H))
    Hs = np.zeros((T + 1, H))  # Hs[0] is the zero initial state
    h = Hs[0]
    for t in range(T):
        zr = _sig(AX[t, : 2 * H] + h @ Uzr)
        z = zr[:H]
        r = zr[H:]
        c = np.tanh(AX[t, 2 * H:] + (r * h) @ Uc)
        h = (1.0 - z) * c + z * h
        Z[t] = z
        R[t] = r
        C[t] = c
        Hs[t + 1] = h

    def bw(g):
        dA = np.empty((T, 3 * H))
        dh = np.zeros(H)
        for t in range(T - 1, -1, -1):
            dh = dh + g[t]
            z, r, c, hp = Z[t], R[t], C[t], Hs[t]
            da_c = dh * (1.0 - z) * (1.0 - c * c)
            da_z = dh * (hp - c) * z * (1.0 - z)
            drh = da_c @ Uc.T
            da_r = drh * hp * r * (1.0 - r)
            dA[t, :H] = da_z
            dA[t, H: 2 * H] = da_r
            dA[t, 2 * H:] = da_c
            dh = dh * z + drh * r + np.concatenate((da_z, da_r)) @ Uzr.T
        if W.requires_grad:
            W._accumulate(X.T @ dA)
        if U.requires_grad:
            dU = np.empty_like(U.data)
            Hprev = Hs[:-1]
            dU[:, : 2 * H] = Hprev.T @ dA[:, : 2 * H]
            dU[:, 2 * H:] = (R * Hprev).T @ dA[:, 2 * H:]
            U._accumulate(dU)
        if b.requires_grad:
            b._accumulate(dA.sum(axis=0))
        if seq.requires_grad:
            seq._accumulate(dA @ W.data.T)

    return tz._result(Hs[1:].copy(), (seq, W, U, b), bw)


def _sig(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_forward(seq: Tensor, params: GRULayer, h0=None) -> Tensor:
    """Left-to-right GRU over [T, in]; ``h0`` other than zeros is unsupported."""
    if seq.data.ndim != 2 or seq.data.shape[0] < 1:
        raise ContractError(f"gru_forward: need a nonempty [T, in] sequence, got {seq.data.shape}")
    if h0 is not None and np.any(np.asarray(h0) != 0):
        raise ContractError("gru_forward: only the zero initial state is supported")
    return gru_sequence(seq, params.W, params.U, params.b)


class BiGRU:
    def __init__(self, in_dim, out_dim, rng, name="bigru"):
        h = out_dim // 2
        self.fwd = GRULayer(in_dim, h, rng, f"{name}.fwd")
        self.bwd = GRULayer(in_dim, h, rng, f"{name}.bwd")

    def forward(self, x, training=False, rng=None):
        return bigru_forward(x, self.fwd, self.bwd)

    def params(self):
        return self.fwd.params() + self.bwd.params()


def bigru_forward(seq: Tensor, fwd: GRULayer, bwd: GRULayer) -> Tensor:
    """Concat of the forward pass and the time-reversed backward pass."""
    T = seq.data.shape[0]
    rev = np.arange(T - 1, -1, -1)
    out_f = gru_forward(seq, fwd)
    out_b = tz.take_rows(gru_forward(tz.take_rows(seq, rev), bwd), rev)
    return tz.concat([out_f, out_b], axis=1)


class Conv1D:
    """Length-preserving 1-D cross-correlation with zero same-padding.

    Kernels are stored flattened as [L*in, out]; tap l occupies rows
    [l*in, (l+1)*in).
    """

    def __init__(self, in_dim, out_dim, kernel, rng, name="conv1d"):
        if kernel % 2 == 0:
            raise ShapeError(f"conv1d: kernel length must be odd, got {kernel}")
        self.in_dim = in_dim
        self.kernel = kernel
        self.K = uniform_init(rng, (kernel * in_dim, out_dim), kernel * in_dim, f"{name}.K")
        self.b = zeros_param(out_dim, f"{name}.b")

    def forward(self, x, training=False, rng=None):
        return conv1d_forward(x, self.K, self.b, self.kernel)

    def params(self):
        return [self.K, self.b]


def conv1d_forward(seq: Tensor, K: Tensor, b: Tensor, kernel: int) -> Tensor:
    if kernel % 2 == 0:
        raise ShapeError(f"conv1d: kernel length must be odd, got {kernel}")
    T, in_dim = seq.data.shape
    pad = (kernel - 1) // 2
    zero = Tensor(np.zeros((pad, in_dim)))
    padded = tz.concat([zero, seq, zero], axis=0) if pad else seq
    out = None
    for tap in range(kernel):
        window = tz.narrow(padded, 0, tap, tap + T)
        term = tz.matmul(window, tz.narrow(K, 0, tap * in_dim, (tap + 1) * in_dim))
        out = term if out is None else out + term
    return out + b


class LeakyReLU:
    def __init__(self, alpha):
        self.alpha = alpha

    def forward(self, x, training=False, rng=None):
        return tz.leaky_relu(x, self.alpha)

    def params(self):
        return []


class Dropout:
    def __init__(self, p):
        self.p = p

    def forward(self, x, training=False, rng=None):
        return tz.dropout(x, self.p, rng, training)

    def params(self):
        return []


class LogSoftmax:
    def forward(self, x, training=False, rng=None):
        return tz.log_softmax(x)

    def params(self):
        return []


class Stack:
    """Sequential container built from a list of LayerSpec."""

    def __init__(self, specs: list[LayerSpec], rng: np.random.Generator, name="stack"):
        self.specs = specs
        self.layers = []
        for i, s in enumerate(specs):
            s.validate()
            lname = f"{name}.{i}"
            if s.kind == "linear":
                self.layers.append(Linear(s.in_dim, s.out_dim, rng, lname))
            elif s.kind == "gru":
                self.layers.append(GRULayer(s.in_dim, s.out_dim, rng, lname))
            elif s.kind == "bigru":
                self.layers.append(BiGRU(s.in_dim, s.out_dim, rng, lname))
            elif s.kind == "conv1d":
                self.layers.append(Conv1D(s.in_dim, s.out_dim, s.kernel, rng, lname))
            elif s.kind == "leaky_relu":
                self.layers.append(LeakyReLU(s.alpha))
            elif s.kind == "dropout":
                self.layers.append(Dropout(s.p))
            elif s.kind == "log_softmax":
                self.layers.append(LogSoftmax())

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def named_params(self):
        return [(p.name, p) for p in self.params()]


# ---------------------------------------------------------------------------
# Built-in architecture presets
# ---------------------------------------------------------------------------


def _ar_stacks(obs_dim, feature_dim):
    F = feature_dim
    enc = [gru(obs_dim, F), drop(0.5), linear(F, F), gru(F, F), drop(0.5), linear(F, F)]
    return enc, linear(F, obs_dim)


def main_spec(obs_dim=80, feature_dim=512, big_hidden=2048, label_count=40,
              use_ar_features=True) -> ArchitectureSpec:
    """Main experiment architecture: BiGRU pre/post nets around FC experts."""
    F = feature_dim
    route = F if use_ar_features else obs_dim
    enc, pred = _ar_stacks(obs_dim, F)
    spec = ArchitectureSpec(
        ar_encoder=enc,
        ar_predictor=pred,
        pre_net=[bigru(route, F), drop(0.5)],
        small_net=[linear(F, F), lrelu()],
        big_net=[linear(F, big_hidden), lrelu(), linear(big_hidden, F), lrelu()],
        post_net=[bigru(F, F), drop(0.5), linear(F, label_count), logsm()],
        label_count=label_count,
        name="main",
    )
    spec.validate()
    return spec


def model1_spec(obs_dim=80, feature_dim=512, big_hidden=2048, label_count=40,
                use_ar_features=True, _dropout_pre=False, _name="model1") -> ArchitectureSpec:
    """Conv pre-net, experts mapping straight to log-probs, no post-net."""
    F = feature_dim
    route = F if use_ar_features else obs_dim
    enc, pred = _ar_stacks(obs_dim, F)
    pre = [conv1d(route, F, 11), lrelu()]
    if _dropout_pre:
        pre.append(drop(0.5))
    spec = ArchitectureSpec(
        ar_encoder=enc,
        ar_predictor=pred,
        pre_net=pre,
        small_net=[linear(F, label_count), logsm()],
        big_net=[linear(F, big_hidden), lrelu(), linear(big_hidden, label_count), logsm()],
        post_net=None,
        label_count=label_count,
        name=_name,
    )
    spec.validate()
    return spec


def model2_spec(**kw) -> ArchitectureSpec:
    return model1_spec(_dropout_pre=True, _name="model2", **kw)


def model3_spec(obs_dim=80, feature_dim=512, big_hidden=None, label_count=40,
                use_ar_features=True) -> ArchitectureSpec:
    """No pre-net: conv experts consume the routing input directly."""
    F = feature_dim
    route = F if use_ar_features else obs_dim
    enc, pred = _ar_stacks(obs_dim, F)
    conv_width = F if big_hidden is None else big_hidden
    spec = ArchitectureSpec(
        ar_encoder=enc,
        ar_predictor=pred,
        pre_net=None,
        small_net=[drop(0.5), conv1d(route, label_count, 11), logsm()],
        big_net=[drop(0.5), conv1d(route, conv_width, 11), lrelu(),
                 linear(conv_width, label_count), logsm()],
        post_net=None,
        label_count=label_count,
        name="model3",
    )
    spec.validate()
    return spec


PRESETS = {
    "main": main_spec,
    "model1": model1_spec,
    "model2": model2_spec,
    "model3": model3_spec,
}


def build_preset(name: str, **overrides) -> ArchitectureSpec:
    if name not in PRESETS:
        raise ShapeError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](**overrides)

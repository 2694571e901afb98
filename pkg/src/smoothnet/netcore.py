"""Dense feedforward networks: evaluation, norms, composition, serialization.

A network is a sequence of affine layers with the activation applied between
consecutive layers (never after the last). Composition fuses the junction
affine maps so that depth bookkeeping matches the constructions: chaining a
depth-L1 net into a depth-L2 net yields depth L1 + L2 - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import activations as acts
from .activations import Activation
from .errors import NonFiniteIntermediate, PreconditionFailed, ShapeMismatch

Layer = tuple[np.ndarray, np.ndarray]

# Row chunk for batched evaluation; bounds the size of hidden activations.
_CHUNK_ELEMS = 1 << 23


@dataclass(frozen=True, eq=False)
class Network:
    activation: Activation
    layers: tuple[Layer, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("a network needs at least one affine layer")
        fixed = []
        for W, b in self.layers:
            W = np.array(W, dtype=np.float64, ndmin=2)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if W.shape[0] != b.shape[0]:
                raise ShapeMismatch(f"weight rows {W.shape[0]} != bias length {b.shape[0]}")
            W.setflags(write=False)
            b.setflags(write=False)
            fixed.append((W, b))
        for (W1, _), (W2, _) in zip(fixed, fixed[1:]):
            if W2.shape[1] != W1.shape[0]:
                raise ShapeMismatch(f"layer chain broken: {W1.shape} then {W2.shape}")
        object.__setattr__(self, "layers", tuple(fixed))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def width(self) -> int:
        """Largest hidden dimension (the output dimension for depth 1)."""
        if self.depth == 1:
            return self.d_out
        return max(W.shape[0] for W, _ in self.layers[:-1])

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(W.shape[0] for W, _ in self.layers[:-1])

    @cached_property
    def _ops(self):
        ops = []
        for W, b in self.layers:
            nnz = np.count_nonzero(W)
            if W.size > 4096 and nnz < 0.25 * W.size:
                ops.append((sp.csr_matrix(W.T), b))
            else:
                ops.append((W.T, b))
        return ops

    def __call__(self, x):
        return evaluate(self, x)

    def with_meta(self, **kw) -> "Network":
        meta = dict(self.meta)
        meta.update(kw)
        return Network(self.activation, self.layers, meta)


def evaluate(net: Network, x) -> np.ndarray:
    """Forward pass. Accepts a single point (shape (d_in,)) or a batch (n, d_in)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != net.d_in:
        raise ShapeMismatch(f"input dim {X.shape[1]} != network d_in {net.d_in}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteIntermediate("non-finite input")
    rows = max(1, _CHUNK_ELEMS // max(1, net.width))
    out = np.empty((X.shape[0], net.d_out))
    ops = net._ops
    act = net.activation
    for s in range(0, X.shape[0], rows):
        z = X[s:s + rows]
        for li, (WT, b) in enumerate(ops):
            z = (z @ WT if not sp.issparse(WT) else np.asarray((WT.T @ z.T).T)) + b
            if li + 1 < len(ops):
                z = act.eval(z)
            if not np.all(np.isfinite(z)):
                raise NonFiniteIntermediate(f"non-finite value after layer {li + 1}")
        out[s:s + rows] = z
    return out[0] if single else out


@dataclass(frozen=True)
class NormReport:
    linf: float
    l2: float
    param_count: int


def norms(net: Network) -> NormReport:
    linf = 0.0
    sq = 0.0
    count = 0
    for W, b in net.layers:
        for a in (W, b):
            if a.size:
                linf = max(linf, float(np.max(np.abs(a))))
                sq += float(np.sum(a * a))
            count += a.size
    return NormReport(linf, math.sqrt(sq), count)


def affine_net(W, b, activation: Activation = acts.SIGMOID, meta: dict | None = None) -> Network:
    """Depth-1 network x -> W x + b."""
    return Network(activation, ((np.array(W, dtype=float, ndmin=2), np.asarray(b, dtype=float)),), meta or {})


def identity_layer(d: int, activation: Activation = acts.SIGMOID) -> Network:
    return affine_net(np.eye(d), np.zeros(d), activation)


def chain(first: Network, second: Network) -> Network:
    """second o first, fusing the junction affine maps."""
    if first.d_out != second.d_in:
        raise ShapeMismatch(f"chain: first outputs {first.d_out}, second expects {second.d_in}")
    if first.activation is not second.activation and first.depth > 1 and second.depth > 1:
        raise ShapeMismatch("chain: activations differ")
    act = first.activation if first.depth > 1 else second.activation
    W1, b1 = first.layers[-1]
    W2, b2 = second.layers[0]
    fused = (W2 @ W1, W2 @ b1 + b2)
    layers = first.layers[:-1] + (fused,) + second.layers[1:]
    return Network(act, layers)


def chain_all(*nets: Network) -> Network:
    out = nets[0]
    for n in nets[1:]:
        out = chain(out, n)
    return out


def _block_diag(mats: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def _common(nets: Sequence[Network]) -> Activation:
    if not nets:
        raise ShapeMismatch("need at least one network")
    depths = {n.depth for n in nets}
    if len(depths) != 1:
        raise ShapeMismatch(f"parallel composition needs equal depths, got {sorted(depths)}")
    deep = [n for n in nets if n.depth > 1]
    act = deep[0].activation if deep else nets[0].activation
    if any(n.activation is not act for n in deep):
        raise ShapeMismatch("parallel composition needs a common activation")
    return act


def parallel(nets: Sequence[Network]) -> Network:
    """Shared input, concatenated outputs; hidden layers are block-diagonal."""
    act = _common(nets)
    d_in = nets[0].d_in
    if any(n.d_in != d_in for n in nets):
        raise ShapeMismatch("parallel: input dimensions differ")
    layers = []
    for li in range(nets[0].depth):
        Ws = [n.layers[li][0] for n in nets]
        bs = np.concatenate([n.layers[li][1] for n in nets])
        W = np.vstack(Ws) if li == 0 else _block_diag(Ws)
        layers.append((W, bs))
    return Network(act, tuple(layers))


def stack(nets: Sequence[Network]) -> Network:
    """Separate inputs, concatenated outputs (fully block-diagonal)."""
    act = _common(nets)
    layers = []
    for li in range(nets[0].depth):
        W = _block_diag([n.layers[li][0] for n in nets])
        b = np.concatenate([n.layers[li][1] for n in nets])
        layers.append((W, b))
    return Network(act, tuple(layers))


def affine_combine(nets: Sequence[Network], weights, bias=0.0) -> Network:
    """x -> sum_k weights[k] * nets[k](x) + bias, all nets sharing d_in and d_out.

    ``weights`` entries may be scalars or (d_out x d_out_k) matrices.
    """
    par = parallel(nets)
    blocks = []
    d_out = None
    for n, w in zip(nets, weights):
        w = np.asarray(w, dtype=float)
        if w.ndim == 0:
            w = w * np.eye(n.d_out)
        blocks.append(w)
        if d_out is None:
            d_out = w.shape[0]
        elif w.shape[0] != d_out:
            raise ShapeMismatch("affine_combine: weight output dims differ")
    W = np.hstack(blocks)
    b = np.broadcast_to(np.asarray(bias, dtype=float), (d_out,)).copy()
    return chain(par, affine_net(W, b, par.activation))


def select(d_in: int, rows: Sequence[Sequence[float]] | np.ndarray, bias=None,
           activation: Activation = acts.SIGMOID) -> Network:
    """Exact depth-1 linear map, used for permutations, sums and input shifts."""
    W = np.asarray(rows, dtype=float).reshape(-1, d_in)
    b = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    return affine_net(W, b, activation)


def truncate(net: Network, F: float) -> Callable[[np.ndarray], np.ndarray]:
    """Evaluator for the truncation x -> clamp(net(x), -F, F)."""
    if net.d_out != 1:
        raise ShapeMismatch("truncation needs a scalar-output network")
    if not F > 0:
        raise PreconditionFailed("truncation level F must be positive")

    def evaluator(x):
        return np.clip(evaluate(net, x), -F, F)

    return evaluator


def covering_log_bound(L: int, d: int, M: int, B: float, lipschitz: float, tau: float,
                       phi0: float = 0.0) -> float:
    """Log covering number bound for the class of depth-L, width-M, norm-B networks."""
    lip = max(lipschitz, 1.0)
    if L < 2:
        raise PreconditionFailed("L >= 2 required")
    if M < 1:
        raise PreconditionFailed("M >= 1 required")
    if d < 1:
        raise PreconditionFailed("d >= 1 required")
    if not (0 < tau <= 1):
        raise PreconditionFailed("tau must lie in (0, 1]")
    if B < max(1.0, abs(phi0) / (lip * (d + 1))):
        raise PreconditionFailed("B >= max{1, |phi(0)| / (max{Lip,1}(d+1))} required")
    arg = (L + 1) * math.log(4.0) + math.log(d) + L * math.log(lip * M) + (L + 1) * math.log(B) - math.log(tau)
    return 2.0 * (L + d) * M * M * arg


# ---------------------------------------------------------------- serialization

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps(net: Network) -> str:
    lines = [f"NET v1 act={net.activation.name} L={net.depth} din={net.d_in} dout={net.d_out}"]
    for W, b in net.layers:
        r, c = W.shape
        lines.append(f"LAYER {r} {c}")
        for row in W:
            lines.append(" ".join(_fmt(v) for v in row))
        lines.append("BIAS")
        lines.append(" ".join(_fmt(v) for v in b))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Network:
    lines = text.splitlines()
    head = lines[0].split()
    if head[:2] != ["NET", "v1"]:
        raise ShapeMismatch("not a NET v1 file")
    fields = dict(tok.split("=", 1) for tok in head[2:])
    act = acts.get(fields["act"])
    L = int(fields["L"])
    pos = 1
    layers = []
    for _ in range(L):
        tag, r, c = lines[pos].split()
        if tag != "LAYER":
            raise ShapeMismatch(f"line {pos + 1}: expected LAYER")
        r, c = int(r), int(c)
        W = np.array([[float(v) for v in lines[pos + 1 + k].split()] for k in range(r)]).reshape(r, c)
        pos += 1 + r
        if lines[pos].strip() != "BIAS":
            raise ShapeMismatch(f"line {pos + 1}: expected BIAS")
        b = np.array([float(v) for v in lines[pos + 1].split()]).reshape(r)
        pos += 2
        layers.append((W, b))
    net = Network(act, tuple(layers))
    if net.d_in != int(fields["din"]) or net.d_out != int(fields["dout"]):
        raise ShapeMismatch("header dimensions disagree with layers")
    return net


def save(net: Network, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps(net))


def load(path) -> Network:
    with open(path) as fh:
        return loads(fh.read())

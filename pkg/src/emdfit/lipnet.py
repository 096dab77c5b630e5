"""Dense networks with an exact 1-Lipschitz bound.

The bound is enforced by operator-norm constraints on the weight matrices:
the first layer is constrained in the (p, inf) operator norm, every deeper
layer in the (inf, inf) norm, and the activation (GroupSort) is itself
1-Lipschitz, so the composition can never stretch distances measured in the
input's L^p norm.  The constraint is applied as a hard rescale inside every
forward pass, so any set of raw weights always evaluates to a function that
satisfies the bound.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


# Rescale only when the norm exceeds 1 by more than this, so that applying
# the projection twice is a bitwise no-op despite rounding in the division.
_PROJECTION_SLACK = 1e-12


def group_sort(v, group_size):
    """Sort consecutive groups of `group_size` entries ascending."""
    return ad.group_sort(ad.const(v), group_size).value


def op_norm_inf_inf(W):
    """The Linf -> Linf operator norm: the largest absolute row sum."""
    W = np.asarray(W, dtype=np.float64)
    return float(np.max(np.sum(np.abs(W), axis=1)))


def op_norm_p_inf(W, p):
    """The Lp -> Linf operator norm: the largest row L_q norm, 1/p + 1/q = 1."""
    W = np.asarray(W, dtype=np.float64)
    if p == 2:
        rows = np.sqrt(np.sum(W * W, axis=1))
    elif p == 1:
        rows = np.max(np.abs(W), axis=1)
    elif np.isinf(p):
        rows = np.sum(np.abs(W), axis=1)
    else:
        raise ConfigError(f"unsupported input norm p={p!r}; use 1, 2 or inf")
    return float(np.max(rows))


@dataclass(frozen=True)
class DenseLayer:
    W: np.ndarray               # (out, in)
    b: np.ndarray               # (out,)
    is_first: bool = False
    input_norm_p: float = 2.0   # only used when is_first

    def operator_norm(self):
        if self.is_first:
            return op_norm_p_inf(self.W, self.input_norm_p)
        return op_norm_inf_inf(self.W)

    def row_norms(self):
        p = self.input_norm_p if self.is_first else np.inf
        if p == 2:
            return np.sqrt(np.sum(self.W * self.W, axis=1))
        if p == 1:
            return np.max(np.abs(self.W), axis=1)
        return np.sum(np.abs(self.W), axis=1)


def constrain_weights(layer, per_row=False):
    """Project a layer onto its operator-norm ball.

    Whole-matrix mode rescales by W / max(1, norm); `per_row` rescales each
    row by its own max(1, row norm), which satisfies the same operator-norm
    bound (the operator norm is the largest row norm) while letting rows
    saturate independently.  Already-feasible weights are returned unchanged
    (within `_PROJECTION_SLACK`), which makes the projection idempotent bit
    for bit.  The bias is never touched (adding a constant cannot change a
    Lipschitz constant).
    """
    if per_row:
        rows = layer.row_norms()
        if np.all(rows <= 1.0 + _PROJECTION_SLACK):
            return layer
        scale = np.where(rows > 1.0 + _PROJECTION_SLACK, rows, 1.0)
        return replace(layer, W=layer.W / scale[:, None])
    n = layer.operator_norm()
    if n <= 1.0 + _PROJECTION_SLACK:
        return layer
    return replace(layer, W=layer.W / n)


class LipschitzMLP:
    """Scalar-output dense network that is 1-Lipschitz by construction.

    `input_shift` is subtracted from inputs before the first layer; a
    translation is an isometry, so the bound is unaffected.  The fitter uses
    it to center coordinates on an event, which makes fits exactly
    translation equivariant.

    `per_row` selects the per-row form of the weight projection.  Both forms
    satisfy the operator-norm bound; the per-row form lets every row reach
    its own norm budget, which trains much better (with the whole-matrix
    rescale only the largest row can saturate, and dual estimates stall far
    below the optimum).
    """

    def __init__(self, layers, group_size, input_shift=None, per_row=True):
        if not layers:
            raise ConfigError("network needs at least one layer")
        if layers[-1].W.shape[0] != 1:
            raise ConfigError("output dimension must be 1")
        for k, layer in enumerate(layers[:-1]):
            width = layer.W.shape[0]
            if width % group_size != 0:
                raise ConfigError(
                    f"hidden width {width} of layer {k} not divisible by "
                    f"group size {group_size}")
        self.layers = list(layers)
        self.group_size = int(group_size)
        self.per_row = bool(per_row)
        self.unit_rows = False  # rescale rows onto the norm boundary
        self.input_dim = layers[0].W.shape[1]
        if input_shift is None:
            input_shift = np.zeros(self.input_dim)
        self.input_shift = np.asarray(input_shift, dtype=np.float64)

    # -- construction ----------------------------------------------------
    @classmethod
    def create(cls, input_dim, hidden=(64, 64, 64, 64), group_size=2, p=2.0,
               seed=0, zero_head=True, per_row=True, init="routing"):
        """Random network, projected onto the constraint set.

        `init="routing"` starts the first layer as random unit-norm
        directional probes and every hidden layer as a random signed
        permutation.  Permutations sit on the operator-norm boundary and
        pass slopes through exactly, which is the regime an optimal
        potential needs; starting there roughly halves the duality gap
        reachable by gradient ascent compared to small uniform weights
        (which begin with badly attenuated slopes and stall early).
        `init="uniform"` is that alternative: entries uniform in
        [-1/fan_in, 1/fan_in].

        With `zero_head` the output layer starts at zero, so the initial
        function is identically 0; useful as a training start because a fit
        whose shape already matches its event then has exactly zero shape
        gradient.  Pass `zero_head=False` to get a generic random member of
        the constrained family (e.g. for property checks).
        """
        if init not in ("routing", "uniform"):
            raise ConfigError(f"unknown init {init!r}")
        rng = np.random.default_rng(seed)
        dims = [input_dim] + list(hidden) + [1]
        layers = []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            is_first = k == 0
            is_head = k == len(dims) - 2
            if init == "routing" and is_first and not is_head:
                W = rng.normal(size=(fan_out, fan_in))
                W /= np.linalg.norm(W, axis=1, keepdims=True)
                if p == 1:
                    W /= np.max(np.abs(W), axis=1, keepdims=True)
                elif np.isinf(p):
                    W /= np.sum(np.abs(W), axis=1, keepdims=True)
            elif init == "routing" and not is_head:
                W = np.zeros((fan_out, fan_in))
                src = rng.permutation(fan_in)[:fan_out] if fan_in >= fan_out \
                    else rng.integers(0, fan_in, fan_out)
                W[np.arange(fan_out), src] = rng.choice([-1.0, 1.0], fan_out)
            else:
                W = rng.uniform(-1.0 / fan_in, 1.0 / fan_in,
                                size=(fan_out, fan_in))
            if zero_head and is_head:
                W = np.zeros_like(W)
            layer = DenseLayer(W=W, b=np.zeros(fan_out), is_first=is_first,
                               input_norm_p=p)
            layers.append(constrain_weights(layer, per_row=per_row))
        return cls(layers, group_size, per_row=per_row)

    @classmethod
    def like(cls, net, seed, zero_head=True):
        """Fresh routing-initialized network with `net`'s architecture."""
        hidden = tuple(layer.W.shape[0] for layer in net.layers[:-1])
        out = cls.create(net.input_dim, hidden=hidden,
                         group_size=net.group_size, p=net.p, seed=seed,
                         zero_head=zero_head, per_row=net.per_row)
        out.input_shift = net.input_shift.copy()
        return out

    @property
    def p(self):
        return self.layers[0].input_norm_p

    def parameters(self):
        """Raw parameter arrays, ordered [W0, b0, W1, b1, ...]."""
        out = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def set_parameters(self, params):
        if len(params) != 2 * len(self.layers):
            raise ConfigError("parameter list does not match layer count")
        new_layers = []
        for k, layer in enumerate(self.layers):
            W, b = params[2 * k], params[2 * k + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ConfigError(f"parameter shape mismatch at layer {k}")
            new_layers.append(replace(layer, W=np.asarray(W, dtype=np.float64),
                                      b=np.asarray(b, dtype=np.float64)))
        self.layers = new_layers

    def constrained(self):
        """Copy with the projection applied explicitly to every layer."""
        net = LipschitzMLP(
            [constrain_weights(l, per_row=self.per_row) for l in self.layers],
            self.group_size, self.input_shift, per_row=self.per_row)
        return net

    # -- evaluation -------------------------------------------------------
    def _row_norm_graph(self, W, layer):
        p = layer.input_norm_p if layer.is_first else np.inf
        if layer.is_first and p == 2:
            return ad.sqrt(ad.asum(ad.power(W, 2.0), axis=1))
        if layer.is_first and p == 1:
            return ad.amax(ad.absolute(W), axis=1)
        # p = inf, and every non-first layer
        return ad.asum(ad.absolute(W), axis=1)

    def forward_graph(self, x, params=None):
        """Build the forward computation on the tape.

        `x` is a Var/array of shape (d,) or (N, d); `params` optionally
        supplies Vars (or arrays) replacing the stored parameters, in the
        order of :meth:`parameters`.  The projection W / max(1, norm) is part
        of the graph, so gradients flow through it and the evaluated
        function is feasible no matter what the raw weights are.
        """
        if params is None:
            params = self.parameters()
        x = x if isinstance(x, ad.Var) else ad.const(x)
        if x.value.shape[-1] != self.input_dim:
            raise ConfigError(
                f"input dimension {x.value.shape[-1]} != {self.input_dim}")
        h = x - ad.const(self.input_shift) if np.any(self.input_shift) else x
        for k, layer in enumerate(self.layers):
            W = params[2 * k]
            b = params[2 * k + 1]
            W = W if isinstance(W, ad.Var) else ad.const(W)
            b = b if isinstance(b, ad.Var) else ad.const(b)
            if k > 0:
                h = ad.group_sort(h, self.group_size)
            # dividing by exactly 1.0 leaves feasible weights bitwise intact
            rows = self._row_norm_graph(W, layer)
            if self.unit_rows and k < len(self.layers) - 1:
                # scale rows onto the norm boundary: every probe keeps unit
                # slope, which is what an optimal potential saturates anyway
                Wc = W / ad.stack_cols([ad.maximum(rows, 1e-30)])
            elif self.per_row:
                Wc = W / ad.stack_cols([ad.maximum(rows, 1.0)])
            else:
                Wc = W / ad.maximum(ad.amax(rows), 1.0)
            if h.value.ndim == 1:
                h = ad.matmul(Wc, h) + b
            else:
                h = ad.matmul(h, Wc.T) + b
        # squeeze the single output unit
        if h.value.ndim == 1:
            return h[0]
        return h[:, 0]

    def forward(self, x):
        """Evaluate f at a point (d,) -> float, or a batch (N, d) -> (N,).

        Single points run through the batched path, so a point evaluates
        bitwise-identically alone or inside a batch.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return float(self.forward_graph(ad.const(x[None, :])).value[0])
        return self.forward_graph(ad.const(x)).value


def forward(net, x):
    return net.forward(x)


def lipschitz_ratio_check(net, n_pairs=1000, seed=0, box=(-1.0, 1.0)):
    """Max of |f(x)-f(y)| / ||x-y||_p over random pairs in a box.

    For a correctly constrained network this never exceeds 1 up to float
    rounding, whatever the draw.
    """
    rng = np.random.default_rng(seed)
    lo, hi = box
    x = rng.uniform(lo, hi, size=(n_pairs, net.input_dim))
    y = rng.uniform(lo, hi, size=(n_pairs, net.input_dim))
    fx = net.forward(x)
    fy = net.forward(y)
    p = net.p
    if p == 2:
        dist = np.sqrt(np.sum((x - y) ** 2, axis=1))
    elif p == 1:
        dist = np.sum(np.abs(x - y), axis=1)
    else:
        dist = np.max(np.abs(x - y), axis=1)
    keep = dist > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(fx - fy)[keep] / dist[keep]))


# -- checkpoint i/o ----------------------------------------------------------

def save_checkpoint(net, path):
    """Write the architecture and all weights as JSON; floats round-trip
    exactly (decimal repr)."""
    doc = {
        "format": "emdfit-lipnet-v1",
        "group_size": net.group_size,
        "p": "inf" if np.isinf(net.p) else net.p,
        "constraint": "row" if net.per_row else "matrix",
        "input_shift": net.input_shift.tolist(),
        "layers": [
            {"W": layer.W.tolist(), "b": layer.b.tolist(),
             "is_first": layer.is_first}
            for layer in net.layers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "emdfit-lipnet-v1":
        raise ConfigError(f"{path}: not a network checkpoint")
    p = np.inf if doc["p"] == "inf" else float(doc["p"])
    layers = [
        DenseLayer(W=np.asarray(spec["W"], dtype=np.float64),
                   b=np.asarray(spec["b"], dtype=np.float64),
                   is_first=spec["is_first"], input_norm_p=p)
        for spec in doc["layers"]
    ]
    return LipschitzMLP(layers, doc["group_size"], doc["input_shift"],
                        per_row=doc.get("constraint", "row") == "row")

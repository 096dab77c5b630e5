"""Reverse-mode automatic differentiation on scalars and small arrays.

A computation graph is built eagerly: every operation creates a new
:class:`Var` holding a float64 numpy value (0-d for scalars) and references
to its parents.  Node ids increase with construction time, so construction
order is a topological order.  Graphs are cheap and rebuilt per evaluation;
`eval_graph` can also re-run an existing graph after leaf values change.

Values may be scalars, vectors, or matrices.  Binary elementwise ops support
numpy-style alignment of a scalar/row against an array (the gradient is
summed back to the parent's shape); there is no general tensor system beyond
that.  Piecewise ops (max, min, abs, sorting, gathers) break ties in favor
of the first argument / first index so that repeated runs are bitwise
reproducible.
"""

import itertools

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction/evaluation failures."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf; the message names the op tag."""


class GraphStateError(AutodiffError):
    """A graph was used in an invalid state (e.g. backward on a bad root)."""


_ids = itertools.count()


class Var:
    """One node of the computation graph.

    Fields: `value` (float64 ndarray), `op` (tag string), `parents`
    (tuple of Var), `meta` (static op parameters such as an axis or an
    exponent), `branch` (data chosen by comparing runtime values: masks,
    permutations, argmax indices), and `nid` (construction-ordered id).
    """

    __slots__ = ("value", "op", "parents", "meta", "branch", "nid")

    def __init__(self, value, op, parents=(), meta=None, branch=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.meta = meta
        self.branch = branch
        self.nid = next(_ids)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")

    # -- python niceties -------------------------------------------------
    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape}, nid={self.nid})"

    @property
    def shape(self):
        return self.value.shape

    def set_value(self, value):
        """Replace a leaf/const value in place (for re-evaluation)."""
        if self.parents:
            raise GraphStateError("set_value is only valid on leaf/const nodes")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise GraphStateError("set_value must preserve the node's shape")
        self.value = value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def leaf(value):
    """A differentiable input node (appears in GradientMap)."""
    return Var(value, "leaf")


def const(value):
    """A non-differentiable data node."""
    return Var(value, "const")


def _as_var(x):
    return x if isinstance(x, Var) else const(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# op table: tag -> (forward, vjp)
#   forward(parent_values, meta) -> (value, branch)
#   vjp(k, parent_values, out_value, meta, branch, adjoint) -> grad for parent k
# ---------------------------------------------------------------------------

def _fw_add(vals, meta):
    return vals[0] + vals[1], None


def _vjp_add(k, vals, out, meta, branch, ad):
    return _unbroadcast(ad, vals[k].shape)


def _fw_sub(vals, meta):
    return vals[0] - vals[1], None


def _vjp_sub(k, vals, out, meta, branch, ad):
    g = ad if k == 0 else -ad
    return _unbroadcast(g, vals[k].shape)


def _fw_mul(vals, meta):
    return vals[0] * vals[1], None


def _vjp_mul(k, vals, out, meta, branch, ad):
    return _unbroadcast(ad * vals[1 - k], vals[k].shape)


def _fw_div(vals, meta):
    return vals[0] / vals[1], None


def _vjp_div(k, vals, out, meta, branch, ad):
    a, b = vals
    g = ad / b if k == 0 else -ad * a / (b * b)
    return _unbroadcast(g, vals[k].shape)


def _fw_neg(vals, meta):
    return -vals[0], None


def _vjp_neg(k, vals, out, meta, branch, ad):
    return -ad


def _fw_abs(vals, meta):
    x = vals[0]
    return np.abs(x), (x >= 0.0)


def _vjp_abs(k, vals, out, meta, branch, ad):
    return np.where(branch, ad, -ad)


def _fw_sqrt(vals, meta):
    return np.sqrt(vals[0]), None


def _vjp_sqrt(k, vals, out, meta, branch, ad):
    return ad / (2.0 * out)


def _fw_power(vals, meta):
    return vals[0] ** meta, None


def _vjp_power(k, vals, out, meta, branch, ad):
    return ad * meta * vals[0] ** (meta - 1.0)


def _fw_exp(vals, meta):
    return np.exp(vals[0]), None


def _vjp_exp(k, vals, out, meta, branch, ad):
    return ad * out


def _fw_sin(vals, meta):
    return np.sin(vals[0]), None


def _vjp_sin(k, vals, out, meta, branch, ad):
    return ad * np.cos(vals[0])


def _fw_cos(vals, meta):
    return np.cos(vals[0]), None


def _vjp_cos(k, vals, out, meta, branch, ad):
    return -ad * np.sin(vals[0])


def _fw_maximum(vals, meta):
    a, b = np.broadcast_arrays(*vals)
    mask = a >= b  # ties favor the first argument
    return np.where(mask, a, b), mask


def _vjp_maximum(k, vals, out, meta, branch, ad):
    g = np.where(branch, ad, 0.0) if k == 0 else np.where(branch, 0.0, ad)
    return _unbroadcast(g, vals[k].shape)


def _fw_minimum(vals, meta):
    a, b = np.broadcast_arrays(*vals)
    mask = a <= b
    return np.where(mask, a, b), mask


_vjp_minimum = _vjp_maximum


def _fw_amax(vals, meta):
    x = vals[0]
    axis = meta
    if axis is None:
        idx = int(np.argmax(x))  # first occurrence wins ties
        return x.reshape(-1)[idx], idx
    idx = np.argmax(x, axis=axis)
    return np.take_along_axis(x, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def _vjp_amax(k, vals, out, meta, branch, ad):
    x = vals[0]
    g = np.zeros_like(x)
    if meta is None:
        g.reshape(-1)[branch] = ad
    else:
        np.put_along_axis(g, np.expand_dims(branch, meta),
                          np.expand_dims(ad, meta), meta)
    return g


def _fw_matmul(vals, meta):
    return vals[0] @ vals[1], None


def _vjp_matmul(k, vals, out, meta, branch, ad):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return ad @ b.T if k == 0 else a.T @ ad
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(ad, b) if k == 0 else a.T @ ad
    if a.ndim == 1 and b.ndim == 2:
        return b @ ad if k == 0 else np.outer(a, ad)
    # 1-d @ 1-d -> scalar
    return ad * b if k == 0 else ad * a


def _fw_transpose(vals, meta):
    return vals[0].T, None


def _vjp_transpose(k, vals, out, meta, branch, ad):
    return ad.T


def _fw_asum(vals, meta):
    return vals[0].sum(axis=meta), None


def _vjp_asum(k, vals, out, meta, branch, ad):
    x = vals[0]
    if meta is None:
        return np.full_like(x, float(ad)) if x.ndim else ad
    return np.broadcast_to(np.expand_dims(ad, meta), x.shape).copy()


def _fw_cumsum(vals, meta):
    return np.cumsum(vals[0]), None


def _vjp_cumsum(k, vals, out, meta, branch, ad):
    return np.cumsum(ad[::-1])[::-1]


def _fw_getitem(vals, meta):
    return vals[0][meta], None


def _vjp_getitem(k, vals, out, meta, branch, ad):
    g = np.zeros_like(vals[0])
    g[meta] += ad  # basic indexing only: no repeated destinations
    return g


def _fw_take_rows(vals, meta):
    return vals[0][meta], None


def _vjp_take_rows(k, vals, out, meta, branch, ad):
    g = np.zeros_like(vals[0])
    np.add.at(g, meta, ad)
    return g


def _fw_stack_cols(vals, meta):
    return np.stack(vals, axis=-1), None


def _vjp_stack_cols(k, vals, out, meta, branch, ad):
    return np.asarray(ad[..., k])


def _fw_concat(vals, meta):
    return np.concatenate(vals, axis=meta), None


def _vjp_concat(k, vals, out, meta, branch, ad):
    start = sum(v.shape[meta] for v in vals[:k])
    stop = start + vals[k].shape[meta]
    index = [slice(None)] * ad.ndim
    index[meta] = slice(start, stop)
    return np.asarray(ad[tuple(index)])


def _fw_group_sort(vals, meta):
    x = vals[0]
    g = meta
    grouped = x.reshape(x.shape[:-1] + (x.shape[-1] // g, g))
    order = np.argsort(grouped, axis=-1, kind="stable")
    return np.take_along_axis(grouped, order, axis=-1).reshape(x.shape), order


def _vjp_group_sort(k, vals, out, meta, branch, ad):
    x = vals[0]
    g = meta
    ad_grouped = ad.reshape(x.shape[:-1] + (x.shape[-1] // g, g))
    grad = np.empty_like(ad_grouped)
    np.put_along_axis(grad, branch, ad_grouped, axis=-1)
    return grad.reshape(x.shape)


_OPS = {
    "add": (_fw_add, _vjp_add),
    "sub": (_fw_sub, _vjp_sub),
    "mul": (_fw_mul, _vjp_mul),
    "div": (_fw_div, _vjp_div),
    "neg": (_fw_neg, _vjp_neg),
    "abs": (_fw_abs, _vjp_abs),
    "sqrt": (_fw_sqrt, _vjp_sqrt),
    "power": (_fw_power, _vjp_power),
    "exp": (_fw_exp, _vjp_exp),
    "sin": (_fw_sin, _vjp_sin),
    "cos": (_fw_cos, _vjp_cos),
    "maximum": (_fw_maximum, _vjp_maximum),
    "minimum": (_fw_minimum, _vjp_minimum),
    "amax": (_fw_amax, _vjp_amax),
    "matmul": (_fw_matmul, _vjp_matmul),
    "transpose": (_fw_transpose, _vjp_transpose),
    "sum": (_fw_asum, _vjp_asum),
    "cumsum": (_fw_cumsum, _vjp_cumsum),
    "getitem": (_fw_getitem, _vjp_getitem),
    "take_rows": (_fw_take_rows, _vjp_take_rows),
    "stack_cols": (_fw_stack_cols, _vjp_stack_cols),
    "concat": (_fw_concat, _vjp_concat),
    "group_sort": (_fw_group_sort, _vjp_group_sort),
}


def _apply(op, parents, meta=None):
    fw, _ = _OPS[op]
    vals = tuple(p.value for p in parents)
    try:
        value, branch = fw(vals, meta)
    except FloatingPointError as exc:  # pragma: no cover - np.seterr dependent
        raise NonFiniteError(f"op '{op}' failed: {exc}") from exc
    return Var(value, op, parents, meta, branch)


# -- public op constructors -------------------------------------------------

def add(a, b):
    return _apply("add", (_as_var(a), _as_var(b)))


def sub(a, b):
    return _apply("sub", (_as_var(a), _as_var(b)))


def mul(a, b):
    return _apply("mul", (_as_var(a), _as_var(b)))


def div(a, b):
    return _apply("div", (_as_var(a), _as_var(b)))


def neg(a):
    return _apply("neg", (_as_var(a),))


def absolute(a):
    return _apply("abs", (_as_var(a),))


def sqrt(a):
    return _apply("sqrt", (_as_var(a),))


def power(a, exponent):
    return _apply("power", (_as_var(a),), float(exponent))


def exp(a):
    return _apply("exp", (_as_var(a),))


def sin(a):
    return _apply("sin", (_as_var(a),))


def cos(a):
    return _apply("cos", (_as_var(a),))


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first argument."""
    return _apply("maximum", (_as_var(a), _as_var(b)))


def minimum(a, b):
    """Elementwise min; at ties the gradient goes to the first argument."""
    return _apply("minimum", (_as_var(a), _as_var(b)))


def amax(a, axis=None):
    """Max reduction; the subgradient goes to the first maximal entry."""
    return _apply("amax", (_as_var(a),), axis)


def matmul(a, b):
    return _apply("matmul", (_as_var(a), _as_var(b)))


def transpose(a):
    return _apply("transpose", (_as_var(a),))


def asum(a, axis=None):
    return _apply("sum", (_as_var(a),), axis)


def cumsum(a):
    return _apply("cumsum", (_as_var(a),))


def getitem(a, index):
    return _apply("getitem", (_as_var(a),), index)


def take_rows(a, indices):
    """Gather elements (1-d input) or rows (2-d input) by integer index."""
    idx = np.asarray(indices, dtype=np.intp)
    return _apply("take_rows", (_as_var(a),), idx)


def stack_cols(columns):
    """Stack same-length vectors into the columns of a matrix."""
    return _apply("stack_cols", tuple(_as_var(c) for c in columns))


def concat(parts, axis=0):
    return _apply("concat", tuple(_as_var(p) for p in parts), axis)


def group_sort(a, group_size):
    """Sort consecutive groups of `group_size` entries along the last axis.

    Stable sort: equal entries keep their input order, so the subgradient at
    a tie follows the earlier element.
    """
    a = _as_var(a)
    width = a.value.shape[-1] if a.value.ndim else 1
    if group_size < 1 or width % group_size != 0:
        raise AutodiffError(
            f"group_sort: length {width} not divisible by group size {group_size}")
    return _apply("group_sort", (a,), int(group_size))


def dot(a, b):
    return asum(mul(a, b))


# ---------------------------------------------------------------------------
# graph walking
# ---------------------------------------------------------------------------

def _topo_nodes(root):
    """All nodes reachable from root, in construction (= topological) order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.nid in seen:
            continue
        seen[node.nid] = node
        stack.extend(node.parents)
    return [seen[nid] for nid in sorted(seen)]


def eval_graph(root):
    """Recompute the graph bottom-up from current leaf values.

    Returns the scalar forward value of `root`.  Raises
    :class:`NonFiniteError` naming the op tag if any intermediate is NaN/Inf,
    and :class:`GraphStateError` if the root is not a scalar.
    """
    if root.value.ndim != 0:
        raise GraphStateError("eval_graph requires a scalar root")
    for node in _topo_nodes(root):
        if node.parents:
            fw, _ = _OPS[node.op]
            value, branch = fw(tuple(p.value for p in node.parents), node.meta)
            node.value = np.asarray(value, dtype=np.float64)
            node.branch = branch
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"non-finite value in op '{node.op}'")
    return float(root.value)


class GradientMap:
    """Adjoints of leaf nodes; leaves not reachable from the root read as 0."""

    def __init__(self, grads):
        self._grads = grads  # id(Var) -> ndarray

    def __getitem__(self, var):
        g = self._grads.get(id(var))
        if g is None:
            return np.zeros_like(var.value)
        return g

    def __contains__(self, var):
        return id(var) in self._grads

    def __len__(self):
        return len(self._grads)


def backward(root):
    """Reverse-mode sweep from a scalar root; returns a :class:`GradientMap`.

    The adjoint of the root w.r.t. itself is 1.  Accumulation order is fixed
    by node ids, so results are bitwise reproducible.
    """
    if root.value.ndim != 0:
        raise GraphStateError("backward requires a scalar root")
    if not np.isfinite(root.value):
        raise GraphStateError("backward called on a graph whose forward value "
                              "is not finite; evaluate the graph first")
    nodes = _topo_nodes(root)
    adjoints = {root.nid: np.asarray(1.0)}
    leaves = {}
    for node in reversed(nodes):
        ad = adjoints.pop(node.nid, None)
        if ad is None:
            continue
        if node.op == "leaf":
            leaves[id(node)] = ad
            continue
        if not node.parents:
            continue
        _, vjp = _OPS[node.op]
        vals = tuple(p.value for p in node.parents)
        for k, parent in enumerate(node.parents):
            if parent.op == "const" and not parent.parents:
                continue
            g = vjp(k, vals, node.value, node.meta, node.branch, ad)
            prev = adjoints.get(parent.nid)
            adjoints[parent.nid] = g if prev is None else prev + g
    return GradientMap(leaves)


def branch_signature(root):
    """Hashable summary of every data-dependent branch choice in the graph.

    Two evaluations of the same expression are C^1-comparable only if their
    signatures match; a mismatch means a max/sort/gather decision flipped
    between them (a kink crossed).
    """
    sig = []
    for node in _topo_nodes(root):
        if isinstance(node.meta, np.ndarray):
            # gather indices are chosen by the caller from runtime values
            sig.append((node.op, node.meta.tobytes()))
        if node.branch is None:
            continue
        b = node.branch
        sig.append((node.op, b.tobytes() if isinstance(b, np.ndarray) else b))
    return tuple(sig)


def finite_diff_check(f, point, step=1e-5):
    """Max relative error between reverse-mode and central finite differences.

    `f` maps a Var holding a 1-d parameter vector to a scalar Var.  For each
    coordinate the central difference at `step` is compared against the
    autodiff gradient; the error is |ad - fd| / (|fd| + 1e-12) and the max
    over coordinates is returned.  Coordinates whose perturbation flips a
    branch decision (a sort tie or piecewise boundary inside the interval)
    are excluded, matching the smoothness precondition of the comparison.
    """
    point = np.asarray(point, dtype=np.float64)
    x = leaf(point)
    grad = backward(f(x))[x]
    worst = 0.0
    for i in range(point.size):
        shift = np.zeros_like(point)
        shift.flat[i] = step
        root_p = f(const(point + shift))
        root_m = f(const(point - shift))
        if branch_signature(root_p) != branch_signature(root_m):
            continue
        fd = (float(root_p.value) - float(root_m.value)) / (2.0 * step)
        err = abs(float(grad.flat[i]) - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst

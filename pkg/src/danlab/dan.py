"""Controller modules, alpha switching and the multi-task adaptation network.

A controller for a conv layer with ``C_o`` filters is a ``C_o x C_o`` matrix
``W`` plus a fresh bias.  The adapted filters of the layer are the rows of
``W @ flatten(F)`` reshaped back to filter form, so every new filter is a
linear combination of the frozen base filters.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNormBank, Head
from .tensor import (
    FilterBank,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    conv2d,
    flatten_filters,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    unflatten_filters,
)

log = logging.getLogger(__name__)

INIT_SCHEMES = ("diagonal", "random", "linear_approx")
CONTROLLER_MODES = ("linear", "diagonal")
TASK_MODES = ("dan-linear", "dan-diagonal", "ft-last", "ft-full", "ft-full-bn-off", "scratch")


# --------------------------------------------------------------------------
# architecture description

@dataclass
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool: int = 2  # 0 disables pooling
    batchnorm: bool = False


@dataclass
class Architecture:
    in_shape: tuple[int, int, int]
    convs: list[ConvSpec]
    hidden: list[int]
    n_classes: int

    def conv_dims(self) -> list[tuple[int, int, int]]:
        """``(C_o, C_i, k)`` per conv layer."""
        dims, c = [], self.in_shape[0]
        for cs in self.convs:
            dims.append((cs.out_channels, c, cs.kernel))
            c = cs.out_channels
        return dims

    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        for cs in self.convs:
            h = (h + 2 * cs.padding - cs.kernel) // cs.stride + 1
            w = (w + 2 * cs.padding - cs.kernel) // cs.stride + 1
            c = cs.out_channels
            if cs.pool:
                h, w = (h - cs.pool) // cs.pool + 1, (w - cs.pool) // cs.pool + 1
        return c, h, w

    def feature_dim(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w

    def head_sizes(self, n_classes: int | None = None) -> list[int]:
        return [self.feature_dim(), *self.hidden, self.n_classes if n_classes is None else n_classes]

    def to_dict(self) -> dict:
        return {
            "in_shape": list(self.in_shape),
            "convs": [vars(c).copy() for c in self.convs],
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(tuple(d["in_shape"]), [ConvSpec(**c) for c in d["convs"]], list(d["hidden"]), d["n_classes"])


# --------------------------------------------------------------------------
# controllers

class ControllerModule:
    """Trainable recombination matrix and bias for one conv layer of one task."""

    def __init__(self, W, bias, mode: str = "linear", layer_ref: int = 0):
        if mode not in CONTROLLER_MODES:
            raise ValueError(f"unknown controller mode {mode!r}")
        W = np.array(W, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or bias.shape != (W.shape[0],):
            raise ShapeError(f"controller needs square W and matching bias, got {W.shape}, {bias.shape}")
        self.mode = mode
        self.layer_ref = layer_ref
        self._mask = np.eye(W.shape[0]) if mode == "diagonal" else None
        if self._mask is not None:
            W = W * self._mask
        self.W = Tensor(W, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.frozen = False

    @property
    def c_out(self) -> int:
        return self.W.shape[0]

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.W.requires_grad = not frozen
        self.bias.requires_grad = not frozen

    def effective_W(self) -> Tensor:
        # multiplying by the identity mask zeroes the off-diagonal gradient too
        return self.W if self._mask is None else mul(self.W, self._mask)

    def adapted(self, base: FilterBank) -> Tensor:
        return adapt_filters(self.effective_W(), base)

    def num_params(self) -> int:
        c = self.c_out
        return (c * c if self.mode == "linear" else c) + c


def adapt_filters(W, F) -> Tensor:
    """``unflatten(W @ flatten(F))``: new filters as linear combinations of ``F``'s."""
    w = F.weights if isinstance(F, FilterBank) else as_tensor(F)
    W = as_tensor(W)
    if W.ndim != 2 or W.shape != (w.shape[0], w.shape[0]):
        raise ShapeError(f"controller of shape {W.shape} cannot combine {w.shape[0]} filters")
    return unflatten_filters(matmul(W, flatten_filters(w)), w.shape)


def switched_conv(x, F, b, W, b_a, alpha: float, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolve with ``alpha * (W (x) F) + (1 - alpha) * F`` and the matching bias blend."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    F, b = as_tensor(F), as_tensor(b)
    weight = add(mul(adapt_filters(W, F), alpha), mul(F, 1.0 - alpha))
    bias = add(mul(as_tensor(b_a), alpha), mul(b, 1.0 - alpha))
    return conv2d(x, weight, bias, stride=stride, padding=padding)


def multitask_conv(x, task_filters, alpha, stride: int = 1, padding: int = 0) -> Tensor:
    """``sum_i alpha_i * (F_i * x + b_i)`` over per-task ``(weight, bias)`` pairs.

    Entry 0 is the base task; tasks with zero weight are skipped.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if len(alpha) != len(task_filters):
        raise ValueError(f"alpha has {len(alpha)} entries for {len(task_filters)} tasks")
    out = None
    for a, (w, b) in zip(alpha, task_filters):
        if a == 0.0:
            continue
        y = conv2d(x, w, b, stride=stride, padding=padding)
        y = y if a == 1.0 else mul(y, float(a))
        out = y if out is None else add(out, y)
    if out is None:
        w, b = task_filters[0]
        out = mul(conv2d(x, w, b, stride=stride, padding=padding), 0.0)
    return out


def init_controller(scheme: str, base: FilterBank, rng: np.random.Generator | None = None,
                    target: FilterBank | None = None, mode: str = "linear",
                    layer_ref: int = 0) -> ControllerModule:
    """Build a controller for ``base`` using one of the three init schemes.

    ``diagonal`` starts at the identity so the task initially behaves exactly
    like the base network. ``random`` draws ``W ~ N(0, 1/C_o)``.
    ``linear_approx`` solves ``min ||W F - F_target||`` for a target layer
    trained independently and takes the target's bias.
    """
    c = base.c_out
    b = base.bias.data.copy()
    if scheme == "diagonal":
        W = np.eye(c)
    elif scheme == "random":
        rng = rng if rng is not None else np.random.default_rng()
        W = rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c))
    elif scheme == "linear_approx":
        if target is None:
            raise ValueError("linear_approx needs a target filter bank")
        if target.weights.shape != base.weights.shape:
            raise ShapeError(f"target filters {target.weights.shape} differ from base {base.weights.shape}")
        W = linear_approx_weights(base.weights.data, target.weights.data, mode=mode)
        b = target.bias.data.copy()
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return ControllerModule(W, b, mode=mode, layer_ref=layer_ref)


def linear_approx_weights(base_w: np.ndarray, target_w: np.ndarray, mode: str = "linear") -> np.ndarray:
    F = base_w.reshape(base_w.shape[0], -1)
    T = target_w.reshape(target_w.shape[0], -1)
    if mode == "diagonal":
        norms = (F * F).sum(axis=1)
        d = np.divide((F * T).sum(axis=1), norms, out=np.zeros(len(F)), where=norms > 0)
        return np.diag(d)
    # W F = T  <=>  F^T W^T = T^T
    sol, _, rank, _ = np.linalg.lstsq(F.T, T.T, rcond=None)
    if rank < F.shape[0]:
        log.warning("linear_approx: base filters are rank deficient (%d < %d); using the minimum-norm solution",
                    rank, F.shape[0])
    return sol.T


# --------------------------------------------------------------------------
# alpha

@dataclass
class AlphaSelector:
    alphas: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    binding: str = "manual"  # or "decider"

    @property
    def n_tasks(self) -> int:
        return len(self.alphas)

    def one_hot_index(self) -> int | None:
        a = self.alphas
        nz = np.flatnonzero(a)
        if len(nz) == 1 and a[nz[0]] == 1.0:
            return int(nz[0])
        return None

    def dominant(self) -> int:
        return int(np.argmax(self.alphas))

    def resize(self, n: int) -> None:
        a = np.zeros(n)
        m = min(n, len(self.alphas))
        a[:m] = self.alphas[:m]
        if not a.any():
            a[0] = 1.0
        self.alphas = a


def one_hot(index: int, n: int) -> np.ndarray:
    a = np.zeros(n)
    a[index] = 1.0
    return a


def set_alpha(selector: AlphaSelector, spec) -> None:
    """Select a task by index, or set a real-valued mixing vector in ``[0, 1]^n``."""
    n = selector.n_tasks
    if isinstance(spec, (int, np.integer)) and not isinstance(spec, bool):
        if not 0 <= spec < n:
            raise ValueError(f"task index {spec} out of range for {n} tasks")
        selector.alphas = one_hot(int(spec), n)
        return
    a = np.asarray(spec, dtype=np.float64).reshape(-1)
    if len(a) != n:
        raise ValueError(f"alpha vector has {len(a)} entries, network has {n} tasks")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"alpha entries must lie in [0, 1], got {a}")
    selector.alphas = a.copy()


def select_alpha_from_decider(logits) -> np.ndarray:
    """One-hot alpha at the argmax of the decider's scores (lowest index on ties).

    Accepts a single score vector ``[n]`` or a batch ``[N, n]``.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.ndim == 1:
        return one_hot(int(np.argmax(z)), len(z))
    out = np.zeros_like(z)
    out[np.arange(len(z)), np.argmax(z, axis=1)] = 1.0
    return out


# --------------------------------------------------------------------------
# the network

@dataclass
class TaskLayer:
    kind: str  # "base" (shares base filters), "controller", or "own"
    controller: ControllerModule | None = None
    filters: FilterBank | None = None


@dataclass
class Task:
    name: str
    n_classes: int
    mode: str
    layers: list[TaskLayer]
    head: Head
    init: str = ""


class DanNetwork:
    """Frozen base convolutions plus per-task controllers, BN entries and heads.

    Task 0 is the base network itself. Later tasks reach the base filters
    through controllers (DAN modes) or carry their own filters (fine-tuning
    and scratch baselines). ``alpha`` picks which task's parameters a forward
    pass uses; a real-valued alpha blends conv weights and biases.
    """

    def __init__(self, arch: Architecture, base: list[FilterBank], head: Head,
                 bn: list[BatchNormBank | None] | None = None, base_name: str = "base"):
        if len(base) != len(arch.convs):
            raise ShapeError(f"{len(base)} filter banks for {len(arch.convs)} conv layers")
        for fb, dims in zip(base, arch.conv_dims()):
            if (fb.c_out, fb.c_in, fb.k) != dims:
                raise ShapeError(f"filter bank {fb.weights.shape} does not match layer {dims}")
        self.arch = arch
        self.base = base
        self.bn = bn if bn is not None else [BatchNormBank(c.out_channels) if c.batchnorm else None for c in arch.convs]
        self.tasks = [Task(base_name, head.sizes[-1], "base", [TaskLayer("base") for _ in base], head)]
        self.alpha = AlphaSelector(np.array([1.0]))

    @classmethod
    def random(cls, arch: Architecture, rng: np.random.Generator, base_name: str = "base") -> DanNetwork:
        base = [FilterBank.init(co, ci, k, rng) for co, ci, k in arch.conv_dims()]
        return cls(arch, base, Head.init(arch.head_sizes(), rng), base_name=base_name)

    # -- bookkeeping ------------------------------------------------------
    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task_index(self, task) -> int:
        if isinstance(task, (int, np.integer)):
            t = int(task)
            if t < 0:
                t += self.n_tasks
            if not 0 <= t < self.n_tasks:
                raise IndexError(f"no task {task}")
            return t
        for i, t in enumerate(self.tasks):
            if t.name == task:
                return i
        raise KeyError(f"no task named {task!r}")

    def freeze_base(self) -> None:
        for fb in self.base:
            fb.freeze(True)
        self.freeze_task(0)

    def freeze_task(self, task) -> None:
        t = self.task_index(task)
        tk = self.tasks[t]
        tk.head.freeze(True)
        for tl in tk.layers:
            if tl.controller is not None:
                tl.controller.freeze(True)
            if tl.filters is not None:
                tl.filters.freeze(True)
        for bank in self.bn:
            if bank is not None:
                bank.params[t].freeze(True)

    def add_task(self, name: str, mode: str = "dan-linear", init: str = "diagonal",
                 rng: np.random.Generator | None = None, n_classes: int | None = None,
                 layer_kinds: list[str] | None = None,
                 targets: list[FilterBank] | None = None,
                 own_init: list[FilterBank] | None = None) -> int:
        """Attach a new task; never touches existing tasks' parameters.

        ``layer_kinds`` overrides the per-layer binding implied by ``mode``
        (``"controller"``, ``"own"`` or ``"base"``); ``own_init`` supplies
        starting filters for ``"own"`` layers.
        """
        if mode not in TASK_MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {TASK_MODES}")
        if any(t.name == name for t in self.tasks):
            raise ValueError(f"task {name!r} already exists")
        rng = rng if rng is not None else np.random.default_rng()
        n_classes = self.arch.n_classes if n_classes is None else n_classes
        if layer_kinds is None:
            kind = {"dan-linear": "controller", "dan-diagonal": "controller", "ft-last": "base"}.get(mode, "own")
            layer_kinds = [kind] * len(self.base)
        if len(layer_kinds) != len(self.base):
            raise ValueError("layer_kinds must name one binding per conv layer")
        cmode = "diagonal" if mode == "dan-diagonal" else "linear"

        layers = []
        for l, (kind, fb) in enumerate(zip(layer_kinds, self.base)):
            if kind == "controller":
                tgt = targets[l] if targets is not None else None
                layers.append(TaskLayer("controller", controller=init_controller(init, fb, rng, tgt, cmode, l)))
            elif kind == "own":
                if own_init is not None and own_init[l] is not None:
                    own = own_init[l].clone(frozen=False)
                elif mode == "scratch":
                    co, ci, k = self.arch.conv_dims()[l]
                    own = FilterBank.init(co, ci, k, rng)
                else:
                    own = fb.clone(frozen=False)
                layers.append(TaskLayer("own", filters=own))
            elif kind == "base":
                layers.append(TaskLayer("base"))
            else:
                raise ValueError(f"unknown layer binding {kind!r}")

        t = self.n_tasks
        for bank in self.bn:
            if bank is None:
                continue
            bank.add_task(0, frozen=mode in ("ft-last", "ft-full-bn-off"))
            if mode == "scratch":
                bank.params[t] = BatchNormBank._fresh(bank.channels)
        self.tasks.append(Task(name, n_classes, mode, layers, Head.init(self.arch.head_sizes(n_classes), rng), init))
        self.alpha.resize(self.n_tasks)
        return t

    def layer_filters(self, task: int, layer: int) -> tuple[Tensor, Tensor]:
        tl = self.tasks[task].layers[layer]
        fb = self.base[layer]
        if tl.kind == "base":
            return fb.weights, fb.bias
        if tl.kind == "controller":
            return tl.controller.adapted(fb), tl.controller.bias
        return tl.filters.weights, tl.filters.bias

    # -- forward ----------------------------------------------------------
    def set_alpha(self, spec) -> None:
        set_alpha(self.alpha, spec)

    def _mixed_filters(self, alphas: np.ndarray, layer: int) -> tuple[Tensor, Tensor]:
        w = b = None
        for t, a in enumerate(alphas):
            if a == 0.0:
                continue
            wt, bt = self.layer_filters(t, layer)
            wt, bt = mul(wt, float(a)), mul(bt, float(a))
            w = wt if w is None else add(w, wt)
            b = bt if b is None else add(b, bt)
        return w, b

    def features(self, x, alpha=None, training: bool = False) -> Tensor:
        alphas = self.alpha.alphas if alpha is None else np.asarray(alpha, dtype=np.float64)
        if len(alphas) != self.n_tasks:
            raise ValueError(f"alpha has {len(alphas)} entries for {self.n_tasks} tasks")
        nz = np.flatnonzero(alphas)
        single = int(nz[0]) if len(nz) == 1 and alphas[nz[0]] == 1.0 else None
        dom = int(np.argmax(alphas))
        h = as_tensor(x)
        for l, cs in enumerate(self.arch.convs):
            if single is not None:
                w, b = self.layer_filters(single, l)
            else:
                w, b = self._mixed_filters(alphas, l)
            h = conv2d(h, w, b, stride=cs.stride, padding=cs.padding)
            bank = self.bn[l]
            if bank is not None:
                bank.mode = "train" if training else "eval"
                h = bank(h, dom)
            h = relu(h)
            if cs.pool:
                h = maxpool2d(h, cs.pool, cs.pool)
        return reshape(h, (h.shape[0], -1))

    def forward(self, x, alpha=None, head=None, training: bool = False) -> Tensor:
        """Logits for ``x``; the head defaults to the task with the largest alpha."""
        alphas = self.alpha.alphas if alpha is None else np.asarray(alpha, dtype=np.float64)
        h = self.task_index(head) if head is not None else int(np.argmax(alphas))
        return self.tasks[h].head(self.features(x, alphas, training))

    __call__ = forward

    def task_forward(self, x, task, training: bool = False) -> Tensor:
        t = self.task_index(task)
        return self.forward(x, alpha=one_hot(t, self.n_tasks), head=t, training=training)

    # -- parameters -------------------------------------------------------
    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every stored array by name (live references, not copies)."""
        out: dict[str, np.ndarray] = {}
        for l, fb in enumerate(self.base):
            out[f"base.conv{l}.weight"] = fb.weights.data
            out[f"base.conv{l}.bias"] = fb.bias.data
        for t, tk in enumerate(self.tasks):
            for l, tl in enumerate(tk.layers):
                if tl.kind == "controller":
                    out[f"task{t}.conv{l}.W"] = tl.controller.W.data
                    out[f"task{t}.conv{l}.b"] = tl.controller.bias.data
                elif tl.kind == "own":
                    out[f"task{t}.conv{l}.weight"] = tl.filters.weights.data
                    out[f"task{t}.conv{l}.bias"] = tl.filters.bias.data
            for i, (w, b) in enumerate(zip(tk.head.weights, tk.head.biases)):
                out[f"task{t}.head.fc{i}.weight"] = w.data
                out[f"task{t}.head.fc{i}.bias"] = b.data
        for l, bank in enumerate(self.bn):
            if bank is None:
                continue
            for t, p in enumerate(bank.params):
                out[f"bn{l}.task{t}.gamma"] = p.gamma.data
                out[f"bn{l}.task{t}.beta"] = p.beta.data
                out[f"bn{l}.task{t}.running_mean"] = p.running_mean
                out[f"bn{l}.task{t}.running_var"] = p.running_var
        return out

    def _param_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for l, fb in enumerate(self.base):
            out[f"base.conv{l}.weight"] = fb.weights
            out[f"base.conv{l}.bias"] = fb.bias
        for t, tk in enumerate(self.tasks):
            for l, tl in enumerate(tk.layers):
                if tl.kind == "controller":
                    out[f"task{t}.conv{l}.W"] = tl.controller.W
                    out[f"task{t}.conv{l}.b"] = tl.controller.bias
                elif tl.kind == "own":
                    out[f"task{t}.conv{l}.weight"] = tl.filters.weights
                    out[f"task{t}.conv{l}.bias"] = tl.filters.bias
            for i, (w, b) in enumerate(zip(tk.head.weights, tk.head.biases)):
                out[f"task{t}.head.fc{i}.weight"] = w
                out[f"task{t}.head.fc{i}.bias"] = b
        for l, bank in enumerate(self.bn):
            if bank is None:
                continue
            for t, p in enumerate(bank.params):
                out[f"bn{l}.task{t}.gamma"] = p.gamma
                out[f"bn{l}.task{t}.beta"] = p.beta
        return out

    def trainable(self, task) -> dict[str, Tensor]:
        """Unfrozen tensors that influence ``task``'s one-hot forward pass."""
        t = self.task_index(task)
        used = {f"task{t}."}
        if t == 0 or any(tl.kind in ("base", "controller") for tl in self.tasks[t].layers):
            used.add("base.")
        used.update(f"bn{l}.task{t}." for l in range(len(self.bn)))
        return {k: v for k, v in self._param_tensors().items()
                if v.requires_grad and any(k.startswith(p) for p in used)}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_tensors().items()}

    def clone(self) -> DanNetwork:
        return copy.deepcopy(self)


def classify_with_decider(net: DanNetwork, decider: DanNetwork, x, task_map: list[int] | None = None,
                          batch_size: int = 256) -> np.ndarray:
    """Route each input to the task the decider scores highest, then classify it there.

    ``task_map[d]`` is the network task for decider class ``d`` (identity by default).
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    preds = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        route = select_alpha_from_decider(decider.task_forward(xb, 0).data).argmax(axis=1)
        for d in np.unique(route):
            t = task_map[d] if task_map is not None else int(d)
            idx = np.flatnonzero(route == d)
            preds[s + idx] = net.task_forward(xb[idx], t).data.argmax(axis=1)
    return preds


# --------------------------------------------------------------------------
# parameter accounting

@dataclass
class CostReport:
    layer_ratios: list[float]
    base_params: int
    increment_params: int
    increment: float
    n_tasks: int
    total: float
    amortized: float


def layer_ratio(c_out: int, c_in: int, k: int, mode: str = "linear") -> float:
    """New-to-old parameter ratio for one controlled conv layer, ``(C_o+1)/(D+1)`` for linear."""
    d = c_in * k * k
    if c_out >= d:
        warnings.warn(f"controller for C_o={c_out} >= D={d} adds at least as many parameters as the layer has",
                      RuntimeWarning, stacklevel=2)
    if mode == "diagonal":
        return 2.0 / (d + 1)
    return (c_out + 1) / (d + 1)


def amortized_total(increment: float, n_tasks: int) -> float:
    """Total parameters for ``n_tasks`` tasks in units of one base network."""
    return 1.0 + increment * (n_tasks - 1)


def quantized_increment(increment: float, bits: int) -> float:
    return increment * bits / 32.0


def parameter_cost(arch, n_tasks: int = 2, mode: str = "linear", new_head: bool = True) -> CostReport:
    """Parameter cost of adding DAN tasks to ``arch``.

    ``arch`` is an :class:`Architecture` or a list of ``(C_o, C_i, k)`` conv
    layers (no head or batch norm).
    """
    if isinstance(arch, Architecture):
        dims = arch.conv_dims()
        head = sum(a * b + b for a, b in zip(arch.head_sizes()[:-1], arch.head_sizes()[1:]))
        bn = sum(2 * c.out_channels for c in arch.convs if c.batchnorm)
    else:
        dims = [tuple(d) for d in arch]
        head = bn = 0
    ratios = [layer_ratio(co, ci, k, mode) for co, ci, k in dims]
    base = sum(co * ci * k * k + co for co, ci, k in dims) + head + bn
    ctrl = sum((co * co if mode == "linear" else co) + co for co, _, _ in dims)
    inc_params = ctrl + (head if new_head else 0) + bn
    inc = inc_params / base
    total = amortized_total(inc, n_tasks)
    return CostReport(ratios, base, inc_params, inc, n_tasks, total, total / n_tasks)

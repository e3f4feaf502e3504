"""Optimizers, the training loop, evaluation and the multi-trial scenario runner."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bars import BarsConfig, BarsData, Dataset, ScenarioSpec, gen_bars, make_bar_filter, toy_network
from .dan import DanNetwork
from .layers import softmax_cross_entropy
from .tensor import FilterBank, Tensor

log = logging.getLogger(__name__)

# offsets for per-run derived random streams
DATA_SEED_OFFSET = 1000
SHUFFLE_SEED_OFFSET = 2000


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    momentum: float = 0.0
    schedule: str = "constant"  # or "halve-every-10"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "halve-every-10"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "halve-every-10":
            return self.learning_rate * 0.5 ** (epoch // 10)
        return self.learning_rate


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
              cfg: OptimizerConfig, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.betas
    t = state["t"] = state.get("t", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in m:
            m[k] = np.zeros_like(p.data)
            v[k] = np.zeros_like(p.data)
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * (g * g)
        p.data -= lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + cfg.epsilon)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
             cfg: OptimizerConfig, lr: float | None = None) -> None:
    lr = cfg.learning_rate if lr is None else lr
    buf = state.setdefault("buf", {})
    for k, p in params.items():
        g = grads[k]
        if cfg.momentum:
            buf[k] = cfg.momentum * buf[k] + g if k in buf else g.copy()
            g = buf[k]
        p.data -= lr * g


STEPS = {"adam": adam_step, "sgd": sgd_step}


@dataclass
class RunHistory:
    scenario: str = ""
    trial: int = 0
    seed: int = 0
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.val_acc)

    def rows(self) -> list[dict]:
        return [
            {"scenario": self.scenario, "trial": self.trial, "epoch": e + 1,
             "train_loss": self.train_loss[e], "train_acc": self.train_acc[e], "val_acc": self.val_acc[e]}
            for e in range(self.epochs)
        ]


HISTORY_FIELDS = ["scenario", "trial", "epoch", "train_loss", "train_acc", "val_acc"]


def predict(model, x: np.ndarray, task=0, alpha=None, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        if isinstance(model, DanNetwork):
            if alpha is None:
                logits = model.task_forward(xb, task)
            else:
                logits = model.forward(xb, alpha=alpha, head=task)
        else:
            logits = model(xb)
        out.append(np.asarray(logits.data if isinstance(logits, Tensor) else logits).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, data: Dataset, task=0, alpha=None) -> float:
    """Top-1 accuracy; ``model`` is a DanNetwork or any callable returning logits."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data.x, task, alpha) == data.y))


def train(net: DanNetwork, data: BarsData, task=-1, opt: OptimizerConfig | None = None,
          epochs: int = 50, seed: int = 0, batch_size: int = 32,
          scenario: str = "", trial: int = 0) -> RunHistory:
    """Train the unfrozen parameters of ``task`` with minibatch cross-entropy.

    Anything frozen, including every other task, is left bit-identical.
    """
    opt = opt or OptimizerConfig()
    if len(data.train) == 0:
        raise ValueError("empty training set")
    t = net.task_index(task)
    params = net.trainable(t)
    if not params:
        raise ValueError(f"task {net.tasks[t].name!r} has nothing to train")
    step = STEPS[opt.kind]
    log.info("train task=%s mode=%s epochs=%d batch=%d seed=%d opt=%s",
             net.tasks[t].name, net.tasks[t].mode, epochs, batch_size, seed, asdict(opt))

    rng = np.random.default_rng(seed)
    state: dict = {}
    hist = RunHistory(scenario=scenario, trial=trial, seed=seed)
    x, y = data.train.x, data.train.y
    n = len(y)
    for epoch in range(epochs):
        lr = opt.lr_at(epoch)
        perm = rng.permutation(n)
        tot_loss = correct = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            for p in params.values():
                p.grad = None
            logits = net.task_forward(x[idx], t, training=True)
            loss = softmax_cross_entropy(logits, y[idx])
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            step(params, grads, state, opt, lr)
            tot_loss += float(loss.data) * len(idx)
            correct += float((logits.data.argmax(axis=1) == y[idx]).sum())
        for p in params.values():
            p.grad = None
        hist.train_loss.append(tot_loss / n)
        hist.train_acc.append(correct / n)
        hist.val_acc.append(evaluate(net, data.test, t) if len(data.test) else float("nan"))
    return hist


# --------------------------------------------------------------------------
# scenarios

def build_scenario_network(spec: ScenarioSpec, rng: np.random.Generator) -> tuple[DanNetwork, int]:
    """Network and trainable task index for one toy scenario.

    The base conv1 holds the scenario's first-layer init. A fixed first layer is
    reached through a diagonally initialized 1x1 controller; a trainable one is
    a task-owned copy. Conv2 and the head are always task-owned and trainable.
    """
    arch = toy_network()
    net = DanNetwork.random(arch, rng)
    first = net.base[0]
    if spec.first_init in ("bar", "bar+noise"):
        w = make_bar_filter(spec.filter_orientation, spec.filter_channel, arch.convs[0].kernel)
        if spec.first_init == "bar+noise":
            w = w + rng.normal(0.0, spec.noise_sigma, size=w.shape)
        first.weights.data[...] = w[None]
    elif spec.first_init != "random":
        raise ValueError(f"unknown first-layer init {spec.first_init!r}")
    net.freeze_base()
    kinds = ["controller" if ctrl else "own" for ctrl in spec.controller_mask]
    t = net.add_task(spec.variant, mode="dan-linear", init="diagonal", rng=rng, layer_kinds=kinds)
    # conv2 starts from the same random filters the base drew
    return net, t


def scenario_optimizer(spec: ScenarioSpec) -> OptimizerConfig:
    return OptimizerConfig(kind=spec.optimizer, learning_rate=spec.lr)


def run_trial(spec: ScenarioSpec, trial: int, base_seed: int = 0) -> RunHistory:
    seed = base_seed + trial
    data = gen_bars(BarsConfig(spec.variant, spec.n_examples, spec.split, seed + DATA_SEED_OFFSET))
    net, t = build_scenario_network(spec, np.random.default_rng(seed))
    hist = train(net, data, t, scenario_optimizer(spec), spec.epochs, seed + SHUFFLE_SEED_OFFSET,
                 spec.batch_size, scenario=spec.name, trial=trial)
    hist.seed = seed
    return hist


@dataclass
class TrialSummary:
    scenario: str
    histories: list[RunHistory]
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return np.array([h.val_acc[-1] for h in self.histories])

    @property
    def final_mean(self) -> float:
        return float(self.final.mean())

    @property
    def final_max(self) -> float:
        return float(self.final.max())


def summarize(name: str, histories: list[RunHistory]) -> TrialSummary:
    acc = np.array([h.val_acc for h in histories])
    return TrialSummary(name, histories, acc.mean(axis=0), acc.min(axis=0), acc.max(axis=0))


def _run_trial_args(args):
    return run_trial(*args)


def run_trials(spec: ScenarioSpec, base_seed: int = 0, workers: int = 1) -> TrialSummary:
    """Repeat a scenario ``spec.trials`` times with seeds ``base_seed + i``."""
    if spec.trials < 1:
        raise ValueError("need at least one trial")
    jobs = [(spec, i, base_seed) for i in range(spec.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            histories = list(ex.map(_run_trial_args, jobs))
    else:
        histories = [run_trial(*j) for j in jobs]
    return summarize(spec.name, histories)

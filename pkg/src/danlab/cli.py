"""Command-line entry point: ``danlab <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import archive
from .bars import BarsConfig, BarsData, Dataset, export_bars, gen_bars, load_bars, scenario_setup, toy_network
from .dan import INIT_SCHEMES, TASK_MODES, DanNetwork, amortized_total, classify_with_decider, parameter_cost, quantized_increment
from .quant import SWEEP_FIELDS, VALID_BITS, accuracy_vs_bits
from .train import (
    DATA_SEED_OFFSET,
    HISTORY_FIELDS,
    SHUFFLE_SEED_OFFSET,
    OptimizerConfig,
    evaluate,
    predict,
    run_trials,
    train,
)

log = logging.getLogger("danlab")

# derived-stream offsets for model initialization
INIT_SEED_OFFSET = 3000


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _csv_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _int_list(s: str) -> list[int]:
    return [int(p) for p in _csv_list(s)]


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
    common.add_argument("--out", type=Path, default=Path("runs"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="danlab", description="Deep adaptation network lab", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    def cmd(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    def data_args(sp, variant=True):
        if variant:
            sp.add_argument("--variant", default="red-horizontal")
        sp.add_argument("--data", type=Path, default=None, help="exported bars file instead of --variant")
        sp.add_argument("--n-examples", type=int, default=1000)
        sp.add_argument("--split", type=float, default=0.75)

    def train_args(sp):
        sp.add_argument("--epochs", type=int, default=50)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
        sp.add_argument("--schedule", choices=["constant", "halve-every-10"], default="constant")
        sp.add_argument("--batch-size", type=int, default=32)

    sp = cmd("gen-bars", "generate and export a bars dataset")
    data_args(sp)
    sp.add_argument("--name", default=None)

    sp = cmd("train-base", "train a toy base network (or a dataset decider with --domains)")
    data_args(sp)
    train_args(sp)
    sp.add_argument("--domains", type=_csv_list, default=None, help="variants to discriminate (decider)")
    sp.add_argument("--name", default="base")
    sp.add_argument("--batchnorm", action="store_true")

    sp = cmd("attach", "attach a new task to a saved model")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--name", required=True)
    sp.add_argument("--mode", choices=TASK_MODES, default="dan-linear")
    sp.add_argument("--init", choices=INIT_SCHEMES, default="diagonal")
    sp.add_argument("--target", type=Path, default=None, help="model whose base filters linear_approx fits")
    sp.add_argument("--n-classes", type=int, default=None)
    sp.add_argument("--to", type=Path, default=None, help="output model (default: overwrite --model)")

    sp = cmd("train-task", "train one attached task")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--task", required=True)
    data_args(sp)
    train_args(sp)
    sp.add_argument("--to", type=Path, default=None)

    sp = cmd("eval", "accuracy of one task, or end to end through a dataset decider")
    sp.add_argument("--model", type=Path, required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--task")
    g.add_argument("--decider", type=Path)
    data_args(sp)
    sp.add_argument("--variants", type=_csv_list, default=None, help="one domain per decider class")
    sp.add_argument("--tasks", type=_csv_list, default=None, help="task per decider class")

    sp = cmd("scenario", "run a named toy scenario over several trials")
    sp.add_argument("name")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--workers", type=int, default=1)

    sp = cmd("cost", "parameter-cost report")
    sp.add_argument("--model", type=Path, default=None)
    sp.add_argument("--layer", action="append", type=_int_list, default=None, help="C_o,C_i,k (repeatable)")
    sp.add_argument("--tasks", type=int, default=2)
    sp.add_argument("--mode", choices=["linear", "diagonal"], default="linear")
    sp.add_argument("--increment", type=float, default=None, help="per-task increment for amortization")
    sp.add_argument("--bits", type=int, default=None)

    sp = cmd("quantize", "accuracy versus bit width")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--task", default="0")
    data_args(sp)
    sp.add_argument("--bits", type=_int_list, default=list(VALID_BITS))
    sp.add_argument("--include-bn", action="store_true")

    sp = cmd("interp", "sweep a real-valued alpha between two tasks")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--tasks", type=_csv_list, required=True)
    sp.add_argument("--variants", type=_csv_list, required=True)
    sp.add_argument("--steps", type=int, default=5)
    data_args(sp, variant=False)
    return p


# --------------------------------------------------------------------------
# helpers

def load_data(args, variant: str | None = None) -> BarsData:
    if getattr(args, "data", None) is not None:
        return load_bars(args.data)
    v = variant or args.variant
    return gen_bars(BarsConfig(v, args.n_examples, args.split, args.seed + DATA_SEED_OFFSET))


def opt_config(args) -> OptimizerConfig:
    return OptimizerConfig(kind=args.optimizer, learning_rate=args.lr, schedule=args.schedule)


def task_ref(s: str):
    return int(s) if s.lstrip("-").isdigit() else s


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# commands

def cmd_gen_bars(args) -> None:
    data = load_data(args)
    name = args.name or f"bars_{data.config.variant}"
    args.out.mkdir(parents=True, exist_ok=True)
    path = export_bars(data, args.out / f"{name}.bin")
    emit({"path": str(path), "train": len(data.train), "test": len(data.test)})


def cmd_train_base(args) -> None:
    if args.domains:
        parts = [load_data(args, v) for v in args.domains]
        data = BarsData(
            Dataset(np.concatenate([d.train.x for d in parts]),
                    np.concatenate([np.full(len(d.train), i) for i, d in enumerate(parts)])),
            Dataset(np.concatenate([d.test.x for d in parts]),
                    np.concatenate([np.full(len(d.test), i) for i, d in enumerate(parts)])),
            parts[0].config,
        )
        arch = toy_network(len(parts))
        label = "decider"
    else:
        data = load_data(args)
        arch = toy_network()
        label = data.config.variant
    if args.batchnorm:
        for c in arch.convs:
            c.batchnorm = True
    rng = np.random.default_rng(args.seed + INIT_SEED_OFFSET)
    net = DanNetwork.random(arch, rng, base_name=label)
    hist = train(net, data, 0, opt_config(args), args.epochs, args.seed + SHUFFLE_SEED_OFFSET,
                 args.batch_size, scenario=f"train-base:{label}")
    net.freeze_base()
    path = archive.save_model(net, args.out / args.name)
    archive.emit_metrics(hist.rows(), args.out / f"{args.name}_history.csv", HISTORY_FIELDS)
    emit({"model": str(path), "val_acc": hist.val_acc[-1] if hist.val_acc else None})


def cmd_attach(args) -> None:
    net = archive.load_model(args.model)
    targets = None
    if args.init == "linear_approx":
        if args.target is None:
            raise ValueError("--init linear_approx needs --target")
        targets = archive.load_model(args.target).base
    rng = np.random.default_rng(args.seed + INIT_SEED_OFFSET + net.n_tasks)
    t = net.add_task(args.name, mode=args.mode, init=args.init, rng=rng, n_classes=args.n_classes, targets=targets)
    path = archive.save_model(net, args.to or args.model)
    emit({"model": str(path), "task": t, "name": args.name, "mode": args.mode, "init": args.init})


def cmd_train_task(args) -> None:
    net = archive.load_model(args.model)
    t = net.task_index(task_ref(args.task))
    data = load_data(args)
    hist = train(net, data, t, opt_config(args), args.epochs, args.seed + SHUFFLE_SEED_OFFSET,
                 args.batch_size, scenario=f"train-task:{net.tasks[t].name}")
    net.freeze_task(t)
    path = archive.save_model(net, args.to or args.model)
    archive.emit_metrics(hist.rows(), args.out / f"{net.tasks[t].name}_history.csv", HISTORY_FIELDS)
    emit({"model": str(path), "task": net.tasks[t].name, "val_acc": hist.val_acc[-1] if hist.val_acc else None})


def cmd_eval(args) -> None:
    net = archive.load_model(args.model)
    if args.task is not None:
        t = net.task_index(task_ref(args.task))
        acc = evaluate(net, load_data(args).test, t)
        emit({"task": net.tasks[t].name, "accuracy": acc})
        return
    if not args.variants:
        raise ValueError("--decider needs --variants (one per decider class)")
    decider = archive.load_model(args.decider)
    tasks = [net.task_index(task_ref(s)) for s in args.tasks] if args.tasks else list(range(len(args.variants)))
    if len(tasks) != len(args.variants):
        raise ValueError("--tasks and --variants must have the same length")
    parts = [load_data(args, v).test for v in args.variants]
    x = np.concatenate([d.x for d in parts])
    y = np.concatenate([d.y for d in parts])
    dom = np.concatenate([np.full(len(d), i) for i, d in enumerate(parts)])
    dec_acc = float(np.mean(predict(decider, x, 0) == dom))
    per_task = [evaluate(net, d, t) for d, t in zip(parts, tasks)]
    e2e = float(np.mean(classify_with_decider(net, decider, x, tasks) == y))
    emit({"decider_accuracy": dec_acc, "task_accuracy": per_task, "end_to_end_accuracy": e2e})


def cmd_scenario(args) -> None:
    spec = replace(scenario_setup(args.name), trials=args.trials, epochs=args.epochs)
    log.info("scenario %s", spec.to_dict())
    summary = run_trials(spec, base_seed=args.seed, workers=args.workers)
    rows = [r for h in summary.histories for r in h.rows()]
    path = archive.emit_metrics(rows, args.out / f"scenario_{spec.name}.csv", HISTORY_FIELDS)
    agg = [{"epoch": e + 1, "mean": summary.mean[e], "min": summary.min[e], "max": summary.max[e]}
           for e in range(spec.epochs)]
    archive.emit_metrics(agg, args.out / f"scenario_{spec.name}_summary.csv", ["epoch", "mean", "min", "max"])
    emit({"scenario": spec.name, "csv": str(path), "final_mean": summary.final_mean, "final_max": summary.final_max})


def cmd_cost(args) -> None:
    if args.increment is not None:
        out = {"increment": args.increment, "tasks": args.tasks,
               "total": amortized_total(args.increment, args.tasks)}
        if args.bits is not None:
            out["quantized_increment"] = quantized_increment(args.increment, args.bits)
        emit(out)
        return
    if args.layer:
        arch = args.layer
    elif args.model is not None:
        arch = archive.load_model(args.model).arch
    else:
        arch = toy_network()
    rep = parameter_cost(arch, args.tasks, args.mode)
    dims = arch.conv_dims() if hasattr(arch, "conv_dims") else [tuple(d) for d in arch]
    for l, ((co, ci, k), r) in enumerate(zip(dims, rep.layer_ratios)):
        print(f"layer {l}: C_o={co} C_i={ci} k={k} ratio={r:.4f}")
    out = {"layer_ratios": rep.layer_ratios, "base_params": rep.base_params, "increment": rep.increment,
           "tasks": rep.n_tasks, "total": rep.total, "amortized": rep.amortized}
    if args.bits is not None:
        out["quantized_increment"] = quantized_increment(rep.increment, args.bits)
    emit(out)


def cmd_quantize(args) -> None:
    net = archive.load_model(args.model)
    t = net.task_index(task_ref(args.task))
    rows = accuracy_vs_bits(net, load_data(args).test, args.bits, t, exclude_bn=not args.include_bn)
    path = archive.emit_metrics(rows, args.out / f"quant_{net.tasks[t].name}.csv", SWEEP_FIELDS)
    emit({"csv": str(path), "rows": rows})


def cmd_interp(args) -> None:
    net = archive.load_model(args.model)
    if len(args.tasks) != 2 or len(args.variants) != 2:
        raise ValueError("interp needs exactly two --tasks and two --variants")
    a, b = (net.task_index(task_ref(s)) for s in args.tasks)
    tests = [load_data(args, v).test for v in args.variants]
    rows = []
    for s in np.linspace(0.0, 1.0, args.steps):
        alpha = np.zeros(net.n_tasks)
        alpha[a] += 1.0 - s
        alpha[b] += s
        # every point uses the head of the dominant task
        head = a if alpha[a] >= alpha[b] else b
        rows.append({"alpha": float(s), "head": net.tasks[head].name,
                     f"acc_{net.tasks[a].name}": evaluate(net, tests[0], head, alpha=alpha),
                     f"acc_{net.tasks[b].name}": evaluate(net, tests[1], head, alpha=alpha)})
    path = archive.emit_metrics(rows, args.out / "interp.csv")
    emit({"csv": str(path), "rows": rows})


COMMANDS = {
    "gen-bars": cmd_gen_bars,
    "train-base": cmd_train_base,
    "attach": cmd_attach,
    "train-task": cmd_train_task,
    "eval": cmd_eval,
    "scenario": cmd_scenario,
    "cost": cmd_cost,
    "quantize": cmd_quantize,
    "interp": cmd_interp,
}


def _apply_config(parser: Parser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        cfg = json.loads(known.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {known.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for path_key in ("out", "model", "data", "decider", "target", "to"):
        if isinstance(cfg.get(path_key), str):
            cfg[path_key] = Path(cfg[path_key])
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in [parser, *subs.choices.values()]:
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
    except UsageError:
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except archive.ArchiveError as e:
        print(f"error [{type(e).__name__}, code {e.code}]: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, IndexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

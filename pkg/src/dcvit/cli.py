"""``dcvit`` command line: bench, train, eval, gradcheck and check."""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import sys
from dataclasses import dataclass, field

from . import checks
from .complexity import bench_sweep, slopes, write_csv
from .container import FormatError, load_model, save_model
from .datagen import SynthTask, gen_dataset, split
from .encoder import ConfigError, ModelConfig, init_model
from .training import TrainConfig, accuracy, gradcheck, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

TASK_EXTRA = {"n_samples": 2000, "fractions": [0.8, 0.1, 0.1]}
BENCH_KEYS = {"C_list": None, "N": None, "D": None, "L": None, "M": [], "repeats": 5, "heads": 1, "parallel": False}

# the model the gradient check uses when no config is given
TINY_MODEL = dict(c_max=3, img_size=4, patch_size=2, dim=8, depth=2, heads=2, channel_layers=[2],
                  g_sp="abmil", g_ch="max", num_classes=3, mlp_ratio=2.0)


def _as_config_error(fn):
    """Bad values inside a section surface as config errors, not crashes."""

    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    return wrapper


@dataclass
class RunConfig:
    sections: dict[str, dict] = field(default_factory=dict)

    def require(self, *names: str) -> None:
        for n in names:
            if n not in self.sections:
                raise ConfigError(f"config is missing the '{n}' section")

    @_as_config_error
    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(self.sections["model"])

    @_as_config_error
    def train(self) -> TrainConfig:
        return TrainConfig.from_dict(self.sections.get("train", {}))

    @_as_config_error
    def task(self) -> tuple[SynthTask, int, tuple]:
        d = dict(self.sections["task"])
        n = d.pop("n_samples", TASK_EXTRA["n_samples"])
        fr = tuple(d.pop("fractions", TASK_EXTRA["fractions"]))
        return SynthTask.from_dict(d), int(n), fr

    @_as_config_error
    def bench(self) -> dict:
        b = {**BENCH_KEYS, **self.sections["bench"]}
        missing = [k for k, v in b.items() if v is None]
        if missing:
            raise ConfigError(f"bench section is missing {missing}")
        return b


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


SECTION_KEYS = {
    "model": _field_names(ModelConfig),
    "train": _field_names(TrainConfig),
    "task": _field_names(SynthTask) | set(TASK_EXTRA),
    "bench": set(BENCH_KEYS),
}


def parse_run_config(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for name, body in doc.items():
        if name not in SECTION_KEYS:
            raise ConfigError(f"unknown key '{name}'")
        if not isinstance(body, dict):
            raise ConfigError(f"'{name}' must be an object")
        for key in body:
            if key not in SECTION_KEYS[name]:
                raise ConfigError(f"unknown key '{name}.{key}'")
    return RunConfig({k: dict(v) for k, v in doc.items()})


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)


def _apply_seed(rc: RunConfig, seed: int | None) -> None:
    if seed is not None:
        rc.sections.setdefault("train", {})["seed"] = seed


@_as_config_error
def _task_data(rc: RunConfig):
    task, n, fractions = rc.task()
    data = gen_dataset(task, n)
    train_set, val_set, _ = split(data, fractions, seed=task.seed)
    if len(val_set) == 0:
        raise ConfigError("task.fractions leaves no validation samples")
    return task, train_set, val_set


def _check_compatible(model_cfg: ModelConfig, task: SynthTask) -> None:
    if model_cfg.img_size != task.img_size:
        raise ConfigError(f"model.img_size={model_cfg.img_size} but task.img_size={task.img_size}")
    if model_cfg.c_max < task.C:
        raise ConfigError(f"model.c_max={model_cfg.c_max} is below task.C={task.C}")
    if model_cfg.num_classes < task.num_classes:
        raise ConfigError(f"model.num_classes={model_cfg.num_classes} is below task.num_classes={task.num_classes}")


# ---------------------------------------------------------------------------
# commands


def cmd_bench(args) -> int:
    rc = load_run_config(args.config)
    rc.require("bench")
    b = rc.bench()
    records = bench_sweep(b["C_list"], b["N"], b["D"], b["L"], b["M"], repeats=b["repeats"],
                          seed=args.seed or 0, parallel=b["parallel"], heads=b["heads"])
    write_csv(records, args.out)
    for mode, (s_flops, s_time) in slopes(records).items():
        print(f"{mode}: flops slope {s_flops:.4f}  time slope {s_time:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    rc.require("model", "task")
    _apply_seed(rc, args.seed)
    model_cfg, train_cfg = rc.model(), rc.train()
    task, train_set, val_set = _task_data(rc)
    _check_compatible(model_cfg, task)
    model = init_model(model_cfg, seed=train_cfg.seed)

    def log(rec):
        print(json.dumps(rec), flush=True)

    hist = train(model, train_set, val_set, train_cfg, log=log)
    save_model(model, args.out)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write(hist.to_jsonl())
    print(f"final val accuracy {hist.final_accuracy!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = load_run_config(args.config)
    rc.require("task")
    model = load_model(args.model)
    task, _, val_set = _task_data(rc)
    _check_compatible(model.config, task)
    print(f"val accuracy {accuracy(model, val_set)!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        rc = load_run_config(args.config)
        rc.require("model")
        model_cfg = rc.model()
        seed = rc.train().seed
    else:
        model_cfg, seed = ModelConfig.from_dict(TINY_MODEL), 0
    if args.seed is not None:
        seed = args.seed
    print("gradcheck runs in float64 regardless of config")
    report = gradcheck(model_cfg, seed=seed)
    for group, members in report.members.items():
        if group in report.errors:
            print(f"{group:<14} {report.errors[group]:.3e}  ({len(members)} tensors)")
        else:
            print(f"{group:<14} -")
    ok = report.passed(1e-3)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_check(args) -> int:
    results = checks.run_checks(seed=args.seed or 0)
    for r in results:
        print(r.row())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} invariants hold")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcvit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="FLOPs and wall-time sweep over channel counts")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="CSV output path")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train on a synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="model output path (DCVT)")
    t.add_argument("--history", help="JSON-lines history output path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="validation accuracy of a saved model")
    e.add_argument("--config", required=True, help="config holding the task section")
    e.add_argument("--model", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--config", help="config with a model section (default: built-in tiny model)")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("check", help="cross-module invariant suite")
    c.set_defaults(func=cmd_check)

    for sp in (b, t, e, g, c):
        sp.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

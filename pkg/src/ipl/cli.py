"""Command-line entry point.

Every :class:`RunConfig` field is a ``--kebab-case`` flag on every
subcommand.  ``--config file.json`` supplies any subset of fields; explicit
flags win over file values.  Exit status: 0 success, 1 validation error,
2 runtime error (including a failed gradient check).
"""

import argparse
import dataclasses
import datetime
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import analysis, checkpoint, tasks
from .errors import ConfigError, ContractError, IPLError
from .model import ModelConfig
from .numerics import finite_diff_check
from .tasks import TaskConfig
from .train import OptimConfig, batch_loss, build_models, collate, evaluate, train

COMMANDS = ("gen-data", "train", "eval", "grad-check", "export-gates", "sweep-length")
RUN_DIR_ENV = "IPL_RUN_DIR"
ORACLE_DTYPES = {"extended": np.longdouble, "float64": None}


@dataclass
class RunConfig:
    # task
    task: str = "cue-flip"
    n_examples: int = 2000
    data_seed: int = -1  # -1: reuse seed
    payload_length: int = 5
    n_symbols: int = 24
    n_keys: int = 8
    n_values: int = 16
    max_pairs: int = 3
    # model
    vocab_size: int = 64
    d_e: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    mode: str = "masked"
    mask_token_id: int = 1
    # optimization
    learning_rate: float = 3e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    method: str = "ipl"
    prompt_length: int = 16
    float_width: int = 64
    # paths
    run_root: str = ""
    run_dir: str = ""
    dataset: str = ""
    checkpoint: str = ""
    out: str = ""
    # command options
    split: str = "dev"
    lengths: str = "0,4,8,16,20,30,40"
    seeds: str = "0"
    attention_ids: str = ""
    workers: int = 1
    grad_batch: int = 4
    grad_h: float = 1e-5
    grad_max_elements: int = 64
    grad_tolerance: float = 1e-4
    grad_oracle: str = "extended"  # or "float64"
    grad_extended_below: float = 1e-5

    def model_config(self):
        return ModelConfig(
            vocab_size=self.vocab_size, d_e=self.d_e, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, max_len=self.max_len, mode=self.mode, mask_token_id=self.mask_token_id,
        )

    def optim_config(self):
        return OptimConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed, method=self.method, prompt_length=self.prompt_length,
            mode=self.mode, float_width=self.float_width,
        )

    def task_config(self):
        return TaskConfig(
            name=self.task, vocab_size=self.vocab_size, payload_length=self.payload_length,
            n_symbols=self.n_symbols, n_keys=self.n_keys, n_values=self.n_values, max_pairs=self.max_pairs,
        )

    @property
    def effective_data_seed(self):
        return self.seed if self.data_seed < 0 else self.data_seed

    def validate(self):
        self.model_config().validate()
        self.optim_config().validate()
        self.task_config().validate()
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"split must be train, dev or test, got {self.split!r}")
        if self.n_examples < 1:
            raise ConfigError("n_examples must be positive")
        if self.grad_oracle not in ORACLE_DTYPES:
            raise ConfigError(f"grad_oracle must be one of {sorted(ORACLE_DTYPES)}, got {self.grad_oracle!r}")
        _int_list(self.lengths, "lengths")
        _int_list(self.seeds, "seeds")
        _int_list(self.attention_ids, "attention_ids")
        return self

    def echo(self):
        """Fully resolved config minus the output location."""
        data = dataclasses.asdict(self)
        data.pop("run_dir")
        data.pop("run_root")
        return data


def _int_list(text, name):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name} must be a comma-separated integer list, got {text!r}") from exc


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="ipl", description="Instance-aware prompt learning experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with RunConfig fields")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            names = [flag, "--l"] if f.name == "prompt_length" else [flag]
            p.add_argument(*names, dest=f.name, type=type(f.default), default=argparse.SUPPRESS)
    return parser


def resolve_config(args):
    values = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        loaded.pop("command", None)  # echoed configs record the subcommand
        known = {f.name: f for f in fields(RunConfig)}
        unknown = sorted(set(loaded) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key, value in loaded.items():
            expected = type(known[key].default)
            if expected is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, expected) or isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be {expected.__name__}")
            values[key] = value
    for f in fields(RunConfig):
        if hasattr(args, f.name):
            values[f.name] = getattr(args, f.name)
    return RunConfig(**values).validate()


def make_run_dir(cfg, command):
    if cfg.run_dir:
        path = cfg.run_dir
    else:
        root = cfg.run_root or os.environ.get(RUN_DIR_ENV) or "runs"
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = os.path.join(root, f"{stamp}_{command}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, **cfg.echo()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_data(cfg):
    if cfg.dataset:
        return tasks.load_dataset(cfg.dataset, cfg.vocab_size)
    return tasks.generate(cfg.task_config(), cfg.effective_data_seed, cfg.n_examples)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _public_metrics(metrics):
    return {k: v for k, v in metrics.items() if k in ("accuracy", "exact_match", "n")}


def cmd_gen_data(cfg):
    data = tasks.generate(cfg.task_config(), cfg.effective_data_seed, cfg.n_examples)
    out = cfg.out or os.path.join(make_run_dir(cfg, "gen-data"), "data")
    tasks.save_dataset(data, out)
    _emit({"out": out, "train": len(data.train), "dev": len(data.dev), "test": len(data.test)})
    return 0


def cmd_train(cfg):
    data = load_data(cfg)
    run_dir = make_run_dir(cfg, "train")
    result = train(data, cfg.model_config(), cfg.optim_config(), run_dir=run_dir)
    ckpt = os.path.join(run_dir, "checkpoint.iplc")
    checkpoint.save_checkpoint(ckpt, result.pm, result.lm, {"optim": cfg.optim_config().to_dict(),
                                                             "task": cfg.task_config().to_dict()})
    test = evaluate(data.test, result.pm, result.lm, cfg.method, data.kind, with_gates=False)
    summary = {"run_dir": run_dir, "checkpoint": ckpt, "best_dev": result.best_dev,
               "test": _public_metrics(test), "epochs": len(result.history)}
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True)
    _emit(summary)
    return 0


def _load_ckpt(cfg):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    ck = checkpoint.load_checkpoint(cfg.checkpoint)
    method = ck.config.get("optim", {}).get("method", cfg.method)
    return ck, method


def cmd_eval(cfg):
    ck, method = _load_ckpt(cfg)
    data = load_data(cfg)
    metrics = evaluate(data.split(cfg.split), ck.pm, ck.lm, method, data.kind, with_gates=False)
    _emit({"split": cfg.split, "method": method, **_public_metrics(metrics)})
    return 0


def cmd_export_gates(cfg):
    ck, method = _load_ckpt(cfg)
    if method != "ipl":
        raise ConfigError(f"export-gates needs an IPL checkpoint, got method {method!r}")
    data = load_data(cfg)
    out_dir = cfg.out or make_run_dir(cfg, "export-gates")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "gates.jsonl")
    ids = _int_list(cfg.attention_ids, "attention_ids")
    records = analysis.export_gates(data.split(cfg.split), ck.pm, ck.lm, path, attention_ids=ids, kind=data.kind)
    result = {"gates": path, "records": len(records)}
    if ids:
        result["attention"] = os.path.join(out_dir, "gates.attention.jsonl")
    types = {r.type for r in records}
    if len(types) >= 2:
        result["similarity"] = analysis.gate_similarity(records).to_dict()
    _emit(result)
    return 0


def cmd_sweep_length(cfg):
    data = load_data(cfg)
    run_dir = make_run_dir(cfg, "sweep-length")
    csv_path = os.path.join(run_dir, "sweep.csv")
    rows = analysis.prompt_length_sweep(
        _int_list(cfg.lengths, "lengths"), data, cfg.model_config(), cfg.optim_config(),
        seeds=_int_list(cfg.seeds, "seeds"), csv_path=csv_path, workers=cfg.workers,
    )
    _emit({"csv": csv_path, "rows": [dataclasses.asdict(r) for r in rows]})
    return 0


def grad_check_report(cfg):
    """Finite-difference check of the full IPL loss over every parameter tensor."""
    model_config = cfg.model_config()
    optim = dataclasses.replace(cfg.optim_config(), float_width=64, method="ipl")
    pm, lm = build_models(model_config, optim)
    data = tasks.generate(cfg.task_config(), cfg.effective_data_seed, max(cfg.n_examples, 8))
    pool = data.train if data.train else list(data)
    batch = collate(pool[:cfg.grad_batch], data.kind, pm, lm)
    params = dict(pm.parameters())
    params.update(lm.parameters())
    return finite_diff_check(
        lambda: batch_loss("ipl", pm, lm, batch), params, h=cfg.grad_h,
        max_elements=cfg.grad_max_elements or None, seed=cfg.seed,
        oracle_dtype=ORACLE_DTYPES[cfg.grad_oracle], extended_below=cfg.grad_extended_below or None,
    )


def _group(name):
    if name.startswith("layers."):
        return ".".join(name.split(".")[:2])
    return name


def cmd_grad_check(cfg):
    report = grad_check_report(cfg)
    groups = {}
    for name, check in report.items():
        g = _group(name)
        groups[g] = max(groups.get(g, 0.0), check.max_rel_error)
    for name, check in report.items():
        print(f"{name:24s} max_rel_err={check.max_rel_error:.3e} checked={check.n_checked}")
    worst = max(groups.values())
    ok = worst <= cfg.grad_tolerance
    _emit({"groups": groups, "worst": worst, "tolerance": cfg.grad_tolerance, "pass": ok})
    return 0 if ok else 2


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "export-gates": cmd_export_gates,
    "sweep-length": cmd_sweep_length,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, ContractError) as exc:
        print(f"ipl: invalid configuration: {exc}", file=sys.stderr)
        return 1
    try:
        return HANDLERS[args.command](cfg)
    except (ConfigError, ContractError) as exc:
        print(f"ipl: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (IPLError, OSError, ValueError) as exc:
        print(f"ipl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

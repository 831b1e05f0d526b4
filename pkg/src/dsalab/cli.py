"""Command line entry point: ``dsalab <subcommand> ...``.

Every run writes ``manifest.json`` next to its outputs with the fully
resolved configuration; ``dsalab replay <manifest>`` runs it again.

Exit codes: 0 ok, 1 usage, 2 data or format problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import attack, biasonly, checkpoint, trainer, viz
from . import data as D
from .formats import FormatError, write_bytes
from .tensor import NonFiniteError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def tool_version() -> str:
    try:
        return version("dsalab")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# output helpers


def _csv_bytes(rows: list[dict], columns) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
    return buf.getvalue().encode("utf-8")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{flag} {p}: no such file")
    return p


def _load_data(path, flag: str = "--data") -> D.Dataset:
    return D.read_dataset(_need_file(path, flag))


def _load_model(path, flag: str = "--model"):
    return checkpoint.load_model(_need_file(path, flag))


# ---------------------------------------------------------------------------
# subcommands; each takes the resolved config and returns its output paths


def cmd_gen_data(cfg: dict) -> list[str]:
    spec = D.DatasetSpec(n_train=cfg["n_train"], n_test=cfg["n_test"], rho=cfg["rho"], seed=cfg["seed"],
                         spurious_patches=cfg["spurious_patches"], distractors=cfg["distractors"])
    out = _out_dir(cfg)
    tr, te = D.generate(spec)
    D.write_dataset(out / "train.dsad", tr)
    D.write_dataset(out / "test.dsad", te)
    return ["train.dsad", "test.dsad"]


def cmd_train_bias_only(cfg: dict) -> list[str]:
    data = _load_data(cfg["data"])
    bc = biasonly.BiasOnlyConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch=cfg["batch"],
                                 grad_clip=cfg["grad_clip"], momentum=cfg["momentum"],
                                 warmup_frac=cfg["warmup_frac"], reversal_mode=cfg["reversal"],
                                 grl_lambda=cfg["grl_lambda"], seed=cfg["seed"])
    out = _out_dir(cfg)
    res = biasonly.train_bias_only(bc, data)
    checkpoint.save_model(out / "bias.dsav", res.params, res.config,
                          {"kind": "bias-only", "train": biasonly.config_dict(bc)})
    write_bytes(out / "log.csv", _csv_bytes(res.log, biasonly.LOG_COLUMNS))
    return ["bias.dsav", "log.csv"]


def cmd_attack(cfg: dict) -> list[str]:
    data = _load_data(cfg["data"])
    params, mcfg, _ = _load_model(cfg["bias_model"], "--bias-model")
    if (data.channels, data.image_hw) != (mcfg.channels, mcfg.image_hw):
        raise DataError("dataset geometry does not match the bias-only model")
    out = _out_dir(cfg)
    aug, rows = attack.attack_dataset(params, mcfg, data, k=cfg["k"], alpha=cfg["alpha"], eta=cfg["eta"],
                                      steps=cfg["steps"], project=not cfg["no_project"],
                                      exclude_cls_row=cfg["exclude_cls"], keep_failed=cfg["keep_failed"])
    D.write_dataset(out / "augmented.dsad", aug)
    write_bytes(out / "sidecar.csv", _csv_bytes(rows, attack.SIDECAR_COLUMNS))
    return ["augmented.dsad", "sidecar.csv"]


def cmd_train(cfg: dict) -> list[str]:
    data = _load_data(cfg["data"])
    tc = trainer.TrainConfig(mode=cfg["mode"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"],
                             lambda3=cfg["lambda3"], align=cfg["align"],
                             align_rows="cls" if cfg["align_cls_only"] else "all",
                             align_unit=cfg.get("align_unit", "map"), k=cfg["k"],
                             am_fill=cfg["am_fill"], epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                             momentum=cfg["momentum"], warmup_frac=cfg["warmup_frac"],
                             grad_clip=cfg["grad_clip"], val_frac=cfg["val_frac"], seed=cfg["seed"])
    adv = bias = None
    if tc.mode == "dsa" and (tc.lambda2 > 0 or tc.lambda3 > 0):
        aug = _load_data(cfg["augmented"], "--augmented")
        if len(aug) != len(data) or not (np.array_equal(aug.y, data.y) and np.array_equal(aug.s, data.s)):
            raise DataError("--augmented does not pair with --data (labels differ)")
        adv = aug.images
    if tc.mode == "am":
        bp, bcfg, _ = _load_model(cfg["bias_model"], "--bias-model")
        bias = (bp, bcfg)
    out = _out_dir(cfg)
    res = trainer.train(tc, data, adv_images=adv, bias_model=bias)
    checkpoint.save_model(out / "model.dsav", res.params, res.config,
                          {"kind": tc.mode, "train": trainer.config_dict(tc), "best_epoch": res.best_epoch})
    write_bytes(out / "log.csv", _csv_bytes(res.log, trainer.LOG_COLUMNS))
    return ["model.dsav", "log.csv"]


EVAL_COLUMNS = ("model", "ACC", "abs_EO", "abs_DP", "abs_DBA", "BA", "EO", "DP", "DBA")


def cmd_eval(cfg: dict) -> list[str]:
    data = _load_data(cfg["data"])
    if not cfg["model"]:
        raise UsageError("at least one --model is required")
    models = [(p, _load_model(p)) for p in cfg["model"]]
    out = _out_dir(cfg)
    table, rows = {}, []
    for path, (params, mcfg, meta) in models:
        rep, _ = trainer.evaluate(params, mcfg, data)
        d = rep.as_dict()
        name = Path(path).stem if meta.get("kind") is None else f"{meta['kind']}:{Path(path).stem}"
        table[name] = d
        rows.append({"model": name, **{c: ("undefined" if d[c] is None else d[c]) for c in EVAL_COLUMNS[1:]}})
    write_bytes(out / "eval.json", _json_bytes(table))
    write_bytes(out / "eval.csv", _csv_bytes(rows, EVAL_COLUMNS))
    return ["eval.json", "eval.csv"]


def cmd_heatmap(cfg: dict) -> list[str]:
    data = _load_data(cfg["data"])
    if not cfg["model"]:
        raise UsageError("at least one --model is required")
    models = [_load_model(p)[:2] for p in cfg["model"]]
    idx = cfg["indices"]
    if any(i < 0 or i >= len(data) for i in idx):
        raise DataError(f"--indices out of range for {len(data)} examples")
    out = _out_dir(cfg)
    images = data.images[idx].astype(np.float64)
    maps = [viz.patch_attention(p, c, images) for p, c in models]
    names = []
    for j, i in enumerate(idx):
        rgb = viz.panel(images[j], [m[j] for m in maps], models[0][1].patch_size)
        name = f"heatmap_{i:05d}.ppm"
        viz.write_ppm(out / name, rgb)
        names.append(name)
    return names


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-bias-only": cmd_train_bias_only,
    "attack": cmd_attack,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
}
INPUT_KEYS = ("data", "model", "bias_model", "augmented")


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsalab", description="Debiased self-attention pipeline on a synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def optim(sp):
        sp.add_argument("--epochs", type=int, default=20)
        sp.add_argument("--lr", type=float, default=3e-2)
        sp.add_argument("--batch", type=int, default=32)
        sp.add_argument("--momentum", type=float, default=0.9)
        sp.add_argument("--warmup-frac", type=float, default=0.05)
        sp.add_argument("--grad-clip", type=float, default=1.0)

    def common(sp, data=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", required=True, help="input DSAD dataset")

    g = sub.add_parser("gen-data", help="write train.dsad and test.dsad")
    common(g, data=False)
    g.add_argument("--rho", type=float, default=0.95)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=1000)
    g.add_argument("--spurious-patches", type=int, default=1)
    g.add_argument("--distractors", type=int, default=1)

    b = sub.add_parser("train-bias-only", help="train the bias-only model")
    common(b)
    optim(b)
    b.add_argument("--reversal", choices=("literal", "grl"), default="literal")
    b.add_argument("--grl-lambda", type=float, default=1.0)

    a = sub.add_parser("attack", help="attack the training set against the bias-only model")
    common(a)
    a.add_argument("--bias-model", required=True)
    a.add_argument("--k", type=int, default=attack.DEFAULT_K)
    a.add_argument("--alpha", type=float, default=attack.DEFAULT_ALPHA)
    a.add_argument("--eta", type=float, default=attack.DEFAULT_ETA)
    a.add_argument("--steps", type=int, default=attack.DEFAULT_STEPS)
    a.add_argument("--no-project", action="store_true", help="let pixels leave [0, 1]")
    a.add_argument("--exclude-cls", action="store_true", help="leave the class-token row out of importance")
    a.add_argument("--keep-failed", action="store_true", help="keep perturbations that did not flip s")

    t = sub.add_parser("train", help="train a vanilla, AM or DSA target model")
    common(t)
    t.add_argument("--mode", choices=trainer.MODES, default="dsa")
    t.add_argument("--augmented", help="attacked copy of --data (dsa mode)")
    t.add_argument("--bias-model", help="bias-only checkpoint (am mode)")
    t.add_argument("--lambda1", type=float, default=1.0)
    t.add_argument("--lambda2", type=float, default=1.0)
    t.add_argument("--lambda3", type=float, default=0.5)
    t.add_argument("--align", choices=("mse", "kl", "at"), default="at")
    t.add_argument("--align-cls-only", action="store_true", help="align class-token rows only")
    t.add_argument("--align-unit", choices=("map", "row"), default="map",
                   help="compare whole per-example maps or sum over single rows")
    t.add_argument("--k", type=int, default=attack.DEFAULT_K)
    t.add_argument("--am-fill", choices=("zero", "dataset-mean"), default="zero")
    optim(t)
    t.add_argument("--val-frac", type=float, default=0.1)

    e = sub.add_parser("eval", help="fairness report for one or more checkpoints")
    common(e)
    e.add_argument("--model", action="append", default=[], help="checkpoint; repeat to compare")

    h = sub.add_parser("heatmap", help="per-patch attention heatmaps as PPM")
    common(h)
    h.add_argument("--model", action="append", default=[], help="checkpoint; repeat for side-by-side panels")
    h.add_argument("--indices", type=int, nargs="+", default=[0])

    r = sub.add_parser("replay", help="rerun a subcommand from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write to this directory instead of the recorded one")
    return p


# ---------------------------------------------------------------------------
# running


def execute(command: str, cfg: dict) -> dict:
    """Run one subcommand from a resolved config and write its manifest."""
    t0 = time.perf_counter()
    outputs = COMMANDS[command](cfg)
    manifest = {
        "subcommand": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {k: cfg[k] for k in INPUT_KEYS if cfg.get(k)},
        "outputs": outputs,
        "version": tool_version(),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    write_bytes(Path(cfg["out"]) / "manifest.json", _json_bytes(manifest))
    return manifest


def replay(path, out=None) -> dict:
    p = _need_file(path, "manifest")
    try:
        m = json.loads(p.read_text())
        command, cfg = m["subcommand"], dict(m["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{p}: not a run manifest ({exc})") from exc
    if command not in COMMANDS:
        raise DataError(f"{p}: unknown subcommand {command!r}")
    if out is not None:
        cfg["out"] = str(out)
    return execute(command, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    try:
        # overflow is reported as a NonFiniteError by the engine; numpy's own warning adds nothing
        with np.errstate(over="ignore", invalid="ignore"):
            if args.command == "replay":
                replay(args.manifest, args.out)
            else:
                execute(args.command, cfg)
    except UsageError as exc:
        print(f"dsalab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"dsalab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"dsalab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invalid option combinations surface from the config dataclasses
        print(f"dsalab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

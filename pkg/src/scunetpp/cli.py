"""``scunetpp`` command line: synth, train, eval, infer, gradcheck, params, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime or validation failure.
Any config field can be overridden with ``--section.key=value``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .model import VARIANTS, ModelConfig, ablate, build_model, load_checkpoint, param_count
from .trainer import TrainConfig, evaluate, format_ablation, predict, run_ablation, train

log = logging.getLogger("scunetpp")

SECTIONS = ("model", "train", "data")
DATA_DEFAULTS = {"center": 50.0, "width": 700.0, "seed": 0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(tokens: list[str]) -> dict:
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, raw = tok[2:].split("=", 1)
        section, field = key.split(".", 1)
        if section not in SECTIONS:
            raise UsageError(f"unknown config section {section!r} in {tok!r}")
        out[section][field] = _parse_value(raw)
    return out


def resolve_config(path: str | None, overrides: dict) -> dict:
    """Defaults < SCUNETPP_SEED < config file < command-line overrides."""
    resolved = {
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "data": dict(DATA_DEFAULTS),
    }
    env_seed = os.environ.get("SCUNETPP_SEED")
    if env_seed is not None:
        for s in SECTIONS:
            resolved[s]["seed"] = int(env_seed)
    if path:
        file_cfg = json.loads(Path(path).read_text())
        unknown = set(file_cfg) - set(SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        for s in SECTIONS:
            unknown = set(file_cfg.get(s, {})) - set(resolved[s])
            if unknown:
                raise UsageError(f"{path}: unknown {s} keys {sorted(unknown)}")
            resolved[s].update(file_cfg.get(s, {}))
    for s in SECTIONS:
        unknown = set(overrides.get(s, {})) - set(resolved[s])
        if unknown:
            raise UsageError(f"unknown {s} keys {sorted(unknown)}")
        resolved[s].update(overrides.get(s, {}))
    return resolved


def _configs(resolved: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        return ModelConfig.from_dict(resolved["model"]).validate(), TrainConfig.from_dict(resolved["train"]).validate()
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _write_resolved(run_dir: Path, resolved: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, overrides) -> None:
    resolved = resolve_config(args.config, overrides)
    seed = args.seed if args.seed is not None else resolved["data"]["seed"]
    params = D.PhantomParams(img_size=args.img_size)
    cases = D.write_dataset(args.out, args.cases, args.slices, seed, params,
                            center=resolved["data"]["center"], width=resolved["data"]["width"])
    n_test = sum(c.split == "test" for c in cases)
    print(f"wrote {len(cases)} cases ({len(cases) - n_test} train / {n_test} test) to {args.out}")


def cmd_train(args, overrides) -> None:
    resolved = resolve_config(args.config, overrides)
    mcfg, tcfg = _configs(resolved)
    run_dir = Path(args.out)
    _write_resolved(run_dir, resolved)
    train_set = D.load_split(args.data, "train")
    try:
        val_set = D.load_split(args.data, "test")
    except ValueError:
        val_set = None
    _, history = train(mcfg, tcfg, train_set, val_set, run_dir, resume=args.resume)
    last = history[-1]
    print(f"trained {last['epoch']} epochs; final loss {last['train_loss']:.5f}, val DSC {last['val_dsc']}")


def cmd_eval(args, overrides) -> None:
    model = load_checkpoint(args.ckpt)
    dataset = D.load_split(args.data, args.split)
    report = evaluate(model, dataset, hd_mode=args.hd_mode)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / f"report_{args.split}.csv")
    report.write_json(out / f"report_{args.split}.json")
    print(report.format())


def cmd_infer(args, overrides) -> None:
    model = load_checkpoint(args.ckpt)
    from . import io as tio

    image = tio.load_tsr(args.image)
    if image.ndim != 2:
        raise ValueError(f"{args.image}: expected a 2-D image")
    mask = predict(model, np.repeat(image[None, None], model.cfg.in_channels, axis=1))[0]
    tio.save_pgm(args.out, mask)
    print(f"wrote {args.out} ({int(mask.sum())} foreground pixels)")


def cmd_gradcheck(args, overrides) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.level, args.seeds)
    worst: dict[str, tuple[float, float]] = {}
    for r in results:
        prev = worst.get(r.name, (0.0, r.tol))
        worst[r.name] = (max(prev[0], r.rel_err), r.tol)
    for name, (err, tol) in worst.items():
        print(f"{'PASS' if err < tol else 'FAIL'} {name:28s} max rel err {err:.2e} (tol {tol:.0e})")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


def cmd_params(args, overrides) -> None:
    resolved = resolve_config(args.config, overrides)
    mcfg, _ = _configs(resolved)
    for variant in args.variant or VARIANTS:
        print(f"{variant:20s} {param_count(build_model(ablate(mcfg, variant))):>14,d}")


def cmd_ablate(args, overrides) -> None:
    resolved = resolve_config(args.config, overrides)
    mcfg, tcfg = _configs(resolved)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    run_dir = Path(args.out)
    _write_resolved(run_dir, resolved)
    rows = run_ablation(mcfg, tcfg, D.load_split(args.data, "train"), D.load_split(args.data, "test"),
                        args.variant or VARIANTS, run_dir)
    table = format_ablation(rows)
    (run_dir / "ablation.md").write_text(table + "\n")
    (run_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scunetpp", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=10)
    s.add_argument("--slices", type=int, default=8)
    s.add_argument("--seed", type=int)
    s.add_argument("--img-size", type=int, default=64)
    s.add_argument("--config")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--hd-mode", default="percentile", choices=["percentile", "paper_scaled"])
    s.add_argument("--out")

    s = sub.add_parser("infer", help="segment one TSR1 image into a PGM mask")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--level", default="full", choices=["ops", "layers", "full"])
    s.add_argument("--seeds", type=int)

    s = sub.add_parser("params", help="parameter counts of the ablation variants")
    s.add_argument("--config")
    s.add_argument("--variant", action="append", choices=VARIANTS)

    s = sub.add_parser("ablate", help="train and compare the ablation variants")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--variant", action="append", choices=VARIANTS)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "ablate": cmd_ablate,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
        overrides = parse_overrides(rest)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](args, overrides)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

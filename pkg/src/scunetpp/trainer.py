"""Loss, Adam, and the seeded training / evaluation loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as tio
from . import tensor as T
from .data import SegDataset
from .metrics import MetricReport, evaluate_set, logits_to_mask
from .model import VARIANTS, Model, ModelConfig, ablate, load_checkpoint, param_count, save_checkpoint
from .tensor import DimensionError, GradientStateError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 10
    stop_at_dsc: float | None = None
    hd_mode: str = "percentile"

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not math.isclose(self.ce_weight + self.dice_weight, 1.0):
            raise ValueError("ce_weight + dice_weight must equal 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def seg_loss(logits, mask: np.ndarray, ce_weight: float = 0.5, dice_weight: float = 0.5, smooth: float = 1.0) -> Tensor:
    """Weighted pixelwise cross-entropy plus (1 - soft Dice) on the foreground class.

    ``logits`` may be a ``(main, [aux, ...])`` pair from a deeply supervised
    model, in which case the loss is averaged over all heads.
    """
    if isinstance(logits, tuple):
        main, aux = logits
        heads = [main, *aux]
        total = seg_loss(heads[0], mask, ce_weight, dice_weight, smooth)
        for h in heads[1:]:
            total = total + seg_loss(h, mask, ce_weight, dice_weight, smooth)
        return total * (1.0 / len(heads))
    mask = np.asarray(mask, dtype=bool)
    b, k, h, w = logits.shape
    if k < 2 or mask.shape != (b, h, w):
        raise DimensionError(f"logits {logits.shape} do not match mask {mask.shape}")
    target = np.zeros((b, k, h, w))
    target[:, 0] = ~mask
    target[:, 1] = mask
    logp = T.log_softmax(logits, axis=1)
    ce = -(logp * target).sum(axis=1).mean()
    fg = logp[:, 1].exp()
    g = mask.astype(np.float64)
    dice = (2.0 * (fg * g).sum() + smooth) / (fg.sum() + (g.sum() + smooth))
    return ce * ce_weight + (1.0 - dice) * dice_weight


class Adam:
    """Bias-corrected Adam over a fixed, named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise GradientStateError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array([float(self.t)])}
        for k in self.params:
            state[f"m.{k}"] = self.m[k].copy()
            state[f"v.{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float64)


def adam_step(params: dict[str, Tensor], state: Adam) -> None:
    state.params = params
    state.step()


def evaluate(model: Model, dataset: SegDataset, batch_size: int = 8, hd_mode: str = "percentile") -> MetricReport:
    """Eval-mode forward, argmax masks, then DSC / HD95 per sample."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = []
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            out = model(Tensor(dataset.images[s : s + batch_size].astype(np.float64)), "eval")
            logits = out[0] if isinstance(out, tuple) else out
            preds.extend(logits_to_mask(logits.data))
    return evaluate_set(preds, list(dataset.masks), dataset.case_ids, hd_mode)


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    masks = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out = model(Tensor(np.asarray(images[s : s + batch_size], dtype=np.float64)), "eval")
            masks.append(logits_to_mask((out[0] if isinstance(out, tuple) else out).data))
    return np.concatenate(masks)


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")


def _save_state(out: Path, model: Model, opt: Adam, tcfg: TrainConfig, epoch: int, best: float | None) -> None:
    save_checkpoint(model, out / "last.ckp1")
    tio.save_ckp(out / "last.opt.ckp1", opt.state_dict())
    (out / "last.state.json").write_text(
        json.dumps({"epoch": epoch, "best_val_dsc": best, "train": tcfg.to_dict()}, indent=2, sort_keys=True) + "\n"
    )


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: SegDataset,
    val_set: SegDataset | None = None,
    out_dir=None,
    resume: bool = False,
) -> tuple[Model, list[dict]]:
    """Seeded mini-batch training; returns the model and per-epoch history.

    Batch order in epoch e is ``default_rng([seed, e]).permutation(N)``,
    so a run resumed from a checkpoint replays the same batches.
    """
    train_cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = Model(model_cfg)
    params = dict(model.named_parameters())
    opt = Adam(params, train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.eps)
    history: list[dict] = []
    start, best = 0, None
    if resume:
        if out is None:
            raise ValueError("resume needs out_dir")
        state = json.loads((out / "last.state.json").read_text())
        model.load_state_dict(load_checkpoint(out / "last.ckp1").state_dict())
        opt.load_state_dict(tio.load_ckp(out / "last.opt.ckp1"))
        start, best = state["epoch"], state["best_val_dsc"]
        with open(out / "history.jsonl") as fh:
            history = [json.loads(line) for line in fh][:start]

    n = len(train_set)
    bs = train_cfg.batch_size
    for epoch in range(start, train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            x = Tensor(train_set.images[idx].astype(np.float64))
            loss = seg_loss(model(x, "train"), train_set.masks[idx], train_cfg.ce_weight, train_cfg.dice_weight)
            model.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        row = {"epoch": epoch + 1, "train_loss": total / n, "val_dsc": None, "val_hd95": None}
        if val_set is not None and len(val_set):
            report = evaluate(model, val_set, hd_mode=train_cfg.hd_mode)
            row["val_dsc"], row["val_hd95"] = report.dsc_mean, report.hd95_mean
        history.append(row)
        log.info("epoch %d loss %.5f val_dsc %s", row["epoch"], row["train_loss"], row["val_dsc"])

        improved = row["val_dsc"] is not None and (best is None or row["val_dsc"] > best)
        if improved:
            best = row["val_dsc"]
        done = epoch + 1 == train_cfg.epochs or (
            train_cfg.stop_at_dsc is not None and row["val_dsc"] is not None and row["val_dsc"] >= train_cfg.stop_at_dsc
        )
        if out is not None:
            if improved:
                save_checkpoint(model, out / "best.ckp1")
            if done or (train_cfg.checkpoint_interval and (epoch + 1) % train_cfg.checkpoint_interval == 0):
                _save_state(out, model, opt, train_cfg, epoch + 1, best)
            _write_history(out / "history.jsonl", history)
        if done:
            break
    if out is not None and not (out / "best.ckp1").exists():
        save_checkpoint(model, out / "best.ckp1")
    return model, history


def run_ablation(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: SegDataset,
    test_set: SegDataset,
    variants: Sequence[str] = VARIANTS,
    out_dir=None,
) -> list[dict]:
    """Train every variant with identical settings and report test metrics."""
    rows = []
    for variant in variants:
        cfg = ablate(model_cfg, variant)
        vdir = Path(out_dir) / variant if out_dir is not None else None
        model, history = train(cfg, train_cfg, train_set, None, vdir)
        report = evaluate(model, test_set, hd_mode=train_cfg.hd_mode)
        rows.append({
            "variant": variant,
            "params": param_count(model),
            "final_train_loss": history[-1]["train_loss"],
            "test_dsc": report.dsc_mean,
            "test_dsc_std": report.dsc_std,
            "test_hd95": report.hd95_mean,
        })
    return rows


def format_ablation(rows: Sequence[dict]) -> str:
    lines = ["| variant | params | train loss | test DSC (%) | test HD95 |", "|---|---:|---:|---:|---:|"]
    for r in rows:
        hd = "n/a" if r["test_hd95"] is None else f"{r['test_hd95']:.2f}"
        lines.append(
            f"| {r['variant']} | {r['params']:,} | {r['final_train_loss']:.4f} | "
            f"{100 * r['test_dsc']:.2f} ± {100 * r['test_dsc_std']:.2f} | {hd} |"
        )
    return "\n".join(lines)

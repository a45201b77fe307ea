"""Fit the toy network to eight phantom slices and look at what it learned.

    python3 demos/overfit_phantom.py [--out runs/overfit]

Prints the loss curve as it goes, then draws one slice as text: ``#`` where
prediction and truth agree on embolus, ``+`` for false positives, ``-`` for
misses. Takes about a minute on one core.
"""
import argparse
import logging

import numpy as np
from threadpoolctl import threadpool_limits

from scunetpp import data as D
from scunetpp.model import ModelConfig, param_count
from scunetpp.trainer import TrainConfig, evaluate, predict, train


def draw(pred, truth, step=2):
    rows = []
    for r in range(0, pred.shape[0], step):
        line = ""
        for c in range(0, pred.shape[1], step):
            p, t = pred[r:r + step, c:c + step].any(), truth[r:r + step, c:c + step].any()
            line += "#" if p and t else "+" if p else "-" if t else "."
        rows.append(line)
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ModelConfig(img_size=64, base_dim=24, window=4, heads=(2, 4, 8, 8))
    data = D.phantom_dataset(D.PhantomParams(seed=3), 8)
    print(f"{len(data)} slices, embolus covers {100 * data.masks.mean():.2f}% of pixels")

    with threadpool_limits(limits=1):
        model, history = train(cfg, TrainConfig(lr=1e-3, epochs=300, stop_at_dsc=0.95), data, data, args.out)
        print(f"{param_count(model):,} parameters, stopped after {len(history)} epochs")
        for row in history[:: max(1, len(history) // 10)]:
            print(f"  epoch {row['epoch']:4d}  loss {row['train_loss']:.4f}  DSC {row['val_dsc']:.3f}")

        report = evaluate(model, data)
        print(f"train DSC {report.dsc_mean:.4f}, HD95 {report.hd95_mean:.2f} px")
        pred = predict(model, data.images[:1])[0]
    print(draw(pred, data.masks[0]))


if __name__ == "__main__":
    main()

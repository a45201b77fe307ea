"""Parameter budgets of the ablation variants, then a short comparison run.

    python3 demos/ablation.py [--epochs 10]

The first table is free: it only builds the models, at the toy size and at
224 px. The second trains each variant on the same phantom slices and
scores them on slices from a different case. Ten epochs is far too few to
rank the variants; it shows the pipeline, not a result.
"""
import argparse

from threadpoolctl import threadpool_limits

from scunetpp import data as D
from scunetpp.model import VARIANTS, ModelConfig, ablate, build_model, param_count
from scunetpp.trainer import TrainConfig, format_ablation, run_ablation

TOY = ModelConfig(img_size=64, base_dim=24, window=4, heads=(2, 4, 8, 8))
FULL_SIZE = ModelConfig(img_size=224, base_dim=96, window=7, heads=(3, 6, 12, 24))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()

    print(f"{'variant':<20}{'64 px':>14}{'224 px':>14}")
    for v in VARIANTS:
        small, large = (param_count(build_model(ablate(c, v))) for c in (TOY, FULL_SIZE))
        print(f"{v:<20}{small:>14,}{large:>14,}")

    train_set = D.phantom_dataset(D.PhantomParams(seed=3), 8)
    test_set = D.phantom_dataset(D.PhantomParams(seed=4), 4)
    with threadpool_limits(limits=1):
        rows = run_ablation(TOY, TrainConfig(lr=1e-3, epochs=args.epochs), train_set, test_set)
    print()
    print(format_ablation(rows))


if __name__ == "__main__":
    main()

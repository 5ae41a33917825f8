"""Synthetic version of the correction experiment: train 2D nets at E=1e4 and E=1e1, score the test split.

    python scripts/reproduce_table3.py [--epochs N] [--stride K] [--sigma S] [--no-gravity] [--out DIR]
"""
import argparse
import dataclasses
import time
from pathlib import Path

from softcorrect import correction as C
from softcorrect import experiment as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--stride", type=int, default=3, help="use every k-th training frame")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=0.5, help="depth noise, mm")
    p.add_argument("--no-gravity", action="store_true", help="no unmodelled sag in the truth replay")
    p.add_argument("--sequences", type=int, default=11)
    p.add_argument("--out", type=Path, default=Path("runs/table3"))
    a = p.parse_args()

    base = X.ExperimentSpec()
    spec = dataclasses.replace(
        base, noise_sigma=a.sigma, gravity=not a.no_gravity,
        dataset=dataclasses.replace(base.dataset, n_sequences=a.sequences),
        train=dataclasses.replace(base.train, epochs=a.epochs, frame_stride=a.stride, learning_rate=a.lr))
    t0 = time.time()
    ds = X.build_dataset(spec, log=print)
    res = X.train_and_evaluate(ds, spec, log=print)
    table = X.format_results(res)
    a.out.mkdir(parents=True, exist_ok=True)
    (a.out / "table3.txt").write_text(table)
    for E, tr in res.train_results.items():
        C.save_model(tr.model, a.out / f"model_2d_E{E:g}", sim_modulus=E, best_epoch=tr.best_epoch)
        C.write_loss_curve(a.out / f"model_2d_E{E:g}" / "loss_curve.csv", tr)
    print(table)
    for E in spec.sim_moduli:
        print(f"E={E:g}: mean improvement {res.improvement(E):.1f}%")
    print(f"total {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()

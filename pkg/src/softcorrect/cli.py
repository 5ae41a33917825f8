"""``softcorrect`` command line: gen, simulate, register, search, train, eval, verify.

Exit codes: 0 success, 1 user error (bad config, missing artifact), 2 internal error.
"""
from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from . import correction as corr
from .config import RunConfig, load_config
from .experiment import samples_for
from .errors import (ConfigurationError, DatasetError, GenerationError, MissingArtifactError, RegistrationError,
                     SearchError, TrainingError)
from .fem import run_replay, write_run
from .pointcloud import read_cloud
from .registration import IcpConfig, fit_rigid, icp_register, read_correspondences, write_transform
from .replay import FrameSchedule, read_trajectory, subsample_to_frames
from .search import SearchScene, e_label, run_search, write_report
from .synth import Dataset, directory_hash, load_dataset, make_dataset, write_dataset

USER_ERRORS = (ValueError, DatasetError, GenerationError, SearchError, RegistrationError, TrainingError,
               FileNotFoundError)


def _config(args) -> RunConfig:
    overrides = list(args.key or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(args.config, overrides)


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return Path(path)


def _dataset(args, cfg: RunConfig) -> Dataset:
    root = Path(args.dataset) if args.dataset else cfg.output_dir / "dataset"
    _require(root / "manifest.txt", "dataset manifest")
    return load_dataset(root, cfg.build_mesh())


def cmd_gen(args) -> int:
    cfg = _config(args)
    mesh = cfg.build_mesh()
    out = Path(args.out) if args.out else cfg.output_dir / "dataset"
    ds = make_dataset(mesh, cfg.truth, cfg.dataset, cfg.solver, cfg.probe, log=_log(args))
    write_dataset(ds, out, cfg.moduli)
    print(f"dataset written to {out} (manifest sha256 {directory_hash(out)[:16]})")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    E = args.modulus if args.modulus is not None else cfg.material.young_modulus
    if args.trajectory:
        mesh = cfg.build_mesh()
        traj = read_trajectory(_require(Path(args.trajectory), "trajectory"))
        frames = subsample_to_frames(traj, cfg.dataset.frame_rate)
        mat = cfg.material.__class__(E, cfg.material.poisson_ratio, cfg.material.density)
        run = run_replay(mesh, mat, cfg.solver, cfg.probe, traj, FrameSchedule(tuple(frames.times)))
        out = Path(args.out) if args.out else cfg.output_dir / f"sim_E{E:g}"
        write_run(run, out)
        print(f"{out}: {len(run.frame_ids)} frames" + (f", diverged at frame {run.diverged_at_frame}" if run.diverged else ""))
        return 0
    ds = _dataset(args, cfg)
    for s in ds.sequences:
        if args.sequence and s.name not in args.sequence:
            continue
        run = ds.simulate(s, ds.material(E))
        print(f"{s.name}: {len(run.frame_ids)} frames" + (" (diverged)" if run.diverged else ""))
    return 0


def cmd_register(args) -> int:
    if args.correspondences:
        src, dst = read_correspondences(_require(Path(args.correspondences), "correspondence file"))
        T = fit_rigid(src, dst)
        err = float(np.mean(np.linalg.norm(T.apply(src) - dst, axis=1)))
        print(f"mean residual {err:.6g} mm")
    else:
        if not (args.source and args.target):
            raise ConfigurationError("register needs --correspondences or both --source and --target")
        src = read_cloud(_require(Path(args.source), "source cloud"))
        dst = read_cloud(_require(Path(args.target), "target cloud"))
        res = icp_register(src, dst, IcpConfig(max_iterations=args.iterations, max_correspondence_dist=args.max_dist))
        T = res.transform
        print(f"ICP: {res.iterations} iterations, mean residual {res.mean_residual:.6g} mm")
    write_transform(args.out, T)
    return 0


def search_scene(ds: Dataset, cfg: RunConfig) -> SearchScene:
    train = ds.split("train")
    if cfg.search_sequence is None and not train:
        raise DatasetError("dataset has no training sequence; name one with search.sequence")
    name = cfg.search_sequence or train[0].name
    seq = ds.sequence(name)
    return SearchScene(ds.mesh, ds.truth.true_material, ds.solver, ds.probe, seq.trajectory, seq.schedule,
                       seq.registered_clouds())


def cmd_search(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out) if args.out else cfg.output_dir / "search"
    result = run_search(cfg.search, search_scene(ds, cfg), out / "cache")
    csv, txt = write_report(result, out)
    (out / "selected_E.txt").write_text(f"{result.selected:g}\n")
    print(txt.read_text(), end="")
    return 0


def _train_modulus(args, cfg: RunConfig) -> float:
    if args.modulus is not None:
        return float(args.modulus)
    if cfg.train_modulus is not None:
        return float(cfg.train_modulus)
    sel = cfg.output_dir / "search" / "selected_E.txt"
    if sel.is_file():
        return float(sel.read_text())
    return float(cfg.material.young_modulus)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    E = _train_modulus(args, cfg)
    dim = int(args.net[0])
    out = Path(args.out) if args.out else cfg.output_dir / f"model_{args.net}_E{E:g}"
    model = corr.build(cfg.unet(ds.mesh, dim), ds.mesh.vertices, seed=cfg.seed, zero_head=cfg.zero_head)
    res = corr.train(model, samples_for(ds, ds.split("train"), E), samples_for(ds, ds.split("val"), E), ds.mesh,
                     cfg.train, log=_log(args))
    corr.save_model(model, out, sim_modulus=E, best_epoch=res.best_epoch)
    corr.write_loss_curve(out / "loss_curve.csv", res)
    print(f"model written to {out} (best epoch {res.best_epoch}, val {min(res.val_loss):.4f} mm)")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    rows, labels = [], set()
    for mdir in args.model:
        meta = corr.read_model_meta(_require(Path(mdir), "model directory"))
        model = corr.load_model(mdir)
        E = float(meta.get("sim_modulus", cfg.material.young_modulus))
        net = f"{model.config.dimensionality}d"
        if (E, net) in labels:  # a second model of the same kind gets its own column
            net = f"{net}:{Path(mdir).name}"
        labels.add((E, net))
        for s in ds.split(args.split):
            sim_dir = ds.sim_dir(s, E)
            _require(sim_dir / "run_meta", f"simulated run for {s.name} at E={E:g}")
            base = ds.simulate(s, ds.material(E))
            r = corr.evaluate_rollout(model, ds.mesh, ds.material(E), ds.solver, ds.probe, s.trajectory, s.schedule,
                                      s.registered_clouds(), args.feedback, baseline=base)
            rows.append((E, s.name, net, r))
    out = Path(args.out) if args.out else cfg.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(rows, out, args.feedback)
    print((out / "eval_report.txt").read_text(), end="")
    return 0


def write_eval_report(rows, out: Path, feedback: str) -> None:
    with open(out / "eval_report.csv", "w") as fh:
        fh.write("E,sequence,net,feedback,uncorrected_mm,corrected_mm,improvement_pct,diverged_at_frame\n")
        for E, name, net, r in rows:
            div = "" if r.diverged_at_frame is None else str(r.diverged_at_frame)
            fh.write(f"{E:g},{name},{net},{feedback},{r.uncorrected_mean:.6f},{r.corrected_mean:.6f},"
                     f"{r.improvement_pct:.2f},{div}\n")
    (out / "eval_report.txt").write_text(format_eval_table(rows))


def format_eval_table(rows) -> str:
    """Rows per (E, sequence); columns no-network, then corrected / improvement per net."""
    nets = sorted({net for _, _, net, _ in rows})
    keys = []
    for E, name, _, _ in rows:
        if (E, name) not in keys:
            keys.append((E, name))
    header = ["E", "sequence", "No network"]
    for n in nets:
        header += [f"{n[:2].upper()}{n[2:]} network", "Improvement"]
    table = [header]
    for E, name in keys:
        res = {net: r for e, s, net, r in rows if (e, s) == (E, name)}
        first = next(iter(res.values()))
        line = [e_label(E), name, f"{first.uncorrected_mean:.4f}"]
        for n in nets:
            r = res.get(n)
            line += [f"{r.corrected_mean:.4f}", f"{r.improvement_pct:.1f}%"] if r else ["-", "-"]
        table.append(line)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(table[0]), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in table[1:]]) + "\n"


def cmd_verify(args) -> int:
    from .verify import run_checks

    ok = True
    for name, passed, detail in run_checks():
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


def _log(args):
    return None if getattr(args, "quiet", False) else (lambda msg: print(msg, flush=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softcorrect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.add_argument("--key", action="append", metavar="SECTION.NAME=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, help="global seed (same as --key run.seed=N)")
        sp.add_argument("--out", type=Path, help="output location")
        sp.add_argument("--quiet", action="store_true")
        if dataset:
            sp.add_argument("--dataset", type=Path, help="dataset directory (default <output_dir>/dataset)")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp, dataset=False)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("simulate", help="replay the FEM for dataset sequences or a trajectory file")
    common(sp)
    sp.add_argument("--modulus", type=float)
    sp.add_argument("--trajectory", type=Path)
    sp.add_argument("--sequence", action="append")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("register", help="rigid registration from correspondences or by ICP")
    sp.add_argument("--correspondences", type=Path)
    sp.add_argument("--source", type=Path)
    sp.add_argument("--target", type=Path)
    sp.add_argument("--iterations", type=int, default=50)
    sp.add_argument("--max-dist", type=float, default=10.0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("search", help="two-stage Young's modulus search")
    common(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("train", help="train a correction network")
    common(sp)
    sp.add_argument("--net", choices=("2d", "3d"), default="2d")
    sp.add_argument("--modulus", type=float, help="sim modulus (default: config, then search result)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate trained networks on a split")
    common(sp)
    sp.add_argument("--model", action="append", required=True, type=Path)
    sp.add_argument("--feedback", choices=("none", "top-layer"), default="none")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run the built-in oracle checks")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - report, do not crash the shell
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())

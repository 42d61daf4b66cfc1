"""Command-line entry point.

Sub-commands::

    reconattack phantom     --n-per-class 30 --seed 7 --out data/
    reconattack reconstruct data/frame_0000.rff --out img/ [--diff other.pgm]
    reconattack train       --manifest data/manifest.csv --out model/
    reconattack attack      data/frame_0000.rff --model model/model.json --out atk/
    reconattack evaluate    --manifest data/manifest.csv --model model/model.json --out eval/
    reconattack sweep       data/frame_0000.rff --model model/model.json --resolution 11 --out sweep/

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 frame already
misclassified at the initial parameters.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, grid_oracle, predicted_label, zoo_attack
from .classifier import ExternalModel, extract_features, fit_logistic, load_model, roc_auc
from .errors import ExternalModelError, InitiallyMisclassifiedError, InvalidInputError
from .formats import (abs_diff, atomic_write_text, read_manifest, read_pgm, read_rff,
                      write_pgm, write_png)
from .phantom import PhantomSpec, generate_dataset
from .rfcore import DEFAULT_OUT_SIZE, ReconParams, Reconstructor

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_MISCLASSIFIED = 4


class UsageError(Exception):
    pass


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _recon_params(args) -> ReconParams:
    try:
        return ReconParams(args.beta, args.alpha_l, args.alpha_u)
    except InvalidInputError as e:
        raise UsageError(f"--beta/--alpha-l/--alpha-u: {e}") from None


def _attack_config(args) -> AttackConfig:
    base = AttackConfig()
    return AttackConfig(
        deltas=(args.delta_beta, args.delta_alpha_l, args.delta_alpha_u),
        lrs=(args.lr_beta, args.lr_alpha_l, args.lr_alpha_u),
        bounds=base.bounds,
        cutoff=args.cutoff,
        max_iters=args.max_iters,
    )


def _load_scorer(args):
    if args.external_cmd and args.model:
        raise UsageError("pass either --model or --external-cmd, not both")
    if args.external_cmd:
        return ExternalModel(args.external_cmd), {}
    path = _require_file(args.model, "--model")
    model = load_model(path)
    return model, json.loads(path.read_text())


def _out_size(args, meta=None):
    if args.out_size is not None:
        h, w = args.out_size
    elif meta and "image_size" in meta:
        h, w = meta["image_size"]
    else:
        h, w = DEFAULT_OUT_SIZE
    if h < 8 or w < 8:
        raise UsageError("--out-size must be at least 8 8")
    return int(h), int(w)


def _frame_label(frame, args):
    label = args.label if args.label is not None else frame.label
    if label is None:
        raise UsageError("frame has no label; pass --label")
    return int(label)


# -- sub-commands -----------------------------------------------------------

def cmd_phantom(args):
    if args.n_per_class < 1:
        raise UsageError(f"--n-per-class must be >= 1, got {args.n_per_class}")
    try:
        spec = PhantomSpec(n_lines=args.n_lines, n_samples=args.n_samples,
                           noise_floor=args.noise_floor, seed=args.seed)
    except InvalidInputError as e:
        raise UsageError(str(e)) from None
    manifest, _ = generate_dataset(spec, args.n_per_class, args.out)
    print(manifest)
    return EXIT_OK


def cmd_reconstruct(args):
    params = _recon_params(args)
    frames = [_require_file(p, "frame") for p in args.frames]
    if args.manifest:
        frames += [e.path for e in read_manifest(_require_file(args.manifest, "--manifest"))]
    if not frames:
        raise UsageError("no input frames given")
    if args.diff and len(frames) != 1:
        raise UsageError("--diff needs exactly one input frame")
    other = read_pgm(_require_file(args.diff, "--diff")) if args.diff else None
    size = _out_size(args)
    out = Path(args.out)
    for path in frames:
        frame = read_rff(path)
        img = Reconstructor(frame, size)(params)
        target = out / f"{Path(path).stem}.pgm"
        write_pgm(target, img)
        if args.png:
            write_png(target.with_suffix(".png"), img)
        print(target)
        if other is not None:
            diff_path = out / f"{Path(path).stem}_diff.pgm"
            write_pgm(diff_path, abs_diff(img.pixels, other))
            print(diff_path)
    return EXIT_OK


def _stratified_split(labels, seed, train_frac=0.7):
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.asarray(labels)
    train, test = [], []
    for c in (0, 1):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        k = int(round(train_frac * idx.size))
        train += idx[:k].tolist()
        test += idx[k:].tolist()
    return sorted(train), sorted(test)


def cmd_train(args):
    params = _recon_params(args)
    entries = read_manifest(_require_file(args.manifest, "--manifest"))
    labels = [e.label for e in entries]
    if len(set(labels)) < 2:
        raise UsageError("--manifest: training needs frames of both classes")
    size = _out_size(args)
    X = np.array([extract_features(Reconstructor(read_rff(e.path), size)(params)).as_array()
                  for e in entries])
    y = np.array(labels, dtype=np.float64)
    train, test = _stratified_split(labels, args.seed)
    if min(np.sum(y[train] == 0), np.sum(y[train] == 1)) < 2:
        raise UsageError("--manifest: need at least 2 training frames per class")
    model = fit_logistic(X[train], y[train], args.epochs, args.lr)

    report = {"train_size": len(train), "test_size": len(test),
              "train_indices": train, "test_indices": test}
    if test and len(set(y[test])) == 2:
        p = model.predict_features(X[test])
        report["auc"] = roc_auc(y[test], p)
        report["accuracy"] = float(np.mean((p >= 0.5) == (y[test] == 1)))
    out = Path(args.out)
    doc = model.to_dict()
    doc["image_size"] = list(size)
    doc["recon_params"] = dict(zip(("beta", "alpha_l", "alpha_u"), params.as_tuple()))
    atomic_write_text(out / "model.json", _json_dump(doc))
    atomic_write_text(out / "train_report.json", _json_dump(report))
    print(f"model: {out / 'model.json'}")
    print(f"held-out AUC: {report.get('auc', float('nan')):.4f}  "
          f"accuracy: {report.get('accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_attack(args):
    model, meta = _load_scorer(args)
    frame = read_rff(_require_file(args.frame, "frame"))
    label = _frame_label(frame, args)
    init = _recon_params(args)
    config = _attack_config(args)
    size = _out_size(args, meta)
    result = zoo_attack(frame, label, init, config, model,
                        allow_misclassified=args.allow_misclassified, out_size=size)
    out = Path(args.out)
    atomic_write_text(out / "result.json", _json_dump(result.summary()))
    atomic_write_text(out / "trajectory.csv", result.trajectory_csv())
    recon = Reconstructor(frame, size)
    before = recon(result.initial_params)
    after = recon(result.final_params)
    write_pgm(out / "original.pgm", before)
    write_pgm(out / "adversarial.pgm", after)
    write_pgm(out / "diff.pgm", abs_diff(before.pixels, after.pixels))
    print(json.dumps(result.summary(), sort_keys=True))
    return EXIT_OK


EVAL_HEADER = ("path", "label", "prob", "pred", "correct", "attacked", "success", "reason",
               "iters", "model_queries", "verified", "final_beta", "final_alpha_l",
               "final_alpha_u")


def evaluate_entries(entries, model, init, config, size, jobs=1):
    """Score every frame, attack the correctly classified ones.

    Returns ``(rows, summary)``.
    """

    def one(entry):
        frame = read_rff(entry.path)
        recon = Reconstructor(frame, size)
        p = float(model.predict(recon(init)))
        pred = predicted_label(p, config.cutoff)
        row = {"path": Path(entry.path).as_posix(), "label": entry.label, "prob": p,
               "pred": pred, "correct": int(pred == entry.label), "attacked": 0,
               "success": 0, "reason": "", "iters": "", "model_queries": "",
               "verified": "", "final_beta": "", "final_alpha_l": "", "final_alpha_u": ""}
        if pred == entry.label:
            r = zoo_attack(frame, entry.label, init, config, model, out_size=size)
            fb, fl, fu = r.final_params.as_tuple()
            row.update(attacked=1, success=int(r.success), reason=r.reason, iters=r.iters,
                       model_queries=r.model_queries, verified=int(r.verified),
                       final_beta=fb, final_alpha_l=fl, final_alpha_u=fu)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, entries))
    else:
        rows = [one(e) for e in entries]

    y = np.array([r["label"] for r in rows])
    probs = np.array([r["prob"] for r in rows])
    n_correct = sum(r["correct"] for r in rows)
    n_success = sum(r["success"] for r in rows)
    rate = Fraction(n_success, n_correct) if n_correct else Fraction(0)
    summary = {
        "n_frames": len(rows),
        "auc": roc_auc(y, probs) if len(set(y.tolist())) == 2 else None,
        "accuracy": n_correct / len(rows) if rows else None,
        "n_correct": n_correct,
        "n_success": n_success,
        "n_verified": sum(1 for r in rows if r["verified"] == 1),
        "success_rate": float(rate),
        "success_fraction": f"{n_success}/{n_correct}",
    }
    return rows, summary


def cmd_evaluate(args):
    model, meta = _load_scorer(args)
    entries = read_manifest(_require_file(args.manifest, "--manifest"))
    if not entries:
        raise UsageError("--manifest lists no frames")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    init = _recon_params(args)
    config = _attack_config(args)
    size = _out_size(args, meta)
    rows, summary = evaluate_entries(entries, model, init, config, size, args.jobs)

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    out = Path(args.out)
    atomic_write_text(out / "evaluate.csv", buf.getvalue())
    atomic_write_text(out / "summary.json", _json_dump(summary))
    auc = summary["auc"]
    print(f"n_frames={summary['n_frames']} auc={'n/a' if auc is None else f'{auc:.4f}'} "
          f"accuracy={summary['accuracy']:.4f} n_correct={summary['n_correct']} "
          f"n_success={summary['n_success']} success_rate={summary['success_rate']:.4f} "
          f"({summary['success_fraction']})")
    return EXIT_OK


def cmd_sweep(args):
    model, meta = _load_scorer(args)
    frame = read_rff(_require_file(args.frame, "frame"))
    label = _frame_label(frame, args)
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    size = _out_size(args, meta)
    grid = grid_oracle(frame, label, AttackConfig().bounds, args.resolution, model,
                       args.cutoff, size)
    target = Path(args.out) / "sweep.csv"
    atomic_write_text(target, grid.to_csv())
    print(f"{target}: {len(grid.points)} points, {len(grid.misclassifying)} misclassifying")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _add_recon_flags(p):
    d = ReconParams()
    p.add_argument("--beta", type=float, default=d.beta,
                   help="attenuation coefficient, dB/(cm*MHz) (default %(default)s)")
    p.add_argument("--alpha-l", type=float, default=d.alpha_l,
                   help="lower compression threshold, dB (default %(default)s)")
    p.add_argument("--alpha-u", type=float, default=d.alpha_u,
                   help="upper compression threshold, dB (default %(default)s)")
    p.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"), default=None,
                   help="output image size (default 299 299, or the model's size)")


def _add_attack_flags(p):
    c = AttackConfig()
    p.add_argument("--delta-beta", type=float, default=c.deltas[0])
    p.add_argument("--delta-alpha-l", type=float, default=c.deltas[1])
    p.add_argument("--delta-alpha-u", type=float, default=c.deltas[2])
    p.add_argument("--lr-beta", type=float, default=c.lrs[0])
    p.add_argument("--lr-alpha-l", type=float, default=c.lrs[1])
    p.add_argument("--lr-alpha-u", type=float, default=c.lrs[2])
    p.add_argument("--max-iters", type=int, default=c.max_iters)
    p.add_argument("--cutoff", type=float, default=c.cutoff)


def _add_model_flags(p):
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--external-cmd", help="command scoring a PGM path, prints p on stdout")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="reconattack",
        description="B-mode reconstruction and zeroth-order attacks on its parameters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a labelled synthetic RF dataset")
    p.add_argument("--n-per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-lines", type=int, default=PhantomSpec.n_lines)
    p.add_argument("--n-samples", type=int, default=PhantomSpec.n_samples)
    p.add_argument("--noise-floor", type=float, default=PhantomSpec.noise_floor)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("reconstruct", help="reconstruct .rff frames to PGM")
    p.add_argument("frames", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--diff", help="also write |new - DIFF| as <stem>_diff.pgm")
    p.add_argument("--png", action="store_true", help="also export PNG (needs Pillow)")
    _add_recon_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the logistic surrogate model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed of the 70/30 split")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    _add_recon_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one frame")
    p.add_argument("frame")
    p.add_argument("--out", required=True)
    p.add_argument("--label", type=int, choices=(0, 1), default=None,
                   help="true label (default: the frame's own)")
    p.add_argument("--allow-misclassified", action="store_true")
    _add_model_flags(p)
    _add_recon_flags(p)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score a dataset and attack its correct cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)
    _add_recon_flags(p)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="exhaustive grid over the parameter box")
    p.add_argument("frame")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=11)
    p.add_argument("--cutoff", type=float, default=AttackConfig.cutoff)
    p.add_argument("--label", type=int, choices=(0, 1), default=None)
    _add_model_flags(p)
    p.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidInputError, ExternalModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except InitiallyMisclassifiedError as e:
        print(f"error: {e} (use --allow-misclassified to attack anyway)", file=sys.stderr)
        return EXIT_MISCLASSIFIED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Exit status is 0 only on success. `evaluate` and `gradcheck` print a JSON
document on stdout so scripts can consume results directly; other commands
print a short human line. FORESIGHT_THREADS caps worker threads everywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .errors import ForesightError, ParameterError
from .evaluation import evaluate_pipeline, fit_readout
from .features import FeatureSequence, fit_pca
from .inference import RolloutSchedule, rollout, sliding_window_forecast
from .model import init_weights, interpolate_positions
from .synthetic import SceneSpec, generate_corpus
from .training import gradient_check, run_training

HEAD_FILES = {"seg": "seg.head", "depth": "depth.head", "normals": "normals.head"}


def _int_pair(text: str, flag: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ParameterError(f"{flag} expects H,W, got {text!r}")
    return int(parts[0]), int(parts[1])


def _int_quad(text: str, flag: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ParameterError(f"{flag} expects crop_h,crop_w,stride_h,stride_w, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def cmd_pca_fit(args) -> int:
    seqs = fio.load_feature_dir(args.features)
    tokens = np.concatenate([f.tokens() for f in seqs], axis=0)
    if args.samples < tokens.shape[0]:
        rng = np.random.default_rng(args.seed)
        idx = rng.choice(tokens.shape[0], size=args.samples, replace=False)
        idx.sort()
        tokens = tokens[idx]
    model = fit_pca(tokens, args.dim)
    fio.save_pca(args.out, model)
    kept = float(model.explained_variance.sum())
    print(f"pca: {tokens.shape[0]} tokens, {model.c_in} -> {model.d_out} dims, "
          f"kept variance {kept:.6g}, wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = fio.load_run_config(args.config)
    corpus_path = rc.data.get("corpus")
    if not corpus_path:
        raise ParameterError("run config data.corpus is required")
    split = rc.data.get("split", "train")
    corpus = fio.load_feature_dir(corpus_path, split=split)
    phase2_corpus = None
    if rc.train.phase2 is not None:
        p2_path = rc.data.get("phase2_corpus")
        if not p2_path:
            raise ParameterError("phase2 is configured but data.phase2_corpus is missing")
        phase2_corpus = fio.load_feature_dir(p2_path, split=split)

    weights = init_weights(rc.model, seed=rc.train.seed)
    result = run_training(corpus, rc.train, weights, phase2_corpus=phase2_corpus)
    fio.save_checkpoint(args.out, result.weights, train_config=rc.train)
    curve_path = rc.data.get("curve")
    if curve_path:
        with open(curve_path, "w") as fh:
            fh.write("step,phase,lr,loss\n")
            for row in result.curve:
                fh.write(f"{row.step},{row.phase},{row.lr:.8g},{row.loss:.8g}\n")
    print(f"train: {len(result.curve)} steps, final loss {result.final_loss:.6g}, "
          f"wrote {args.out}")
    return 0


def cmd_forecast(args) -> int:
    ck = fio.load_checkpoint(args.ckpt)
    w = ck.weights
    context = fio.load_features(args.context)
    if args.interp_pos:
        h, wd = _int_pair(args.interp_pos, "--interp-pos")
        w = interpolate_positions(w, h, wd)
    if args.sliding:
        ch, cw, sh, sw = _int_quad(args.sliding, "--sliding")
        window = context
        frames, ids = [], []
        for _ in range(args.steps):
            pred = sliding_window_forecast(w, window, ch, cw, sh, sw)
            frames.append(pred.data[0])
            ids.append(pred.frame_ids[0])
            window = FeatureSequence(
                np.concatenate([window.data[1:], pred.data], axis=0),
                window.frame_ids[1:] + pred.frame_ids,
                dict(window.meta),
            )
        out = FeatureSequence(np.stack(frames), tuple(ids), dict(context.meta))
    else:
        out = rollout(w, context, args.steps)
    fio.save_features(args.out, out)
    print(f"forecast: {args.steps} step(s) -> frames {list(out.frame_ids)}, wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ck = fio.load_checkpoint(args.ckpt)
    corpus = fio.load_corpus(args.corpus)
    eval_items = corpus.split("eval")
    items = eval_items if eval_items else corpus.items
    schedule = RolloutSchedule.named(args.schedule)

    heads = {}
    for task, fname in HEAD_FILES.items():
        p = Path(args.heads) / fname
        if p.is_file():
            heads[task] = fio.load_head(p)
    if not heads:
        raise ParameterError(f"no head files ({', '.join(HEAD_FILES.values())}) in {args.heads}")

    reports = evaluate_pipeline(ck.weights, items, schedule, heads)
    doc = {
        "schedule": args.schedule,
        "context_ids": list(schedule.context_ids),
        "target_id": schedule.target_id,
        "steps": schedule.steps,
        "n_sequences": len(items),
        "metrics": {k: r.to_dict() for k, r in reports.items()},
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    rc = fio.load_run_config(args.config)
    report = gradient_check(
        rc.model, eps=args.eps, tol=args.tol, variant=rc.train.loss
    )
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0 if report.passed else 1


def cmd_gen_corpus(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as e:
        raise ParameterError(f"{args.spec}: invalid JSON: {e}") from None
    spec = SceneSpec.from_dict(raw)
    corpus = generate_corpus(spec, args.seed)
    fio.write_corpus(corpus, args.out)
    n_train = len(corpus.split("train"))
    n_eval = len(corpus.split("eval"))
    print(f"gen-corpus: {n_train} train + {n_eval} eval sequences of "
          f"{spec.n_frames} frames at {spec.grid_h}x{spec.grid_w}, wrote {args.out}")
    return 0


def cmd_heads_fit(args) -> int:
    feats = fio.load_corpus(args.features)
    split = "train" if feats.split("train") else None
    f_items = {it.name: it for it in feats.split(split)}
    if Path(args.targets).resolve() == Path(args.features).resolve():
        t_items = f_items
    else:
        targets = fio.load_corpus(args.targets)
        t_items = {it.name: it for it in targets.split(split)}
    common = sorted(set(f_items) & set(t_items))
    if not common:
        raise ParameterError("feature and target corpora share no sequence names")

    xs, ys = [], []
    for name in common:
        fi, ti = f_items[name], t_items[name]
        x = fi.features.tokens()
        if args.task == "seg":
            y = ti.labels.reshape(-1)
        elif args.task == "depth":
            y = ti.depth.reshape(-1)
        else:
            y = ti.normals.reshape(-1, 3)
        if x.shape[0] != y.shape[0]:
            raise ParameterError(f"{name}: {x.shape[0]} feature tokens vs {y.shape[0]} targets")
        xs.append(x)
        ys.append(y)
    head = fit_readout(
        np.concatenate(xs), np.concatenate(ys), args.task,
        l2_reg=args.l2,
        class_count=feats.class_count if args.task == "seg" else None,
        ignore_value=feats.ignore_value,
    )
    fio.save_head(args.out, head)
    print(f"heads-fit: {args.task} head on {sum(x.shape[0] for x in xs)} tokens, wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foresight", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pca-fit", help="fit a PCA codec on sampled feature tokens")
    s.add_argument("--features", required=True, help="feature file directory")
    s.add_argument("--dim", required=True, type=int, help="output dimensionality")
    s.add_argument("--samples", required=True, type=int, help="max tokens to fit on")
    s.add_argument("--seed", required=True, type=int, help="subsampling seed")
    s.add_argument("--out", required=True, help="output codec file")
    s.set_defaults(fn=cmd_pca_fit)

    s = sub.add_parser("train", help="train a forecaster from a run config")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--out", required=True, help="output checkpoint file")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("forecast", help="roll a trained model forward")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--context", required=True, help="context feature file")
    s.add_argument("--steps", required=True, type=int)
    s.add_argument("--sliding", help="crop_h,crop_w,stride_h,stride_w")
    s.add_argument("--interp-pos", dest="interp_pos", help="H,W new grid for position table")
    s.add_argument("--out", required=True, help="output feature file")
    s.set_defaults(fn=cmd_forecast)

    s = sub.add_parser("evaluate", help="score oracle/copy-last/prediction on a schedule")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--schedule", required=True, choices=["short", "mid", "long"])
    s.add_argument("--heads", required=True, help="directory holding *.head files")
    s.add_argument("--report", required=True, help="output JSON path")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    s.add_argument("--config", required=True, help="run config JSON (model section)")
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("gen-corpus", help="generate a synthetic moving-blob corpus")
    s.add_argument("--spec", required=True, help="scene spec JSON")
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_gen_corpus)

    s = sub.add_parser("heads-fit", help="fit a linear readout head on a corpus")
    s.add_argument("--features", required=True, help="corpus directory with features")
    s.add_argument("--targets", required=True, help="corpus directory with targets")
    s.add_argument("--task", required=True, choices=["seg", "depth", "normals"])
    s.add_argument("--l2", required=True, type=float, help="ridge strength")
    s.add_argument("--out", required=True, help="output head file")
    s.set_defaults(fn=cmd_heads_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ForesightError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: generate / train / infer / eval / gradcheck / report.

Exit codes: 0 on success, 1 with a diagnostic on any expected failure
(bad files, numeric faults, failed audits), 2 on usage errors.
WSAG_THREADS caps internal worker pools; 0 or unset runs single-threaded,
which is the deterministic mode the reproducibility guarantees assume.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .config import RunConfig, load_config, parse_config
from .errors import InvalidArgument, WsagError
from .evaluation import PairEval, evaluate_dataset, format_report
from .formats import (load_checkpoint, read_article, read_features, read_gt,
                      read_manifest, read_predictions, read_train_log,
                      write_lock, write_predictions)
from .geometry import Segment, build_map_index
from .gradcheck import audit_case, finite_difference_check
from .inference import (map_candidates, per_sentence_nms, rank_predictions,
                        structure_nms)
from .model import forward
from .synth import (GeneratorSpec, generate_task, oracle_score_maps,
                    write_dataset)
from .training import TrainingData, train


def _workers() -> int:
    raw = os.environ.get("WSAG_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _map_ordered(fn, items):
    """Apply fn preserving order, threading only when WSAG_THREADS > 1."""
    n = _workers()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# subcommands

def _cmd_generate(args) -> int:
    spec = GeneratorSpec(
        num_tasks=args.num_tasks, videos_per_task=args.videos_per_task,
        num_clips=args.num_clips, clip_dim=args.clip_dim,
        sent_dim=args.sent_dim, high_per_article=args.high_per_article,
        low_per_high=args.low_per_high, distractor_count=args.distractor_count,
        noise_sigma=args.noise_sigma,
        groundable_fraction=args.groundable_fraction, seed=args.seed)
    if spec.num_tasks < 2:
        raise InvalidArgument(f"need >= 2 tasks to split, got {spec.num_tasks}")
    n_train = int(0.8 * spec.num_tasks)
    # tasks are seeded independently, so parallel generation stays exact
    tasks = _map_ordered(lambda i: generate_task(spec, i), range(spec.num_tasks))
    write_dataset(tasks[:n_train], tasks[n_train:], args.out, spec)
    print(f"wrote {n_train} train and {spec.num_tasks - n_train} test tasks "
          f"to {args.out}")
    return 0


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if getattr(args, "manifest", None):
        cfg.train_manifest = args.manifest
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.train_manifest:
        print("error: no training manifest (set train_manifest in the config "
              "or pass --manifest)", file=sys.stderr)
        return 1
    if not cfg.out_dir:
        print("error: no output directory (set out_dir in the config or pass "
              "--out)", file=sys.stderr)
        return 1
    data = TrainingData.from_manifest(cfg.train_manifest)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_lock(os.path.join(cfg.out_dir, "run.lock"), cfg.to_dict())
    result = train(data, cfg, cfg.out_dir, resume=args.resume)
    print(f"trained {result.epochs_run} epochs; checkpoint at "
          f"{result.checkpoint_path}")
    return 0


def _score_pair_maps(cfg, params, feats, article, index, oracle: bool):
    if oracle:
        return oracle_score_maps(feats, article.embeddings(), index)
    dtype = np.float64 if cfg.precision == "double" else np.float32
    maps, _ = forward(params, feats, article.embeddings(), index, dtype=dtype)
    return maps


def _cmd_infer(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config("")
    if cfg.backend != "auto":
        kernels.set_backend(cfg.backend)
    params = None
    if not args.oracle:
        if not args.checkpoint:
            print("error: --checkpoint is required unless --oracle is given",
                  file=sys.stderr)
            return 1
        params = load_checkpoint(args.checkpoint).params
    man = read_manifest(args.manifest)
    articles = {a.task_id: read_article(man.article_path(a))
                for a in man.articles}
    all_preds = []
    for v in man.videos:
        feats = read_features(man.video_path(v),
                              expect_clips=v.num_clips).astype(np.float64)
        article = articles[v.task_id]
        index = build_map_index(v.num_clips, v.duration)
        maps = _score_pair_maps(cfg, params, feats, article, index, args.oracle)
        kept = [per_sentence_nms(map_candidates(m, index, v.video_id, s),
                                 cfg.nms_iou)
                for s, m in enumerate(maps)]
        ranked = rank_predictions(kept)
        if cfg.snms_enabled:
            ranked = structure_nms(ranked, cfg.snms_const,
                                   top_k=cfg.top_k or None,
                                   order_violation_only=cfg.order_violation_only)
        elif cfg.top_k:
            ranked = ranked[:cfg.top_k]
        all_preds.extend(ranked)
    write_predictions(args.out, all_preds)
    print(f"wrote {len(all_preds)} predictions for {len(man.videos)} videos "
          f"to {args.out}")
    return 0


def _parse_int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x]


def _parse_float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x]


def _cmd_eval(args) -> int:
    man = read_manifest(args.manifest)
    articles = {a.task_id: read_article(man.article_path(a))
                for a in man.articles}
    preds_by_video: dict[str, list] = {}
    for p in read_predictions(args.predictions):
        preds_by_video.setdefault(p.video_id, []).append(p)
    gt_by_video: dict[str, dict[int, list[Segment]]] = {}
    for vid, sidx, seg in read_gt(args.gt):
        gt_by_video.setdefault(vid, {}).setdefault(sidx, []).append(seg)
    pairs = []
    for v in man.videos:
        pairs.append(PairEval(
            video_id=v.video_id, task_id=v.task_id,
            ranked=preds_by_video.get(v.video_id, []),
            gt=gt_by_video.get(v.video_id, {}),
            hierarchy=articles[v.task_id].hierarchy()))
    report = evaluate_dataset(pairs, ks=_parse_int_list(args.ks),
                              iou_thrs=_parse_float_list(args.ious))
    text = format_report(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def _cmd_gradcheck(args) -> int:
    params, clips, sentences, index, loss = audit_case(
        args.seed, num_clips=args.num_clips, d_v=args.d_v, d_s=args.d_s,
        d_h=args.d_h, n_sentences=args.sentences)
    _, report = finite_difference_check(params, clips, sentences, index,
                                        loss_fn=loss, epsilon=args.epsilon,
                                        return_report=True)
    print(f"max relative error: {report.max_rel_err:.3e} "
          f"(field {report.worst_field})")
    if report.kink_params:
        print(f"excluded {report.kink_params} parameters whose finite "
              f"difference straddles a ReLU kink "
              f"(their max: {report.max_rel_err_crossed:.3e})")
    ok = report.max_rel_err < 1e-4
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_report(args) -> int:
    records = read_train_log(args.log)
    if not records:
        print("error: empty training log", file=sys.stderr)
        return 1
    by_epoch: dict[int, list[dict]] = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r)
    lines = [f"{'epoch':>6} {'phase':<8} {'steps':>6} {'L_MIL':>12} "
             f"{'L_CS':>12} {'total':>12}"]
    for epoch in sorted(by_epoch):
        rs = by_epoch[epoch]
        n = len(rs)
        lines.append(f"{epoch:>6} {rs[0]['phase']:<8} {n:>6} "
                     f"{sum(r['mil'] for r in rs) / n:>12.6f} "
                     f"{sum(r['cs'] for r in rs) / n:>12.6f} "
                     f"{sum(r['total'] for r in rs) / n:>12.6f}")
    first, last = records[0], records[-1]
    lines.append(f"L_MIL first -> last: {first['mil']:.6f} -> {last['mil']:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="wsag",
        description="Weakly supervised temporal article grounding toolkit.")
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--num-tasks", type=int, default=20)
    g.add_argument("--videos-per-task", type=int, default=5)
    g.add_argument("--num-clips", type=int, default=16)
    g.add_argument("--clip-dim", type=int, default=32)
    g.add_argument("--sent-dim", type=int, default=32)
    g.add_argument("--high-per-article", type=int, default=6)
    g.add_argument("--low-per-high", type=int, default=2)
    g.add_argument("--distractor-count", type=int, default=4)
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--groundable-fraction", type=float, default=0.75)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train a grounding model")
    t.add_argument("--config", help="key=value configuration file")
    t.add_argument("--manifest", help="training manifest (overrides config)")
    t.add_argument("--out", help="run output directory (overrides config)")
    t.add_argument("--resume", action="store_true",
                   help="continue from the run directory's checkpoint")
    t.set_defaults(fn=_cmd_train)

    i = sub.add_parser("infer", help="score videos and write ranked predictions")
    i.add_argument("--manifest", required=True)
    i.add_argument("--out", required=True, help="prediction file to write")
    i.add_argument("--checkpoint", help="model checkpoint")
    i.add_argument("--config", help="key=value configuration file")
    i.add_argument("--oracle", action="store_true",
                   help="score by cosine to sentence embeddings instead of a model")
    i.set_defaults(fn=_cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--ks", default="1,5,10", help="comma-separated K values")
    e.add_argument("--ious", default="0.1,0.3,0.5",
                   help="comma-separated IoU thresholds")
    e.add_argument("--out", help="also write the report to this file")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference audit of gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--num-clips", type=int, default=8)
    c.add_argument("--d-v", type=int, default=16)
    c.add_argument("--d-s", type=int, default=16)
    c.add_argument("--d-h", type=int, default=32)
    c.add_argument("--sentences", type=int, default=3)
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.set_defaults(fn=_cmd_gradcheck)

    r = sub.add_parser("report", help="summarize a training log")
    r.add_argument("--log", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=_cmd_report)
    return top


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except WsagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

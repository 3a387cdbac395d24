"""Command-line entry point: one subcommand per pipeline stage.

Stage commands (``queries``, ``annotate``, ``filter``, ``mosaic``, ``sim run
--out``) write shards and print a RunReport JSON object on stdout. Table
commands (``eval``, ``lr-curve``, ``tokens stats``, ``sim run``) print CSV on
stdout and the RunReport on stderr. ``--report FILE`` also saves the report.

Exit codes: 0 success, 1 data error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import shlex
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import store
from .annotate import (
    DEFAULT_TEMPLATES,
    AnnotatorError,
    ExternalAnnotator,
    MockAnnotator,
    MockNoise,
    TemplateSet,
    annotate_candidates,
    filter_annotations,
    sample_pseudo_negatives,
)
from .evaluation import (
    Bucket,
    Detection,
    EvalTask,
    GroundTruth,
    evaluate,
    read_detections_jsonl,
    read_ground_truth_jsonl,
)
from .label_space import CuratedVocabulary, curated_queries, extract_ngrams, merge_curated, rescale_curated_scores
from .mosaic import mosaic_stream
from .schedule import ScheduleConfig, load_checkpoint, lr_at, save_checkpoint, weight_average
from .sim import SWEEP_HEADER, generate_scenes, run_threshold_sweep, scene_buckets
from .store import Stage, StoreError
from .tokens import drop_mask, patch_variances
from .types import AnnotatedImage, PipelineConfig, PseudoAnnotation, derive_rng

EXIT_DATA = 1
EXIT_USAGE = 2
BUCKETS_FILE = "buckets.json"


class UsageError(Exception):
    pass


# -- config flags -------------------------------------------------------------

_SHORT_ALIASES = {
    "keep_threshold": ["--keep"],
    "image_gate_threshold": ["--gate"],
    "grid_sizes_selftrain": ["--grids"],
    "rng_seed": ["--seed"],
}


def _parse_list(kind: type) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(kind(x) for x in text.split(",") if x.strip())

    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline config (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON file with PipelineConfig fields")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(PipelineConfig(), f.name)
        if isinstance(default, tuple):
            kind = float if default and isinstance(default[0], float) else int
            conv: Callable = _parse_list(kind)
        else:
            conv = type(default)
        g.add_argument(flag, *_SHORT_ALIASES.get(f.name, []), dest=f"cfg_{f.name}", type=conv, default=None,
                       metavar=f.name.upper(), help=f"default: {default}")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base: dict[str, Any] = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        base = json.loads(args.config.read_text(encoding="utf-8"))
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            base[f.name] = v
    try:
        return PipelineConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- reporting ----------------------------------------------------------------


def _report(
    args: argparse.Namespace,
    *,
    stage: str,
    cfg: PipelineConfig,
    params: dict,
    inputs: Sequence[Path] = (),
    output: Path | None = None,
    records_in: int = 0,
    records_out: int = 0,
    started: float,
    to_stderr: bool = False,
    **extra: Any,
) -> dict:
    report = {
        "command": args.command_name,
        "stage": stage,
        "input_manifests": [str(p) for p in inputs],
        "output_manifest": str(output) if output else None,
        "records_in": records_in,
        "records_out": records_out,
        "retention": (records_out / records_in) if records_in else None,
        "wall_time_s": round(time.perf_counter() - started, 6),
        "config_hash": cfg.config_hash({"command": args.command_name, **params}),
        **extra,
    }
    text = json.dumps(report, sort_keys=True)
    print(text, file=sys.stderr if to_stderr else sys.stdout)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return report


def _manifest_path(data: Path, stage: Stage) -> Path:
    return store.stage_dir(data, stage) / store.MANIFEST


def _require_stage(data: Path, stage: Stage) -> store.Manifest:
    if not _manifest_path(data, stage).exists():
        raise UsageError(f"{data}: no {stage.value} stage (missing {_manifest_path(data, stage)})")
    return store.read_manifest(data, stage)


def _map_shards(fn: Callable, arg_lists: list[tuple], jobs: int) -> list:
    """Run ``fn`` once per shard; output never depends on ``jobs``."""
    if jobs <= 1 or len(arg_lists) <= 1:
        return [fn(*a) for a in arg_lists]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arg_lists))) as ex:
        return list(ex.map(fn, *zip(*arg_lists)))


def _read_lines(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# -- vocab ----------------------------------------------------------------------


def cmd_vocab_merge(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    lists = []
    for path in args.files:
        if not path.exists():
            raise UsageError(f"class list not found: {path}")
        lists.append(_read_lines(path))
    vocab = merge_curated(lists)
    args.output.write_text("".join(c + "\n" for c in vocab.classes), encoding="utf-8")
    _report(args, stage="vocab", cfg=cfg, params={}, records_in=sum(map(len, lists)),
            records_out=len(vocab), started=started, output_file=str(args.output))
    return 0


# -- queries ----------------------------------------------------------------------


def _queries_shard(data: Path, index: int, cfg: PipelineConfig, source: str, vocab: CuratedVocabulary | None,
                   order: str, negatives: int) -> dict:
    manifest = store.read_manifest(data, Stage.RAW)
    qsets = []
    for img in store.read_stage_shard(data, Stage.RAW, index, manifest):
        if source == "curated":
            qsets.append(curated_queries(vocab, img.id))
        else:
            qsets.append(extract_ngrams(img.alt_text, cfg, image_id=img.id, order=order))
    if negatives:
        owners: dict[str, set[str]] = {}
        for qs in qsets:
            for q in qs.queries:
                owners.setdefault(q, set()).add(qs.image_id)
        pool = list(owners)
        out = []
        for qs in qsets:
            # Strings that occur only in this image's own query set are excluded as well.
            others = [q for q in pool if owners[q] != {qs.image_id}]
            neg = sample_pseudo_negatives(qs.queries, others, negatives, derive_rng(cfg.rng_seed, "negatives", qs.image_id))
            out.append(dataclasses.replace(qs, negatives=neg.queries))
        qsets = out
    with store.ShardWriter(store.shard_path(data, Stage.QUERIED, index), store.RecordType.QUERIES) as w:
        for qs in qsets:
            w.write(qs)
        return w.close()


def cmd_queries_ngram(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    if args.caption is not None:
        qs = extract_ngrams(args.caption, cfg, order=args.order)
        print(json.dumps(list(qs.queries)))
        return 0
    if args.data is None:
        raise UsageError("queries ngram needs --data or --caption")
    raw = _require_stage(args.data, Stage.RAW)
    vocab = None
    if args.source == "curated":
        if args.vocab is None or not args.vocab.exists():
            raise UsageError("--source curated needs an existing --vocab file")
        vocab = merge_curated([_read_lines(args.vocab)])
    params = {"source": args.source, "order": args.order, "negatives": args.negatives}
    shards = _map_shards(
        _queries_shard,
        [(args.data, i, cfg, args.source, vocab, args.order, args.negatives) for i in range(raw.shard_count)],
        args.jobs,
    )
    m = store.write_manifest(args.data, Stage.QUERIED, shards, cfg, params)
    _report(args, stage=Stage.QUERIED.value, cfg=cfg, params=params, inputs=[_manifest_path(args.data, Stage.RAW)],
            output=_manifest_path(args.data, Stage.QUERIED), records_in=raw.record_count,
            records_out=m.record_count, started=started)
    return 0


# -- annotate -------------------------------------------------------------------


def _annotate_shard(data: Path, index: int, cfg: PipelineConfig, kind: str, noise: MockNoise,
                    extern_cmd: list[str] | None, templates: tuple[str, ...]) -> dict:
    raw_m = store.read_manifest(data, Stage.RAW)
    q_m = store.read_manifest(data, Stage.QUERIED)
    ts = TemplateSet(templates)
    gt: dict[str, AnnotatedImage] = {}
    if kind == "mock":
        gt = {a.image_id: a for a in store.read_stage_shard(data, Stage.GT, index)}
    extern = ExternalAnnotator(extern_cmd) if kind == "extern" else None
    try:
        with store.ShardWriter(store.shard_path(data, Stage.ANNOTATED, index), store.RecordType.ANNOTATIONS) as w:
            images = store.read_stage_shard(data, Stage.RAW, index, raw_m)
            queries = store.read_stage_shard(data, Stage.QUERIED, index, q_m)
            for img, qs in zip(images, queries, strict=True):
                if img.id != qs.image_id:
                    raise StoreError(f"shard {index}: raw record {img.id!r} paired with queries for {qs.image_id!r}")
                if extern is not None:
                    annotator = extern
                else:
                    if img.id not in gt:
                        raise StoreError(f"shard {index}: no ground truth for {img.id!r} (mock annotator)")
                    g = [(a.label, a.box) for a in gt[img.id].annotations]
                    annotator = MockAnnotator(g, noise, ts, cfg.rng_seed)
                w.write(AnnotatedImage(img.id, tuple(annotate_candidates(img, qs, annotator, ts))))
            return w.close()
    finally:
        if extern is not None:
            extern.close()


def cmd_annotate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    raw = _require_stage(args.data, Stage.RAW)
    q = _require_stage(args.data, Stage.QUERIED)
    if q.shard_count != raw.shard_count:
        raise StoreError("raw and queried stages have different shard counts")
    templates = DEFAULT_TEMPLATES
    if args.templates is not None:
        if not args.templates.exists():
            raise UsageError(f"templates file not found: {args.templates}")
        templates = tuple(_read_lines(args.templates))
    try:
        TemplateSet.for_config(cfg, templates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    noise = MockNoise(args.box_sigma, args.score_noise, args.distractors)
    extern_cmd = None
    if args.annotator == "mock":
        _require_stage(args.data, Stage.GT)
    else:
        if not args.extern_cmd:
            raise UsageError("--annotator extern needs --extern-cmd")
        extern_cmd = shlex.split(args.extern_cmd)
    params = {"annotator": args.annotator, "templates": list(templates)}
    params.update({"noise": noise.to_dict()} if args.annotator == "mock" else {"extern_cmd": extern_cmd})
    shards = _map_shards(
        _annotate_shard,
        [(args.data, i, cfg, args.annotator, noise, extern_cmd, templates) for i in range(raw.shard_count)],
        args.jobs,
    )
    m = store.write_manifest(args.data, Stage.ANNOTATED, shards, cfg, params)
    _report(args, stage=Stage.ANNOTATED.value, cfg=cfg, params=params,
            inputs=[_manifest_path(args.data, Stage.RAW), _manifest_path(args.data, Stage.QUERIED)],
            output=_manifest_path(args.data, Stage.ANNOTATED), records_in=raw.record_count,
            records_out=m.record_count, started=started)
    return 0


# -- filter ---------------------------------------------------------------------


def _filter_shard(data: Path, index: int, cfg: PipelineConfig) -> tuple[dict, int, int]:
    kept_images = kept_annos = 0
    with store.ShardWriter(store.shard_path(data, Stage.FILTERED, index), store.RecordType.ANNOTATIONS) as w:
        for a in store.read_stage_shard(data, Stage.ANNOTATED, index):
            annos = rescale_curated_scores(a.annotations, cfg.curated_rescale_factor)
            d = filter_annotations(annos, cfg)
            if d.image_retained:
                w.write(AnnotatedImage(a.image_id, d.kept))
                kept_images += 1
                kept_annos += len(d.kept)
        return w.close(), kept_images, kept_annos


def cmd_filter(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    src = _require_stage(args.data, Stage.ANNOTATED)
    results = _map_shards(_filter_shard, [(args.data, i, cfg) for i in range(src.shard_count)], args.jobs)
    params = {"keep_threshold": cfg.keep_threshold, "image_gate_threshold": cfg.image_gate_threshold}
    m = store.write_manifest(args.data, Stage.FILTERED, [r[0] for r in results], cfg, params)
    _report(args, stage=Stage.FILTERED.value, cfg=cfg, params=params,
            inputs=[_manifest_path(args.data, Stage.ANNOTATED)], output=_manifest_path(args.data, Stage.FILTERED),
            records_in=src.record_count, records_out=m.record_count, started=started,
            annotations_kept=sum(r[2] for r in results))
    return 0


# -- mosaic ---------------------------------------------------------------------


def _mosaic_shard(data: Path, index: int, cfg: PipelineConfig, finetune: bool) -> tuple[dict, list[int], int]:
    filtered = {a.image_id: a for a in store.read_stage_shard(data, Stage.FILTERED, index)}
    images = [im for im in store.read_stage_shard(data, Stage.RAW, index) if im.id in filtered]
    rng = derive_rng(cfg.rng_seed, "mosaic", index)
    grids, used = [], 0
    with store.ShardWriter(store.shard_path(data, Stage.MOSAIC, index), store.RecordType.MOSAIC) as w:
        for ex in mosaic_stream(images, filtered, cfg, rng, finetune=finetune, id_prefix=f"mosaic-{index:05d}"):
            w.write(ex)
            grids.append(ex.grid)
            used += len(ex.layout)
        return w.close(), grids, used


def cmd_mosaic(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    raw = _require_stage(args.data, Stage.RAW)
    src = _require_stage(args.data, Stage.FILTERED)
    if raw.shard_count != src.shard_count:
        raise StoreError("raw and filtered stages have different shard counts")
    results = _map_shards(_mosaic_shard, [(args.data, i, cfg, args.finetune) for i in range(src.shard_count)], args.jobs)
    grids = [g for r in results for g in r[1]]
    params = {"finetune": args.finetune}
    m = store.write_manifest(args.data, Stage.MOSAIC, [r[0] for r in results], cfg, params)
    _report(args, stage=Stage.MOSAIC.value, cfg=cfg, params=params,
            inputs=[_manifest_path(args.data, Stage.RAW), _manifest_path(args.data, Stage.FILTERED)],
            output=_manifest_path(args.data, Stage.MOSAIC), records_in=src.record_count,
            records_out=m.record_count, started=started,
            mean_tiles_per_example=(float(np.mean([g * g for g in grids])) if grids else None),
            mean_images_per_example=(sum(r[2] for r in results) / len(grids) if grids else None),
            grid_counts={str(k): v for k, v in sorted(Counter(grids).items())})
    return 0


# -- tokens ---------------------------------------------------------------------


def cmd_tokens_stats(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    stage = Stage(args.stage)
    m = _require_stage(args.data, stage)
    rows = []
    for rec in store.read_stage(args.data, stage):
        pixels = rec.composite if stage is Stage.MOSAIC else rec.pixels
        rng = derive_rng(cfg.rng_seed, "tokens", rec.id)
        grid = patch_variances(pixels, cfg.patch_px, cfg.noise_max, rng)
        keep = drop_mask(grid, cfg.drop_rate).keep
        if stage is Stage.MOSAIC:
            pad = rec.padding_mask
            p = cfg.patch_px
            h, w = pad.shape
            padded = np.ones((grid.rows * p, grid.cols * p), dtype=bool)
            padded[:h, :w] = pad
            is_pad = padded.reshape(grid.rows, p, grid.cols, p).all(axis=(1, 3))
        else:
            is_pad = np.zeros_like(keep)
        n_content = int((~is_pad).sum())
        rows.append((
            rec.id, keep.size, int(keep.sum()), keep.sum() / keep.size, int(is_pad.sum()),
            int((is_pad & ~keep).sum()), (int((keep & ~is_pad).sum()) / n_content) if n_content else math.nan,
        ))
    if args.bins:
        vals = np.array([r[6] for r in rows if not math.isnan(r[6])])
        counts, edges = np.histogram(vals, bins=args.bins, range=(0.0, 1.0))
        print("bin_lo,bin_hi,count")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            print(f"{lo:.4f},{hi:.4f},{c}")
    else:
        print("id,patches,kept,kept_fraction,padding_patches,padding_dropped,content_kept_fraction")
        for r in rows:
            print(f"{r[0]},{r[1]},{r[2]},{r[3]:.6f},{r[4]},{r[5]},{r[6]:.6f}")
    _report(args, stage="tokens", cfg=cfg, params={"stage": stage.value}, inputs=[_manifest_path(args.data, stage)],
            records_in=m.record_count, records_out=len(rows), started=started, to_stderr=True)
    return 0


# -- eval -----------------------------------------------------------------------


def _load_gt(path: Path) -> tuple[list[GroundTruth], dict[str, Bucket]]:
    if not path.exists():
        raise UsageError(f"ground truth not found: {path}")
    buckets: dict[str, Bucket] = {}
    if path.is_dir():
        gts = [GroundTruth(a.image_id, p.label, p.box) for a in store.read_stage(path, Stage.GT) for p in a.annotations]
        if (path / BUCKETS_FILE).exists():
            buckets = {c: Bucket(b) for c, b in json.loads((path / BUCKETS_FILE).read_text()).items()}
        return gts, buckets
    return read_ground_truth_jsonl(path), buckets


def _load_predictions(path: Path, stage: Stage) -> list[Detection]:
    if not path.exists():
        raise UsageError(f"predictions not found: {path}")
    if path.is_dir():
        return [Detection(a.image_id, p.label, p.box, p.score) for a in store.read_stage(path, stage) for p in a.annotations]
    return read_detections_jsonl(path)


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    gts, buckets = _load_gt(args.gt)
    if args.buckets is not None:
        if not args.buckets.exists():
            raise UsageError(f"buckets file not found: {args.buckets}")
        buckets = {c: Bucket(b) for c, b in json.loads(args.buckets.read_text()).items()}
    dets = _load_predictions(args.pred, Stage(args.pred_stage))
    task = EvalTask(gts, dets, buckets, allow_unknown_classes=args.allow_unknown_classes)
    caps = {"max_dets_per_image": args.max_dets_per_image} if args.variant == "old" else {"max_dets_per_class": args.max_dets_per_class}
    res = evaluate(task, args.variant, **caps)
    print("bucket,ap")
    for name, v in res.to_rows():
        print(f"{name},{v:.6f}")
    if args.per_class:
        for c, v in res.per_class_ap.items():
            print(f"class:{c},{v:.6f}")
    _report(args, stage="eval", cfg=cfg, params={"variant": args.variant, **caps}, records_in=len(dets),
            records_out=len(res.per_class_ap), started=started, to_stderr=True, ap_all=res.ap_all)
    return 0


# -- ensemble / lr-curve ----------------------------------------------------------


def cmd_ensemble(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    for p in (args.ckpt_a, args.ckpt_b):
        if not p.exists():
            raise UsageError(f"checkpoint not found: {p}")
    if not (0.0 <= args.alpha <= 1.0):
        raise UsageError("--alpha must be in [0, 1]")
    out = weight_average(load_checkpoint(args.ckpt_a), load_checkpoint(args.ckpt_b), args.alpha)
    save_checkpoint(out, args.output)
    _report(args, stage="ensemble", cfg=cfg, params={"alpha": args.alpha}, records_in=2 * len(out.params),
            records_out=len(out.params), started=started, output_file=str(args.output))
    return 0


def cmd_lr_curve(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    try:
        sched = ScheduleConfig(args.peak_lr, args.timescale or cfg.lr_timescale, args.cooldown_start, args.cooldown_steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("step,lr")
    steps = range(0, args.steps + 1, args.every)
    for t in steps:
        print(f"{t},{lr_at(t, sched):.10g}")
    _report(args, stage="lr-curve", cfg=cfg, params=dataclasses.asdict(sched), records_out=len(steps),
            started=started, to_stderr=True)
    return 0


# -- sim ------------------------------------------------------------------------


def cmd_sim_run(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    cfg = _config_from_args(args)
    scenes = generate_scenes(args.scenes, cfg.rng_seed, args.size)
    params: dict[str, Any] = {"scenes": args.scenes, "size": args.size}
    if args.out is not None:
        store.write_stage(args.out, Stage.RAW, (s.image for s in scenes), args.shards, cfg, params)
        gt = (
            AnnotatedImage(s.id, tuple(PseudoAnnotation(b, label, 1.0) for label, b in s.gt))
            for s in scenes
        )
        store.write_stage(args.out, Stage.GT, gt, args.shards, cfg, params)
        buckets = {c: b.value for c, b in sorted(scene_buckets(scenes).items())}
        (args.out / BUCKETS_FILE).write_text(json.dumps(buckets, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    noise = MockNoise(args.box_sigma, args.score_noise, args.distractors)
    rows = run_threshold_sweep(scenes, args.gates, noise, keep_threshold=args.sweep_keep, cfg=cfg, seed=cfg.rng_seed)
    print(SWEEP_HEADER)
    for r in rows:
        print(r.as_csv())
    params.update(noise=noise.to_dict(), gates=list(args.gates), sweep_keep=args.sweep_keep)
    _report(args, stage="sim", cfg=cfg, params=params,
            output=(store.stage_dir(args.out, Stage.RAW) / store.MANIFEST) if args.out else None,
            records_out=len(scenes), started=started, to_stderr=True)
    return 0


# -- stats ----------------------------------------------------------------------


def cmd_stats(args: argparse.Namespace) -> int:
    if not args.data.is_dir():
        raise UsageError(f"not a dataset directory: {args.data}")
    out = {"dataset": args.data.name, "stages": {}}
    for stage in Stage:
        if _manifest_path(args.data, stage).exists():
            m = store.read_manifest(args.data, stage)
            out["stages"][stage.value] = {
                "records": m.record_count,
                "shards": m.shard_count,
                "config_hash": m.config_hash,
                "params": m.params,
            }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owlst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(parent, name: str, fn: Callable, help: str, *, data: bool = True, jobs: bool = False):
        p = parent.add_parser(name, help=help, description=help)
        p.set_defaults(func=fn, command_name=name if parent is sub else f"{p.prog.split()[-2]} {name}")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes (output is independent of this)")
        p.add_argument("--report", type=Path, help="also write the RunReport JSON here")
        _add_config_flags(p)
        return p

    vocab = sub.add_parser("vocab", help="curated vocabulary tools").add_subparsers(dest="vocab_cmd", required=True)
    p = command(vocab, "merge", cmd_vocab_merge, "merge class lists, removing duplicates and plurals", data=False)
    p.add_argument("files", type=Path, nargs="+")
    p.add_argument("-o", "--output", type=Path, required=True)

    queries = sub.add_parser("queries", help="query generation").add_subparsers(dest="queries_cmd", required=True)
    p = command(queries, "ngram", cmd_queries_ngram, "build per-image query sets (raw -> queried)", data=False, jobs=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--caption", help="print the N-gram queries of one caption and exit")
    p.add_argument("--source", choices=["ngram", "curated"], default="ngram")
    p.add_argument("--vocab", type=Path, help="curated vocabulary file (one class per line)")
    p.add_argument("--order", choices=["start", "length"], default="start")
    p.add_argument("--negatives", type=int, default=0, help="pseudo-negative queries per image")

    p = command(sub, "annotate", cmd_annotate, "pseudo-annotate images (raw + queried -> annotated)", jobs=True)
    p.add_argument("--annotator", choices=["mock", "extern"], default="mock")
    p.add_argument("--extern-cmd", help="command line of the external annotator process")
    p.add_argument("--templates", type=Path, help="prompt templates file (one per line)")
    p.add_argument("--box-sigma", type=float, default=0.0)
    p.add_argument("--score-noise", type=float, default=0.0)
    p.add_argument("--distractors", type=int, default=0)

    command(sub, "filter", cmd_filter, "apply the two-threshold filter (annotated -> filtered)", jobs=True)

    p = command(sub, "mosaic", cmd_mosaic, "assemble mosaics (raw + filtered -> mosaic)", jobs=True)
    p.add_argument("--finetune", action="store_true", help="use grid_sizes_finetune")

    tokens = sub.add_parser("tokens", help="token procedures").add_subparsers(dest="tokens_cmd", required=True)
    p = command(tokens, "stats", cmd_tokens_stats, "patch-drop statistics over a stage as CSV")
    p.add_argument("--stage", choices=["mosaic", "raw"], default="mosaic")
    p.add_argument("--bins", type=int, default=0, help="print a histogram of content_kept_fraction")

    p = command(sub, "eval", cmd_eval, "AP of predictions against ground truth as CSV", data=False)
    p.add_argument("--gt", type=Path, required=True, help="dataset dir (gt stage) or JSON-lines file")
    p.add_argument("--pred", type=Path, required=True, help="dataset dir or JSON-lines file")
    p.add_argument("--pred-stage", choices=["filtered", "annotated"], default="filtered")
    p.add_argument("--variant", choices=["fixed", "old"], default="fixed")
    p.add_argument("--buckets", type=Path, help="JSON map class -> rare|common|frequent")
    p.add_argument("--max-dets-per-image", type=int, default=300)
    p.add_argument("--max-dets-per-class", type=int, default=10_000)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--allow-unknown-classes", action="store_true",
                   help="accept predicted labels that are not in the class catalog")

    p = command(sub, "ensemble", cmd_ensemble, "weight-space average of two checkpoints", data=False)
    p.add_argument("--alpha", type=float, required=True, help="weight of the second (fine-tuned) checkpoint")
    p.add_argument("ckpt_a", type=Path)
    p.add_argument("ckpt_b", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = command(sub, "lr-curve", cmd_lr_curve, "learning-rate schedule as step,lr CSV", data=False)
    p.add_argument("--peak-lr", type=float, default=2e-5)
    p.add_argument("--timescale", type=int)
    p.add_argument("--cooldown-start", type=int)
    p.add_argument("--cooldown-steps", type=int)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--every", type=int, default=1000)

    sim = sub.add_parser("sim", help="synthetic-scene harness").add_subparsers(dest="sim_cmd", required=True)
    p = command(sim, "run", cmd_sim_run, "threshold sweep on synthetic scenes (optionally write a dataset)", data=False)
    p.add_argument("--scenes", type=int, default=1000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gates", type=_parse_list(float), default=(0.0, 0.1, 0.3, 0.5, 0.7, 0.9))
    p.add_argument("--sweep-keep", type=float, help="fixed keep threshold (default: follow the gate)")
    p.add_argument("--box-sigma", type=float, default=0.02)
    p.add_argument("--score-noise", type=float, default=0.2)
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--out", type=Path, help="write raw and gt stages to this dataset directory")
    p.add_argument("--shards", type=int, default=4)

    p = command(sub, "stats", cmd_stats, "summarize the stages of a dataset")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"owlst: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StoreError, AnnotatorError, KeyError, ValueError, OSError) as exc:
        print(f"owlst: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

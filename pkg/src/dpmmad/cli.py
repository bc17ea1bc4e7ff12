"""Command-line front door: synthesize, fit, score, calibrate, evaluate.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 data or shape error.
Every stochastic path takes an explicit seed, so each command is
deterministic given its flags.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import time

import numpy as np

from . import dataio
from .core import DpmmModel
from .dataio import Checkpoint, FormatError, ShardRecord
from .metrics import LabeledScores, PairedImageScores, auroc, aupr, dice, paired_permutation_test
from .scoring import (
    AnomalyMap,
    PatchGrid,
    ScoreMethod,
    anomaly_scores,
    binarize,
    component_assignment,
    normalize_rows,
    patch_to_pixel,
    select_threshold,
)
from .training import FitConfig, effective_components, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parse_fpr_list(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad FPR list {text!r}") from exc
    if not values or any(not (0.0 < v < 1.0) for v in values):
        raise argparse.ArgumentTypeError("FPR values must lie in (0, 1)")
    return values


def _safe_name(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id)


def _write_text(path: str, text: str) -> None:
    dataio._atomic_write(path, text.encode("utf-8"))


def _load_shard_dir(directory: str) -> list[tuple[str, dataio.ShardFile]]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"shard directory not found: {directory}")
    paths = sorted(
        os.path.join(directory, name)
        for name in os.listdir(directory)
        if name.endswith(".adne")
    )
    if not paths:
        raise FileNotFoundError(f"no .adne shards in {directory}")
    return [(p, dataio.read_shard(p)) for p in paths]


def _units_from_dir(directory: str, normalize: bool) -> list[EmbeddingBatch]:
    units = []
    for _, shard in _load_shard_dir(directory):
        for rec in shard.records:
            batch = rec.to_batch(normalized=shard.normalized)
            if normalize and not batch.normalized:
                batch = normalize_rows(batch)
            units.append(batch)
    return units


def _prepare_batch(rec: ShardRecord, shard_normalized: bool, model: DpmmModel) -> EmbeddingBatch:
    batch = rec.to_batch(normalized=shard_normalized)
    if model.normalized_input and not batch.normalized:
        batch = normalize_rows(batch)
    return batch


def _score_record(
    rec: ShardRecord,
    shard_normalized: bool,
    model: DpmmModel,
    method: ScoreMethod,
    t_pi: float,
    height: int,
    width: int,
) -> tuple[AnomalyMap, float]:
    """Score one record and interpolate; returns the map and scoring milliseconds."""
    batch = _prepare_batch(rec, shard_normalized, model)
    started = time.perf_counter()
    scores = anomaly_scores(batch, model, method, t_pi)
    grid = PatchGrid(scores.reshape(rec.grid_h, rec.grid_w))
    amap = patch_to_pixel(grid, height, width)
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    return AnomalyMap(amap.scores, image_id=rec.image_id), elapsed_ms


# ---------------------------------------------------------------- synth

def _orthogonal_directions(dim: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 17])
    basis, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    return basis[:, :count].T


def _cmd_synth(args) -> int:
    patches = args.grid_h * args.grid_w
    if args.count % patches != 0:
        print(
            f"error: --count {args.count} is not a multiple of the {args.grid_h}x{args.grid_w} grid",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if args.dim < args.components + 1:
        print("error: --dim must be at least --components + 1", file=sys.stderr)
        return EXIT_USAGE
    n_records = args.count // patches
    # geometry is seeded separately so train/val/test shards share one mixture
    directions = _orthogonal_directions(args.dim, args.components + 1, args.geometry_seed)
    means = args.separation * directions
    std = args.cluster_std
    rng = np.random.default_rng([args.seed, 1])

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    mask_dir_name = os.path.splitext(os.path.basename(args.out))[0] + "_masks"
    if args.anomaly_fraction > 0.0:
        os.makedirs(os.path.join(out_dir, mask_dir_name), exist_ok=True)

    records = []
    label_lines = []
    for ridx in range(n_records):
        image_id = f"synth-{ridx:05d}"
        anomalous = rng.random(patches) < args.anomaly_fraction
        labels = rng.integers(0, args.components, size=patches)
        labels[anomalous] = args.components  # held-out component
        data = means[labels] + std * rng.standard_normal((patches, args.dim))
        mask_path = None
        if args.anomaly_fraction > 0.0:
            mask_path = os.path.join(mask_dir_name, f"{image_id}.pgm")
            mask = anomalous.reshape(args.grid_h, args.grid_w)
            dataio.write_mask_pgm(os.path.join(out_dir, mask_path), mask)
        records.append(ShardRecord(image_id, args.grid_h, args.grid_w, data, mask_path))
        label_lines.extend(f"{image_id}\t{row}\t{labels[row]}" for row in range(patches))

    dataio.write_shard(args.out, records)
    _write_text(args.out + ".labels.txt", "\n".join(label_lines) + "\n")
    print(f"wrote {n_records} records ({args.count} vectors) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _cmd_fit(args) -> int:
    train_units = _units_from_dir(args.train, args.normalize)
    val_units = _units_from_dir(args.val, args.normalize)
    config = FitConfig(
        k=args.k,
        gamma=args.gamma,
        epochs=args.epochs,
        batch_vectors=args.batch_vectors,
        seed=args.seed,
        full_batch_mode=args.full_batch,
    )
    model, report = fit(train_units, val_units, config)
    dataio.write_checkpoint(args.out, Checkpoint(model))
    lines = [
        f"epoch {epoch} val_loglik {ll:.10g} effective {eff} seconds {secs:.3f}"
        for epoch, (ll, eff, secs) in enumerate(
            zip(report.val_loglik, report.effective_counts, report.epoch_seconds)
        )
    ]
    lines.append(f"best_epoch {report.best_epoch}")
    lines.append(f"final_effective {report.final_effective}")
    text = "\n".join(lines)
    _write_text(args.out + ".fitlog.txt", text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- score

def _cmd_score(args) -> int:
    checkpoint = dataio.read_checkpoint(args.model)
    os.makedirs(args.out, exist_ok=True)
    timing_lines = []
    n_maps = 0
    for _, shard in _load_shard_dir(args.in_dir):
        for rec in shard.records:
            amap, ms = _score_record(
                rec, shard.normalized, checkpoint.model, args.method, args.t_pi,
                args.height, args.width,
            )
            name = _safe_name(rec.image_id)
            dataio.write_map(os.path.join(args.out, name + ".amap"), amap)
            if args.render:
                dataio.render_map_pgm(amap, os.path.join(args.out, name + ".pgm"))
            timing_lines.append(f"{name} {ms:.3f}")
            n_maps += 1
    _write_text(os.path.join(args.out, "timing.txt"), "\n".join(timing_lines) + "\n")
    print(f"wrote {n_maps} anomaly maps to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- threshold

def _pooled_normal_scores(args, model: DpmmModel) -> np.ndarray:
    pooled = []
    for _, shard in _load_shard_dir(args.val):
        for rec in shard.records:
            amap, _ = _score_record(
                rec, shard.normalized, model, args.method, args.t_pi, args.height, args.width
            )
            pooled.append(amap.scores.ravel())
    return np.concatenate(pooled)


def _cmd_threshold(args) -> int:
    checkpoint = dataio.read_checkpoint(args.model)
    threshold = select_threshold(_pooled_normal_scores(args, checkpoint.model), args.fpr)
    print(f"{threshold:.17g}")
    return EXIT_OK


# ---------------------------------------------------------------- assign-map

def _cmd_assign_map(args) -> int:
    checkpoint = dataio.read_checkpoint(args.model)
    model = checkpoint.model
    keep = effective_components(model, args.t_pi)
    position = {comp: idx for idx, comp in enumerate(keep)}
    spread = 255.0 / max(len(keep) - 1, 1)
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for _, shard in _load_shard_dir(args.in_dir):
        for rec in shard.records:
            batch = _prepare_batch(rec, shard.normalized, model)
            assigned = component_assignment(batch, model, args.method, args.t_pi)
            gray = np.array(
                [round(position[int(c)] * spread) for c in assigned], dtype=np.uint8
            ).reshape(rec.grid_h, rec.grid_w)
            dataio.write_pgm_gray(
                os.path.join(args.out, _safe_name(rec.image_id) + ".assign.pgm"), gray
            )
            count += 1
    print(f"wrote {count} assignment maps to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _load_eval_pairs(args) -> list[tuple[str, AnomalyMap, np.ndarray]]:
    """Per record: (image id, anomaly map, boolean ground-truth mask)."""
    pairs = []
    for shard_path, shard in _load_shard_dir(args.masks_from_shards):
        shard_dir = os.path.dirname(os.path.abspath(shard_path))
        for rec in shard.records:
            map_path = os.path.join(args.scores, _safe_name(rec.image_id) + ".amap")
            amap = dataio.read_map(map_path, image_id=rec.image_id)
            if rec.mask_path is None:
                mask = np.zeros(amap.shape, dtype=bool)  # unmasked records count as normal
            else:
                mask = dataio.read_mask_pgm(os.path.join(shard_dir, rec.mask_path))
                if mask.shape != amap.shape:
                    raise ValueError(
                        f"mask shape {mask.shape} does not match map shape {amap.shape} "
                        f"for record {rec.image_id}"
                    )
            pairs.append((rec.image_id, amap, mask))
    return pairs


def _mean_timing_ms(scores_dir: str) -> float:
    path = os.path.join(scores_dir, "timing.txt")
    if not os.path.exists(path):
        return float("nan")
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 2:
                values.append(float(parts[1]))
    return float(np.mean(values)) if values else float("nan")


def _cmd_eval(args) -> int:
    pairs = _load_eval_pairs(args)
    pooled_scores = np.concatenate([amap.scores.ravel() for _, amap, _ in pairs])
    pooled_labels = np.concatenate([mask.ravel() for _, _, mask in pairs])
    pooled = LabeledScores(pooled_scores, pooled_labels)
    lines = [
        f"pixel_auroc {auroc(pooled):.6f}",
        f"pixel_aupr {aupr(pooled):.6f}",
    ]

    def dice_at(threshold: float) -> float:
        if args.dice_per_image:
            values = [
                dice(binarize(amap, threshold), mask) for _, amap, mask in pairs
            ]
            return float(np.mean(values))
        pred = pooled_scores > threshold
        return dice(pred, pooled_labels)

    if args.threshold is not None:
        lines.append(f"dice_threshold {args.threshold:.6g} {dice_at(args.threshold):.6f}")
    if args.fpr_list:
        if not args.model or not args.val:
            print("error: --fpr-list requires --model and --val", file=sys.stderr)
            return EXIT_USAGE
        shapes = {amap.shape for _, amap, _ in pairs}
        if len(shapes) != 1:
            raise ValueError("FPR calibration needs score maps of a single resolution")
        args.height, args.width = shapes.pop()
        checkpoint = dataio.read_checkpoint(args.model)
        normal_scores = _pooled_normal_scores(args, checkpoint.model)
        for fpr in args.fpr_list:
            threshold = select_threshold(normal_scores, fpr)
            lines.append(f"dice_fpr {fpr:g} {threshold:.6g} {dice_at(threshold):.6f}")

    lines.append(f"scoring_ms_mean {_mean_timing_ms(args.scores):.3f}")

    if args.permute_against:
        with_anomaly = [
            (image_id, amap, mask) for image_id, amap, mask in pairs if mask.any()
        ]
        if len(with_anomaly) < 2:
            raise ValueError("permutation test needs at least 2 images with anomalous pixels")
        metric_a = {"auroc": [], "aupr": []}
        metric_b = {"auroc": [], "aupr": []}
        for image_id, amap, mask in with_anomaly:
            other = dataio.read_map(
                os.path.join(args.permute_against, _safe_name(image_id) + ".amap"),
                image_id=image_id,
            )
            if other.shape != amap.shape:
                raise ValueError(f"score map shapes differ for record {image_id}")
            ours = LabeledScores(amap.scores.ravel(), mask.ravel())
            theirs = LabeledScores(other.scores.ravel(), mask.ravel())
            metric_a["auroc"].append(auroc(ours))
            metric_b["auroc"].append(auroc(theirs))
            metric_a["aupr"].append(aupr(ours))
            metric_b["aupr"].append(aupr(theirs))
        for name in ("auroc", "aupr"):
            p_value = paired_permutation_test(
                PairedImageScores(
                    metric_a[name], metric_b[name], n_permutations=args.n_perm, seed=args.seed
                )
            )
            lines.append(f"perm_p_{name} {p_value:.6g}")

    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_scoring_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=[m.value for m in ScoreMethod],
                        default=ScoreMethod.COSINE.value, help="proximity metric for scoring")
    parser.add_argument("--t-pi", type=float, default=1e-6, dest="t_pi",
                        help="component weight threshold")
    parser.add_argument("--height", type=int, default=448, help="output map height")
    parser.add_argument("--width", type=int, default=448, help="output map width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpmmad",
        description="Mixture-prototype anomaly detection over patch embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic embedding shard", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output shard path (.adne)")
    p.add_argument("--components", type=int, default=3, help="number of normal components")
    p.add_argument("--dim", type=int, default=16, help="embedding dimensionality")
    p.add_argument("--count", type=int, default=12800, help="total embedding vectors")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--geometry-seed", type=int, default=0, dest="geometry_seed",
                   help="seed for the component layout; share it across train/val/test shards")
    p.add_argument("--grid-h", type=int, default=8, dest="grid_h", help="patch grid height")
    p.add_argument("--grid-w", type=int, default=8, dest="grid_w", help="patch grid width")
    p.add_argument("--anomaly-fraction", type=float, default=0.0, dest="anomaly_fraction",
                   help="fraction of patches drawn from a held-out component")
    p.add_argument("--separation", type=float, default=6.0, help="component mean radius")
    p.add_argument("--cluster-std", type=float, default=0.5, dest="cluster_std",
                   help="per-dimension standard deviation inside a component")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="fit the mixture on embedding shards", formatter_class=fmt)
    p.add_argument("--train", required=True, help="directory of training shards")
    p.add_argument("--val", required=True, help="directory of validation shards")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--k", type=int, default=500, help="truncation level")
    p.add_argument("--gamma", type=float, default=0.2, help="statistics discount factor")
    p.add_argument("--epochs", type=int, default=40, help="training epochs")
    p.add_argument("--batch-vectors", type=int, default=12288, dest="batch_vectors",
                   help="embedding vectors per batch")
    p.add_argument("--seed", type=int, default=0, help="seed for init and shuffling")
    p.add_argument("--normalize", type=_parse_bool, default=True, metavar="BOOL",
                   help="L2-normalize embeddings before fitting")
    p.add_argument("--full-batch", action="store_true", dest="full_batch",
                   help="plain full-data EM: discount 1, concentration fixed")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("score", help="write anomaly maps for a shard directory",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", required=True, dest="in_dir", help="directory of input shards")
    p.add_argument("--out", required=True, help="output directory for maps")
    _add_scoring_flags(p)
    p.add_argument("--render", action="store_true", help="also write grayscale PGM renderings")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("threshold", help="calibrate a score threshold at a target FPR",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--val", required=True, help="directory of normal validation shards")
    p.add_argument("--fpr", type=float, required=True, help="target false positive rate")
    _add_scoring_flags(p)
    p.set_defaults(func=_cmd_threshold)

    p = sub.add_parser("assign-map", help="render closest-component index maps",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", required=True, dest="in_dir", help="directory of input shards")
    p.add_argument("--out", required=True, help="output directory for PGMs")
    p.add_argument("--method", choices=[m.value for m in ScoreMethod],
                   default=ScoreMethod.COSINE.value, help="proximity metric")
    p.add_argument("--t-pi", type=float, default=1e-6, dest="t_pi",
                   help="component weight threshold")
    p.set_defaults(func=_cmd_assign_map)

    p = sub.add_parser("eval", help="evaluate score maps against ground-truth masks",
                       formatter_class=fmt)
    p.add_argument("--scores", required=True, help="directory of anomaly maps")
    p.add_argument("--masks-from-shards", required=True, dest="masks_from_shards",
                   help="shard directory whose records reference ground-truth masks")
    p.add_argument("--threshold", type=float, default=None, help="explicit Dice threshold")
    p.add_argument("--fpr-list", type=_parse_fpr_list, default=None, dest="fpr_list",
                   help="comma-separated FPR targets for calibrated Dice (e.g. 0.01,0.05,0.10)")
    p.add_argument("--val", default=None, help="normal validation shards for FPR calibration")
    p.add_argument("--model", default=None, help="checkpoint used for FPR calibration")
    p.add_argument("--method", choices=[m.value for m in ScoreMethod],
                   default=ScoreMethod.COSINE.value, help="metric used when re-scoring validation")
    p.add_argument("--t-pi", type=float, default=1e-6, dest="t_pi",
                   help="component weight threshold")
    p.add_argument("--dice-per-image", action="store_true", dest="dice_per_image",
                   help="average Dice per image instead of pooling pixels")
    p.add_argument("--permute-against", default=None, dest="permute_against",
                   help="second score-map directory for the paired permutation test")
    p.add_argument("--n-perm", type=int, default=10000, dest="n_perm",
                   help="permutation count")
    p.add_argument("--seed", type=int, default=0, help="permutation seed")
    p.set_defaults(func=_cmd_eval)

    return parser


def run(argv=None) -> int:
    """Parse and execute one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line entry point.

Every verb takes ``--config FILE`` (flat ``key = value`` lines) plus any
``--key value`` overrides of RunConfig fields. Exit codes: 0 ok, 1 usage or
config or data error, 2 non-finite loss, 3 gradient verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from camforge import fusion, gradcheck, synth
from camforge.config import RunConfig, RunConfigError, dump_run_config, load_run_config
from camforge.imaging import read_pgm, to_heatmap, write_pgm
from camforge.model import (
    forward,
    infer_multiscale,
    init,
    load_checkpoint,
    save_checkpoint,
)
from camforge.objective import NonFiniteLossError, train
from camforge.seeding import confusion_matrix, dataset_miou, iou_from_confusion, sweep
from camforge.tensor import SnapshotError, no_grad, save_tensor

log = logging.getLogger("camforge")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3

ABLATION_MODES = (("without noise", "plain"), ("k=1", "1"), ("k=2", "2"))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _split_overrides(extra: list[str]) -> dict[str, str]:
    pairs = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        pairs[key] = value
    return pairs


def _load_data(cfg: RunConfig) -> list[synth.Sample]:
    data = synth.load(cfg.data_dir)
    size = data[0].image.shape[-1]
    classes = data[0].labels.size
    if size != cfg.image_size or classes != cfg.num_classes:
        raise synth.DatasetError(
            f"{cfg.data_dir}: dataset has {size}px images and {classes} classes, "
            f"config expects {cfg.image_size}px and {cfg.num_classes}")
    return data


def _compute_cams(state, data, scales) -> list[np.ndarray]:
    return [infer_multiscale(state, s.image, scales) for s in data]


def _metrics(mean: float, per_class: np.ndarray, **extra) -> dict:
    report = {"miou": None if math.isnan(mean) else mean,
              "per_class_iou": [None if math.isnan(v) else float(v) for v in per_class]}
    report.update(extra)
    return report


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---- verbs ---------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    data = synth.generate(cfg.data_seed, cfg.count, cfg.num_classes, cfg.image_size)
    synth.save(data, cfg.data_dir)
    print(f"wrote {len(data)} samples to {cfg.data_dir}")
    return EXIT_OK


def _train_one(cfg: RunConfig, data, noise, out: Path):
    state = init(cfg.model_config())
    trained, history = train(state, data, cfg.train_config(noise))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "checkpoint")
    history.write_csv(out / "loss.csv")
    return trained, history


def cmd_train(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(dump_run_config(cfg))
    _, history = _train_one(cfg, data, cfg.noise, out)
    means = history.epoch_means()
    print(f"trained {len(means)} epochs, final mean loss {means[-1]:.6f}; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def _seed_dataset(cfg: RunConfig, state, data, ht: float):
    scales = cfg.scale_list(state.config.image_size)
    cams = _compute_cams(state, data, scales)
    labels = [s.labels for s in data] if cfg.gate_labels else None
    mean, per_class, masks = dataset_miou(cams, [s.mask for s in data], ht, cfg.num_classes + 1, labels)
    return mean, per_class, masks, scales


def cmd_seed(cfg: RunConfig) -> int:
    state = load_checkpoint(cfg.checkpoint_dir)
    data = _load_data(cfg)
    mean, per_class, masks, scales = _seed_dataset(cfg, state, data, cfg.ht)
    out = Path(cfg.out_dir)
    mask_dir = Path(cfg.masks_dir) if cfg.masks_dir else out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        write_pgm(mask_dir / f"mask_{i:05d}.pgm", m)
    _write_json(out / "metrics.json", _metrics(mean, per_class, ht=cfg.ht, scales=scales, count=len(masks)))
    print(f"ht={cfg.ht} mIoU={mean:.4f} ({len(masks)} masks in {mask_dir})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    mask_dir = Path(cfg.masks_dir) if cfg.masks_dir else Path(cfg.out_dir) / "masks"
    if not mask_dir.is_dir():
        raise UsageError(f"mask directory not found: {mask_dir}")
    n = cfg.num_classes + 1
    conf = np.zeros((n, n), dtype=np.int64)
    for i, s in enumerate(data):
        pred = read_pgm(mask_dir / f"mask_{i:05d}.pgm").astype(np.int64)
        conf += confusion_matrix(pred, s.mask, n)
    mean, per_class = iou_from_confusion(conf)
    report = _metrics(mean, per_class, count=len(data))
    _write_json(Path(cfg.out_dir) / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _curve_raster(thresholds, scores, width: int = 200, height: int = 100) -> np.ndarray:
    img = np.full((height, width), 255, dtype=np.uint8)
    img[height - 1, :] = 0
    img[:, 0] = 0
    xs = np.round(np.asarray(thresholds) * (width - 1)).astype(int)
    ys = np.round((1.0 - np.nan_to_num(np.asarray(scores))) * (height - 1)).astype(int)
    for x0, y0, x1, y1 in zip(xs[:-1], ys[:-1], xs[1:], ys[1:]):
        steps = max(abs(x1 - x0), abs(y1 - y0), 1)
        for t in np.linspace(0.0, 1.0, steps + 1):
            img[int(round(y0 + t * (y1 - y0))), int(round(x0 + t * (x1 - x0)))] = 0
    img[ys, xs] = 0
    return img


def cmd_sweep(cfg: RunConfig) -> int:
    state = load_checkpoint(cfg.checkpoint_dir)
    data = _load_data(cfg)
    thresholds = cfg.threshold_list()
    cams = _compute_cams(state, data, cfg.scale_list(state.config.image_size))
    labels = [s.labels for s in data] if cfg.gate_labels else None
    result = sweep(cams, [s.mask for s in data], thresholds, cfg.num_classes + 1, labels)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(result.to_csv())
    write_pgm(out / "sweep_curve.pgm", _curve_raster(result.thresholds, result.miou))
    print(result.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, noise in ABLATION_MODES:
        slug = label.replace(" ", "_").replace("=", "")
        state, _ = _train_one(cfg, data, noise, out / slug)
        mean, _, _, _ = _seed_dataset(cfg, state, data, cfg.ht)
        rows.append((label, noise, mean))
        print(f"{label:>14}: seed mIoU {mean:.4f}")
    lines = ["mode,noise,miou"] + [f"{label},{noise},{mean!r}" for label, noise, mean in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    without, k1 = rows[0][2], rows[1][2]
    if without < k1:
        log.info("expected ordering holds: without noise %.4f < k=1 %.4f", without, k1)
    else:
        log.warning("expected ordering not observed: without noise %.4f >= k=1 %.4f", without, k1)
    print("noise         | " + " | ".join(label for label, _, _ in rows))
    print(f"seed mIoU     | " + " | ".join(f"{m:.4f}" for _, _, m in rows))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradcheck.run_all(cfg.model_seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<14} max_rel_error={r.max_rel_error:.3e}  {status}")
    ok = all(r.passed for r in results)
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_dump_attn(cfg: RunConfig) -> int:
    state = load_checkpoint(cfg.checkpoint_dir)
    data = _load_data(cfg)
    if not 0 <= cfg.index < len(data):
        raise UsageError(f"index {cfg.index} out of range for {len(data)} samples")
    with no_grad():
        art = forward(state, data[cfg.index].image)
        fused = fusion.fuse(art.attention)
    out = Path(cfg.out_dir) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    for name in ("A", "A_star", "A_bar", "A_bar_star"):
        mat = getattr(fused, name).data[0]
        save_tensor(out / f"{name}.cftn", mat)
        write_pgm(out / f"{name}.pgm", to_heatmap(mat))
    print(f"wrote attention maps for sample {cfg.index} to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "seed": cmd_seed,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, _split_overrides(extra))
        return COMMANDS[args.command](cfg)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, RunConfigError, synth.DatasetError, SnapshotError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: dataset generation, training, inference, evaluation,
and the four-way ablation sweep.

Configuration is a flat-key text file (`section.key = value`); unknown keys
are hard errors so sweep typos fail fast.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import evaluate as E
from . import pipeline as P
from .errors import ConfigError, KPNetError
from .geom import Polygon
from .losses import LossConfig
from .net import NetConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclasses.dataclass
class RunConfig:
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    train: P.TrainConfig = dataclasses.field(default_factory=P.TrainConfig)
    infer: P.InferConfig = dataclasses.field(default_factory=P.InferConfig)
    train_dir: str = ""
    test_dir: str = ""
    out_dir: str = "runs/out"
    save_every: int = 50


def _key_map(cfg):
    """Flat config key -> (owner object, attribute name)."""
    entries = {}
    for prefix, obj in (("net", cfg.net), ("train", cfg.train), ("infer", cfg.infer),
                        ("loss", cfg.train.loss)):
        for f in dataclasses.fields(obj):
            if f.name == "loss":
                continue
            entries[f"{prefix}.{f.name}"] = (obj, f.name)
    entries["data.train_dir"] = (cfg, "train_dir")
    entries["data.test_dir"] = (cfg, "test_dir")
    entries["out_dir"] = (cfg, "out_dir")
    entries["save_every"] = (cfg, "save_every")
    return entries


def _coerce(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def parse_config(path):
    cfg = RunConfig()
    keys = _key_map(cfg)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
        obj, attr = keys[key]
        setattr(obj, attr, _coerce(raw, getattr(obj, attr)))
    # re-run dataclass validation after overrides
    cfg.net.__post_init__()
    cfg.train.__post_init__()
    cfg.infer.__post_init__()
    cfg.train.loss.__post_init__()
    return cfg


def write_config(cfg, path):
    lines = []
    for key, (obj, attr) in sorted(_key_map(cfg).items()):
        lines.append(f"{key} = {getattr(obj, attr)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    samples = []
    for i in range(args.n):
        spec = D.SceneSpec(
            h=args.size, w=args.size,
            n_instances=int(rng.integers(args.min_instances, args.max_instances + 1)),
            gap_px=args.gap,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        samples.append((f"sample_{i:04d}", D.generate_scene(spec)))
    D.write_dataset(out, samples)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args):
    cfg = parse_config(args.config)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = D.load_dataset(Path(cfg.train_dir))
    if not dataset:
        raise KPNetError(f"no training samples in {cfg.train_dir}")
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.net)
    write_config(cfg, out / "effective_config.txt")
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def on_epoch(rec):
        with open(metrics_path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        print(f"epoch {rec['epoch']:4d} lr {rec['lr']:.2e} "
              f"L_gc {rec.get('L_gc', 0):.4f} L_s {rec.get('L_s', 0):.4f} "
              f"L_OLL {rec.get('L_OLL', 0):.4f} total {rec.get('total', 0):.4f}")
        if cfg.save_every and (rec["epoch"] + 1) % cfg.save_every == 0:
            save_checkpoint(out / f"model_epoch{rec['epoch']:04d}.pt", model)

    P.train(model, dataset, cfg.train, on_epoch=on_epoch)
    save_checkpoint(out / "model_final.pt", model)
    print(f"final checkpoint: {out / 'model_final.pt'}")
    return 0


def _detections_json(name, detections):
    return {
        "image": name,
        "detections": [
            {"polygon": [[float(x), float(y)] for x, y in d.polygon.vertices],
             "score": float(d.score)}
            for d in detections
        ],
    }


def cmd_infer(args):
    cfg = parse_config(args.config)
    model = load_checkpoint(args.ckpt)
    if model.cfg.embedding_channels != cfg.net.embedding_channels:
        raise ConfigError("checkpoint/config channel mismatch")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = sorted(p for p in Path(args.images).iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    for path in images:
        from PIL import Image
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
        img = img.transpose(2, 0, 1) / 255.0
        detections = P.run_inference(img, model, cfg.infer)
        with open(out / f"{path.stem}.json", "w") as f:
            json.dump(_detections_json(path.name, detections), f, indent=1)
        if args.dump_maps:
            _dump_maps(img, model, cfg.infer, out, path.stem)
    print(f"processed {len(images)} images into {out}")
    return 0


def _dump_maps(img, model, infer_cfg, out, stem):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    model.eval()
    with torch.no_grad():
        tensor = torch.as_tensor(img).unsqueeze(0)
        if getattr(model.cfg, "head", "kpn") == "fcn":
            mask = model(tensor)[0, 0].numpy()
            panels = [("image", img.transpose(1, 2, 0)), ("mask", mask)]
        else:
            fo = model(tensor)
            center = fo.center_map[0, 0].numpy()
            kps = P.extract_keypoints(center, infer_cfg.t_center)
            panels = [("image", img.transpose(1, 2, 0)), ("center heatmap", center)]
            if kps:
                ks = P.filter_duplicate_keypoints(
                    P.gather_kernels(fo.embedding_maps[0], kps))
                maps = P.dynamic_convolve(ks, fo.embedding_maps[0]).numpy()
                panels.append(("instance maps (max)", maps.max(axis=0)))
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    for ax, (title, im) in zip(np.atleast_1d(axes), panels):
        ax.imshow(im, cmap=None if im.ndim == 3 else "magma")
        ax.set_title(title)
        ax.axis("off")
    fig.savefig(out / f"{stem}_maps.png", bbox_inches="tight")
    plt.close(fig)


def _load_gt_polygons(path):
    with open(path) as f:
        ann = json.load(f)
    return [Polygon(tuple(map(tuple, rec["polygon"]))) for rec in ann["instances"]]


def _load_det_polygons(path):
    with open(path) as f:
        blob = json.load(f)
    return [Polygon(tuple(map(tuple, rec["polygon"]))) for rec in blob["detections"]]


def cmd_eval(args):
    det_dir, gt_dir = Path(args.dets), Path(args.gt)
    det_names = {p.stem for p in det_dir.glob("*.json")}
    gt_names = {p.stem for p in gt_dir.glob("*.json")}
    common = sorted(det_names & gt_names)
    for missing in sorted(det_names ^ gt_names):
        log.warning("unmatched basename skipped: %s", missing)
    if not det_names and gt_names:
        # zero detection files is a legitimate (if useless) detector: score
        # every ground-truth image with an empty detection list
        common = sorted(gt_names)
        dets = [[] for _ in common]
    elif not common:
        raise KPNetError("no matching basenames between detection and gt dirs")
    else:
        dets = [_load_det_polygons(det_dir / f"{n}.json") for n in common]
    gts = [_load_gt_polygons(gt_dir / f"{n}.json") for n in common]
    res = E.match_and_score(dets, gts, iou_thresh=args.iou, names=common)
    print(f"P={res.precision:.4f} R={res.recall:.4f} H={res.hmean:.4f} "
          f"(TP={res.n_tp} det={res.n_det} gt={res.n_gt})")
    out_path = Path(args.out) if args.out else det_dir / "eval_results.json"
    with open(out_path, "w") as f:
        json.dump({
            "precision": res.precision, "recall": res.recall, "hmean": res.hmean,
            "n_tp": res.n_tp, "n_det": res.n_det, "n_gt": res.n_gt,
            "per_image": [dataclasses.asdict(r) for r in res.per_image],
        }, f, indent=1)
    return 0


ABLATION_ROWS = ("kpn_full", "fcn_baseline", "kpn_no_posembed", "kpn_no_oll")


def ablation_variant(cfg, row):
    """Derive one ablation configuration from the base RunConfig."""
    variant = dataclasses.replace(
        cfg,
        net=dataclasses.replace(cfg.net),
        train=dataclasses.replace(cfg.train, loss=dataclasses.replace(cfg.train.loss)),
        infer=dataclasses.replace(cfg.infer),
    )
    if row == "fcn_baseline":
        variant.net.head = "fcn"
    elif row == "kpn_no_posembed":
        variant.net.use_position_embedding = False
    elif row == "kpn_no_oll":
        variant.train.loss.lambda_oll = 0.0
    return variant


def train_and_eval(cfg, train_set, test_set):
    """Train one configuration and score it on the held-out set."""
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.net)
    P.train(model, train_set, cfg.train)
    dets, gts, names = [], [], []
    for ref in test_set:
        detections = P.run_inference(ref.load_image(), model, cfg.infer)
        dets.append([d.polygon for d in detections])
        gts.append([inst.polygon for inst in ref.instances])
        names.append(ref.name)
    return model, E.match_and_score(dets, gts, names=names)


def cmd_ablate(args):
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = D.load_dataset(Path(cfg.train_dir))
    test_set = D.load_dataset(Path(cfg.test_dir))
    if not train_set or not test_set:
        raise KPNetError("ablation needs both data.train_dir and data.test_dir")
    rows = []
    for row in ABLATION_ROWS:
        variant = ablation_variant(cfg, row)
        try:
            _, res = train_and_eval(variant, train_set, test_set)
            rows.append({"config": row, "recall": res.recall,
                         "precision": res.precision, "hmean": res.hmean,
                         "count_accuracy": E.count_accuracy(res)})
        except KPNetError as e:  # keep going; report the failed row
            log.error("ablation row %s failed: %s", row, e)
            rows.append({"config": row, "error": str(e)})
    lines = [f"{'config':<18} {'R':>8} {'P':>8} {'H':>8} {'count_acc':>10}"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['config']:<18} failed: {r['error']}")
        else:
            lines.append(f"{r['config']:<18} {r['recall']:>8.4f} {r['precision']:>8.4f} "
                         f"{r['hmean']:>8.4f} {r['count_accuracy']:>10.4f}")
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n")
    with open(out / "ablation.json", "w") as f:
        json.dump(rows, f, indent=1)
    print(table)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="kpnet",
                                     description="kernel-proposal text instance separation")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic adjacency dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--gap", type=float, default=2.0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-instances", type=int, default=2)
    g.add_argument("--max-instances", type=int, default=4)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run inference over a directory of images")
    i.add_argument("--config", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-maps", action="store_true")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--dets", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run the four-configuration ablation sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (KPNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

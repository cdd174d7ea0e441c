"""Command-line entry point: synth, train, index, infer and eval.

Every command reads the same flat ``key=value`` configuration. Values come
from the built-in defaults, then ``--config FILE``, then each ``--set k=v``,
then the command's own flags (later wins). Unknown keys are rejected before
any work starts.

Exit codes: 0 ok, 2 usage or configuration error (including missing inputs),
3 I/O failure, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import filecmp
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import data as data_mod
from . import feature_index as fidx
from . import inference as inf
from . import model as model_mod
from .evaluation import (
    CategoryReport,
    EvalReport,
    LabeledScores,
    auroc,
    baseline_random_encoder,
    baseline_raw_patch,
    intrinsic_dimension,
    pixel_auroc,
)
from .numerics import serialize
from .training import LossWeights, NumericalError, TrainConfig, train, write_history

log = logging.getLogger("patchsvdd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"
SCORES_NAME = "scores.jsonl"
SCALE_NAMES = {32: "small", 64: "big"}


class ConfigError(ValueError):
    """Invalid configuration, usage or missing input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    # locations (never written to manifests)
    dataset_root: str = "data"
    category: str = "synth_object"
    output_dir: str = "out"
    model_dir: str = ""
    index_dir: str = ""
    infer_dir: str = ""
    images: str = ""
    # synthetic data
    style: str = "placed-object"
    n_train: int = 32
    n_test_good: int = 8
    n_test_defect: int = 8
    defect_types: str = "scratch,blob,missing-region"
    defect_size_min: int = 10
    defect_size_max: int = 28
    noise: float = 0.02
    # training
    seed: int = 0
    lam: float = 1.0
    embed_dim: int = 64
    scales: str = "32,64"
    steps: int = 1000
    steps_big: int = 0
    batch_size: int = 64
    lr: float = 1e-4
    loss: str = "patch_svdd"
    hierarchical: bool = True
    # index
    index_mode: str = "exact"
    n_trees: int = 8
    leaf_size: int = 32
    search_budget: int = 2048
    # evaluation
    baseline_train_images: int = 8
    id_samples: int = 2000
    deterministic: bool = False

    PATH_KEYS = ("dataset_root", "output_dir", "model_dir", "index_dir", "infer_dir", "images")

    # -- parsing --------------------------------------------------------------
    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def update(self, key: str, value: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                parsed = low in ("1", "true", "yes")
            elif kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = value.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r} (expected {kind})") from None
        setattr(self, key, parsed)

    def apply_lines(self, lines: Sequence[str], source: str) -> None:
        for n, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
            k, v = line.split("=", 1)
            try:
                self.update(k.strip(), v)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None

    # -- derived configs (also the validation step) ----------------------------
    def scale_tuple(self) -> Tuple[int, ...]:
        try:
            vals = tuple(int(s) for s in self.scales.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"scales must be a comma list of 32/64, got {self.scales!r}") from None
        return vals

    def synthetic_config(self) -> data_mod.SyntheticConfig:
        try:
            return data_mod.SyntheticConfig(
                category=self.category, style=self.style, n_train=self.n_train,
                n_test_good=self.n_test_good, n_test_defect=self.n_test_defect,
                defect_types=tuple(s.strip() for s in self.defect_types.split(",") if s.strip()),
                defect_size=(self.defect_size_min, self.defect_size_max), noise=self.noise, seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                steps=self.steps, steps_big=self.steps_big or None, batch_size=self.batch_size,
                weights=LossWeights(self.lam), lr=self.lr, seed=self.seed, embed_dim=self.embed_dim,
                scales=self.scale_tuple(), loss=self.loss, hierarchical=self.hierarchical,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def index_config(self) -> fidx.IndexBuildConfig:
        try:
            return fidx.IndexBuildConfig(self.index_mode, self.n_trees, self.leaf_size, self.search_budget, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self) -> None:
        if not self.category or "/" in self.category:
            raise ConfigError(f"invalid category name {self.category!r}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.baseline_train_images < 1 or self.id_samples < 10:
            raise ConfigError("baseline_train_images must be >= 1 and id_samples >= 10")
        self.synthetic_config()
        self.train_config()
        self.index_config()

    def knobs(self) -> Dict[str, object]:
        """Every setting that influences outputs, without filesystem locations."""
        return {k: v for k, v in asdict(self).items() if k not in self.PATH_KEYS}


def build_config(args: argparse.Namespace, flag_keys: Dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.apply_lines(path.read_text().splitlines(), str(path))
    cfg.apply_lines(args.set or [], "--set")
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        if isinstance(value, list):
            value = ",".join(value)
        cfg.update(key, "1" if value is True else str(value))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _formats() -> Dict[str, int]:
    return {
        "architecture": model_mod.ARCH_VERSION,
        "tensor_container": serialize.VERSION,
        "index": fidx.VERSION,
        "raw_map": inf.MAP_VERSION,
        "synthetic_generator": int(data_mod.GENERATOR_VERSION),
    }


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: Dict[str, Path],
                   outputs: Sequence[Path], extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "formats": _formats(),
        "preprocessing": {"resize": "bilinear", "size": data_mod.IMAGE_SIZE},
        "config": cfg.knobs(),
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items())},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_output(out: Path, overwrite: bool, produced: Sequence[str]) -> Path:
    """Create ``out``; refuse to clobber earlier results unless ``overwrite``."""
    existing = [name for name in produced if (out / name).exists()]
    if existing and not overwrite:
        raise ConfigError(f"{out} already holds {', '.join(existing)}; pass --overwrite to replace")
    out.mkdir(parents=True, exist_ok=True)
    for name in existing:
        target = out / name
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()
    return out


def _require_dir(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_records(cfg: RunConfig):
    try:
        train_recs, test_recs = data_mod.load_dataset(cfg.dataset_root, cfg.category)
    except data_mod.DatasetError as exc:
        raise ConfigError(str(exc)) from None
    return train_recs, test_recs


def _load_model(model_dir: str):
    d = _require_dir(model_dir, "model directory")
    for name in (model_mod.MODEL_FILE, model_mod.MANIFEST_FILE):
        if not (d / name).is_file():
            raise ConfigError(f"missing model file: {d / name}")
    try:
        encoder, _ = model_mod.load_model(d)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable model in {d}: {exc}") from None
    return encoder, d


def index_path(index_dir: Path, scale: str) -> Path:
    return index_dir / f"index_{scale}.psix"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, overwrite: bool = False, check: bool = False) -> int:
    scfg = cfg.synthetic_config()
    root = Path(cfg.dataset_root)
    target = root / cfg.category
    if check:
        if not target.is_dir():
            raise ConfigError(f"nothing to check: {target} does not exist")
        with tempfile.TemporaryDirectory() as tmp:
            fresh = data_mod.generate_synthetic(scfg, tmp)
            diffs = _tree_differences(fresh, target)
        if diffs:
            for d in diffs[:20]:
                log.error("differs: %s", d)
            log.error("%d file(s) differ from a fresh generation", len(diffs))
            return EXIT_IO
        log.info("%s matches a fresh generation byte for byte", target)
        return EXIT_OK
    if target.exists():
        if not overwrite:
            raise ConfigError(f"{target} exists; pass --overwrite to regenerate")
        if not (target / "generation.json").is_file():
            raise ConfigError(f"refusing to overwrite {target}: it was not written by the generator")
        shutil.rmtree(target)
    base = data_mod.generate_synthetic(scfg, root)
    log.info("wrote synthetic category %s (%s) to %s", cfg.category, cfg.style, base)
    return EXIT_OK


def _tree_differences(a: Path, b: Path) -> List[str]:
    files_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    files_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    diffs = [f"{p} (only in one tree)" for p in sorted(files_a ^ files_b)]
    diffs += [str(p) for p in sorted(files_a & files_b) if not filecmp.cmp(a / p, b / p, shallow=False)]
    return diffs


def cmd_train(cfg: RunConfig, overwrite: bool = False) -> int:
    tcfg = cfg.train_config()
    train_recs, _ = _load_records(cfg)
    if not train_recs:
        raise ConfigError(f"no training images under {cfg.dataset_root}/{cfg.category}/train/good")
    out = _prepare_output(Path(cfg.output_dir), overwrite,
                          ["model", "loss_small.csv", "loss_big.csv", MANIFEST_NAME])
    result = train([r.pixels for r in train_recs], tcfg)
    model_mod.save_model(out / "model", result.encoder, result.classifiers)
    produced = [out / "model" / model_mod.MODEL_FILE, out / "model" / model_mod.MANIFEST_FILE]
    for K, hist in sorted(result.history.items()):
        path = out / f"loss_{SCALE_NAMES[K]}.csv"
        write_history(path, hist)
        produced.append(path)
    write_manifest(out, "train", cfg, {}, produced,
                   {"train_images": [r.id for r in train_recs]})
    log.info("model written to %s", out / "model")
    return EXIT_OK


def cmd_index(cfg: RunConfig, overwrite: bool = False) -> int:
    icfg = cfg.index_config()
    encoder, model_dir = _load_model(cfg.model_dir)
    train_recs, _ = _load_records(cfg)
    if not train_recs:
        raise ConfigError(f"no training images under {cfg.dataset_root}/{cfg.category}/train/good")
    out = _prepare_output(Path(cfg.output_dir), overwrite,
                          [index_path(Path(""), s).name for s in inf.SCALES] + [MANIFEST_NAME])
    indexes = inf.build_scale_indexes([r.pixels for r in train_recs], inf.PatchFeaturizer(encoder), icfg)
    produced = []
    for scale, index in indexes.items():
        path = index_path(out, scale)
        fidx.save_index(index, path)
        produced.append(path)
        log.info("%s index: %d features of dimension %d", scale, len(index), index.dim)
    write_manifest(out, "index", cfg, {"model.psvd": model_dir / model_mod.MODEL_FILE}, produced,
                   {"train_images": [r.id for r in train_recs]})
    return EXIT_OK


def _collect_images(cfg: RunConfig) -> List[Tuple[str, Path]]:
    """(id, path) pairs: explicit files/directories, or the dataset's test split."""
    pairs: List[Tuple[str, Path]] = []
    if cfg.images:
        for item in (s for s in cfg.images.split(",") if s):
            p = Path(item)
            if p.is_dir():
                pairs += [(str(f.relative_to(p).with_suffix("")), f)
                          for f in sorted(p.rglob("*")) if f.suffix.lower() == ".png"]
            elif p.is_file():
                pairs.append((p.stem, p))
            else:
                raise ConfigError(f"image path not found: {p}")
    else:
        test_dir = _require_dir(str(Path(cfg.dataset_root) / cfg.category / "test"), "test image directory")
        pairs = [(f"test/{f.parent.name}/{f.stem}", f)
                 for f in sorted(test_dir.glob("*/*")) if f.suffix.lower() == ".png"]
    if not pairs:
        raise ConfigError("no images to inspect")
    ids = [i for i, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ConfigError("image ids collide; pass directories instead of same-named files")
    return pairs


def cmd_infer(cfg: RunConfig, overwrite: bool = False) -> int:
    encoder, model_dir = _load_model(cfg.model_dir)
    index_dir = _require_dir(cfg.index_dir, "index directory")
    indexes = {}
    for scale in inf.SCALES:
        path = index_path(index_dir, scale)
        if not path.is_file():
            raise ConfigError(f"missing index file: {path}")
        try:
            indexes[scale] = fidx.load_index(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    images = _collect_images(cfg)
    out = _prepare_output(Path(cfg.output_dir), overwrite, ["maps", SCORES_NAME, MANIFEST_NAME])
    (out / "maps").mkdir()
    featurizer = inf.PatchFeaturizer(encoder)
    lines, produced = [], []
    for image_id, path in images:
        t0 = time.perf_counter()
        pixels = data_mod.preprocess(path)
        res = inf.inspect_image(pixels, featurizer, indexes)
        stem = image_id.replace("/", "__")
        raw_path, pgm_path = out / "maps" / f"{stem}.raw", out / "maps" / f"{stem}.pgm"
        inf.write_raw_map(raw_path, res.maps["multi"])
        vmax = inf.write_pgm(pgm_path, res.maps["multi"])
        produced += [raw_path, pgm_path]
        lines.append(json.dumps({
            "id": image_id, "score": res.image_score, "pgm_max": vmax,
            "raw_map": str(raw_path.relative_to(out)), "pgm_map": str(pgm_path.relative_to(out)),
        }, sort_keys=True))
        log.info("%s score=%.6g time=%.3fs", image_id, res.image_score, time.perf_counter() - t0)
    (out / SCORES_NAME).write_text("\n".join(lines) + "\n")
    produced.append(out / SCORES_NAME)
    inputs = {"model.psvd": model_dir / model_mod.MODEL_FILE}
    inputs.update({f"index_{s}.psix": index_path(index_dir, s) for s in inf.SCALES})
    write_manifest(out, "infer", cfg, inputs, produced, {"images": [i for i, _ in images]})
    return EXIT_OK


def read_scores(infer_dir: Path) -> List[dict]:
    path = infer_dir / SCORES_NAME
    if not path.is_file():
        raise ConfigError(f"missing score manifest: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _match_entry(entries: Dict[str, dict], record_id: str) -> dict:
    for key in (record_id, record_id.split("/", 1)[-1]):
        if key in entries:
            return entries[key]
    raise ConfigError(f"no inference output for test image {record_id}")


def cmd_eval(cfg: RunConfig, overwrite: bool = False, baseline_raw: bool = False,
             baseline_random: bool = False) -> int:
    infer_dir = _require_dir(cfg.infer_dir, "inference output directory")
    entries = {e["id"]: e for e in read_scores(infer_dir)}
    train_recs, test_recs = _load_records(cfg)
    if not test_recs:
        raise ConfigError(f"no test images under {cfg.dataset_root}/{cfg.category}/test")
    out = _prepare_output(Path(cfg.output_dir), overwrite,
                          ["report.json", "report.txt", f"scores_{cfg.category}.csv", MANIFEST_NAME])
    scores, maps, masks = [], [], []
    for rec in test_recs:
        entry = _match_entry(entries, rec.id)
        raw = inf.read_raw_map(infer_dir / entry["raw_map"])
        scores.append(float(entry["score"]))
        maps.append(raw.values)
        masks.append(rec.mask if rec.mask is not None else np.zeros(raw.shape, bool))
    labels = np.array([r.is_abnormal for r in test_recs])
    s = np.asarray(scores)
    img_auc = auroc(LabeledScores(s[~labels], s[labels])) if labels.any() and not labels.all() else None
    pix_auc = pixel_auroc(maps, masks) if any(m.any() for m in masks) else None
    report = CategoryReport(cfg.category, img_auc, pix_auc, int((~labels).sum()), int(labels.sum()))

    if cfg.index_dir:
        index_dir = _require_dir(cfg.index_dir, "index directory")
        rng = np.random.default_rng(cfg.seed)
        for scale in inf.SCALES:
            feats = fidx.load_index(index_path(index_dir, scale)).features
            if len(feats) > cfg.id_samples:
                feats = feats[np.sort(rng.choice(len(feats), cfg.id_samples, replace=False))]
            report.intrinsic_dimension[scale] = intrinsic_dimension(feats)
    base_imgs = [r.pixels for r in train_recs[:cfg.baseline_train_images]]
    if baseline_raw:
        report.baselines["raw"] = baseline_raw_patch(base_imgs, test_recs, cfg.index_config())
    if baseline_random:
        report.baselines["random"] = baseline_random_encoder(base_imgs, test_recs, cfg.seed, cfg.embed_dim,
                                                             cfg.index_config())

    ev = EvalReport([report])
    (out / "report.json").write_text(json.dumps(ev.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(ev.to_text())
    csv_path = out / f"scores_{cfg.category}.csv"
    rows = ["id,label,score"] + [f"{r.id},{r.label},{repr(v)}" for r, v in zip(test_recs, scores)]
    csv_path.write_text("\n".join(rows) + "\n")
    write_manifest(out, "eval", cfg, {SCORES_NAME: infer_dir / SCORES_NAME},
                   [out / "report.json", out / "report.txt", csv_path])
    sys.stdout.write(ev.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable, applied after --config)")
    p.add_argument("--overwrite", action="store_true", help="replace outputs of an earlier run")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics so reruns are byte-identical")
    p.add_argument("--category", help="dataset category (config key: category)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


# flag attribute -> config key, per command
FLAG_KEYS = {
    "synth": {"out": "dataset_root", "category": "category", "style": "style", "seed": "seed",
              "deterministic": "deterministic"},
    "train": {"dataset": "dataset_root", "category": "category", "out": "output_dir", "seed": "seed",
              "steps": "steps", "deterministic": "deterministic"},
    "index": {"model": "model_dir", "dataset": "dataset_root", "category": "category", "out": "output_dir",
              "deterministic": "deterministic"},
    "infer": {"model": "model_dir", "index": "index_dir", "images": "images", "dataset": "dataset_root",
              "category": "category", "out": "output_dir", "deterministic": "deterministic"},
    "eval": {"infer": "infer_dir", "dataset": "dataset_root", "category": "category", "out": "output_dir",
             "index": "index_dir", "deterministic": "deterministic"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchsvdd",
        description="Patch-level one-class anomaly detection and segmentation.",
        epilog=f"Configuration keys: {', '.join(RunConfig.keys())}. "
               "Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numerical failure.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset category in MVTec layout")
    _common(p)
    p.add_argument("--out", help="dataset root to write into (config key: dataset_root)")
    p.add_argument("--style", help="stripes | checker | blobs-texture | placed-object")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--check", action="store_true",
                   help="regenerate in a scratch directory and verify the existing files are byte-identical")

    p = sub.add_parser("train", help="train the small and big encoders on normal images")
    _common(p)
    p.add_argument("--dataset", help="dataset root (config key: dataset_root)")
    p.add_argument("--out", help="run directory for model, loss curves and manifest")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--steps", type=int, help="optimiser steps per scale")

    p = sub.add_parser("index", help="store the features of all normal training patches")
    _common(p)
    p.add_argument("--model", help="model directory written by train")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--out", help="directory for index_small.psix and index_big.psix")

    p = sub.add_parser("infer", help="anomaly maps and image scores for new images")
    _common(p)
    p.add_argument("--model", help="model directory written by train")
    p.add_argument("--index", help="directory written by index")
    p.add_argument("--images", nargs="+",
                   help="PNG files or directories (default: the dataset category's test split)")
    p.add_argument("--dataset", help="dataset root, used when --images is absent")
    p.add_argument("--out", help="directory for maps, scores.jsonl and manifest")

    p = sub.add_parser("eval", help="image and pixel AUROC report for an inference run")
    _common(p)
    p.add_argument("--infer", help="directory written by infer")
    p.add_argument("--dataset", help="dataset root with ground-truth masks")
    p.add_argument("--out", help="directory for report.json, report.txt and the score CSV")
    p.add_argument("--index", help="index directory; enables the intrinsic-dimension column")
    p.add_argument("--baseline-raw", action="store_true", help="also score with raw-pixel patch features")
    p.add_argument("--baseline-random", action="store_true", help="also score with untrained random encoders")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args, FLAG_KEYS[args.command])
        limit = contextlib.nullcontext()
        if cfg.deterministic:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=1)
        with limit:
            if args.command == "synth":
                return cmd_synth(cfg, args.overwrite, args.check)
            if args.command == "train":
                return cmd_train(cfg, args.overwrite)
            if args.command == "index":
                return cmd_index(cfg, args.overwrite)
            if args.command == "infer":
                return cmd_infer(cfg, args.overwrite)
            return cmd_eval(cfg, args.overwrite, args.baseline_raw, args.baseline_random)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

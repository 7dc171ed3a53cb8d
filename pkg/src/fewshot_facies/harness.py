"""Config-driven experiment runner for the leave-one-out few-shot protocol."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from . import baselines as bl
from .backbone import FewShotSegmenter, NetworkConfig
from .checkpoint import load_checkpoint, model_manifest, save_checkpoint
from .engine import TargetData, TrainConfig, meta_test, meta_train
from .episodes import SourceDataset, build_support_set, source_from_volume
from .metrics import MetricsReport, evaluate_masks
from .ssl import ContrastiveConfig, load_encoder_into, pretrain_encoder, save_encoder
from .volume import (SeismicVolume, SplitSpec, extract_patches, load_volume, normalize, save_volume,
                     synthesize_layered_volume)

log = logging.getLogger("fewshot_facies")

STAGES = ("preprocess", "pretrain", "train", "evaluate")

DEFAULT_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class StageOrderError(RuntimeError):
    pass


@dataclass
class DatasetEntry:
    id: str
    path: str
    class_count: int
    split: SplitSpec


@dataclass
class ExperimentConfig:
    name: str
    datasets: List[DatasetEntry]
    leave_out: str
    shots: int = 5
    support_mode: str = "spanning"
    preset: str = "toy"
    axes: List[str] = field(default_factory=lambda: ["inline", "crossline"])
    preprocessing: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    ssl: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0
    checkpoint: Optional[str] = None
    dump_probs: bool = False
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = field(default=Path("."), repr=False)

    @property
    def sources(self) -> List[DatasetEntry]:
        return [d for d in self.datasets if d.id != self.leave_out]

    @property
    def target(self) -> DatasetEntry:
        return next(d for d in self.datasets if d.id == self.leave_out)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def config_hash(self) -> str:
        body = dict(self.raw, seed=self.seed)
        body.pop("output_dir", None)
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def network_config(self) -> NetworkConfig:
        if self.preset == "toy":
            return NetworkConfig.toy()
        if self.preset in ("full", "resnet50-like"):
            return NetworkConfig.full()
        raise ConfigError(f"unknown preset {self.preset!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dict(self.train, shots=self.shots, seed=self.seed))

    def ssl_config(self) -> ContrastiveConfig:
        keys = set(ContrastiveConfig.__dataclass_fields__)
        return ContrastiveConfig(**dict({k: v for k, v in self.ssl.items() if k in keys}, seed=self.seed))


def parse_config(raw: dict, base_dir=".", seed: Optional[int] = None, output_dir: Optional[str] = None,
                 check_files: bool = True) -> ExperimentConfig:
    """Validate a JSON experiment document; file references are checked before any compute."""
    raw = json.loads(json.dumps(raw))
    try:
        datasets = [DatasetEntry(d["id"], d["path"], int(d["class_count"]), SplitSpec.from_dict(d["split"]))
                    for d in raw["datasets"]]
        cfg = ExperimentConfig(
            name=raw.get("name", "experiment"),
            datasets=datasets,
            leave_out=raw["leave_out"],
            shots=int(raw.get("shots", 5)),
            support_mode=raw.get("support_mode", "spanning"),
            preset=raw.get("preset", "toy"),
            axes=list(raw.get("axes", ["inline", "crossline"])),
            preprocessing=dict(raw.get("preprocessing", {})),
            train=dict(raw.get("train", {})),
            ssl=dict(raw.get("ssl", {})),
            baselines=dict(raw.get("baselines", {})),
            output_dir=output_dir or raw.get("output_dir", "runs"),
            seed=int(seed if seed is not None else raw.get("seed", 0)),
            checkpoint=raw.get("checkpoint"),
            dump_probs=bool(raw.get("dump_probs", False)),
            raw=raw,
            base_dir=Path(base_dir),
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed config: missing or invalid {e}") from None
    ids = [d.id for d in cfg.datasets]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique")
    if cfg.leave_out not in ids:
        raise ConfigError(f"leave_out {cfg.leave_out!r} is not a configured dataset")
    if not cfg.sources:
        raise ConfigError("need at least one source dataset besides the leave-out target")
    if cfg.shots not in (1, 5):
        raise ConfigError("shots must be 1 or 5")
    if cfg.support_mode not in ("spanning", "nearest"):
        raise ConfigError(f"unknown support_mode {cfg.support_mode!r}")
    try:
        cfg.network_config()
        cfg.train_config()
        cfg.ssl_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if check_files:
        for d in cfg.datasets:
            sidecar = cfg.resolve(d.path)
            if sidecar.suffix != ".json":
                sidecar = sidecar.with_suffix(".json")
            if not sidecar.exists():
                raise ConfigError(f"dataset {d.id!r}: file not found: {sidecar}")
        if cfg.checkpoint and not cfg.resolve(cfg.checkpoint).exists():
            raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    return cfg


def load_config(path, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    output_dir = output_dir or os.environ.get("FEWSHOT_FACIES_OUT")
    return parse_config(raw, base_dir=path.parent, seed=seed, output_dir=output_dir)


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname, "logger": record.name, "msg": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True)


def _log(msg: str, **fields):
    log.info(msg, extra={"fields": fields})


class Run:
    """A run directory bound to one config hash."""

    def __init__(self, cfg: ExperimentConfig, tag: str = ""):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        label = f"{cfg.name}-{tag}" if tag else cfg.name
        self.dir = cfg.resolve(cfg.output_dir) / f"{label}-{self.hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._handler = logging.FileHandler(self.dir / "log.ndjson")
        self._handler.setFormatter(JsonLineFormatter())
        log.addHandler(self._handler)
        log.setLevel(logging.INFO)
        self.write_json("config.json", cfg.raw)

    def close(self):
        log.removeHandler(self._handler)
        self._handler.close()

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        body = dict(payload, config_hash=self.hash)
        p = self.path(name)
        p.write_text(json.dumps(body, indent=2, sort_keys=True))
        return p

    @property
    def checkpoint_path(self) -> Path:
        return self.dir / "checkpoints" / "model.ckpt"


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def load_datasets(cfg: ExperimentConfig) -> Dict[str, SeismicVolume]:
    pre = cfg.preprocessing
    clip = pre.get("clip", [5.0, 95.0])
    crop = pre.get("depth_crop")
    out = {}
    for d in cfg.datasets:
        vol = load_volume(cfg.resolve(d.path))
        if vol.class_count != d.class_count:
            raise ConfigError(f"dataset {d.id!r}: sidecar class_count {vol.class_count} != config {d.class_count}")
        d.split.validate(vol.shape)
        out[d.id] = normalize(vol, clip=tuple(clip) if clip else None, depth_crop=tuple(crop) if crop else None)
    return out


def stage_preprocess(run: Run) -> Dict[str, SeismicVolume]:
    volumes = load_datasets(run.cfg)
    summary = {}
    for ds_id, vol in volumes.items():
        save_volume(vol, run.path("preprocessed", ds_id))
        summary[ds_id] = {"shape": list(vol.shape), "class_count": vol.class_count,
                          "min": float(vol.intensities.min()), "max": float(vol.intensities.max())}
    run.write_json("preprocess.json", {"datasets": summary})
    return volumes


def _preprocessed(run: Run) -> Dict[str, SeismicVolume]:
    out = {}
    for d in run.cfg.datasets:
        p = run.dir / "preprocessed" / f"{d.id}.json"
        if not p.exists():
            return stage_preprocess(run)
        out[d.id] = load_volume(p)
    return out


def _source_pools(run: Run, volumes) -> tuple:
    pre = run.cfg.preprocessing
    ps, st = int(pre.get("patch_size", 64)), int(pre.get("stride", pre.get("patch_size", 64)))
    axes = run.cfg.axes
    train = [source_from_volume(volumes[d.id], d.split, "train", ps, st, d.id, axes) for d in run.cfg.sources]
    val = [source_from_volume(volumes[d.id], d.split, "val", ps, st, d.id, axes) for d in run.cfg.sources]
    return train, val


def stage_pretrain(run: Run, volumes) -> Optional[Path]:
    cfg = run.cfg
    if not cfg.ssl.get("enabled", False):
        return None
    ps = int(cfg.ssl.get("patch_size", 48))
    st = int(cfg.ssl.get("stride", 16))
    # unlabeled intensities of every dataset, target included
    patches = np.stack([p.pixels for v in volumes.values() for ax in cfg.axes
                        for p in extract_patches(SeismicVolume(v.intensities, None, v.class_count), ax, ps, st)])
    max_patches = cfg.ssl.get("max_patches")
    if max_patches and len(patches) > max_patches:
        keep = np.random.default_rng([cfg.seed, 20]).choice(len(patches), max_patches, replace=False)
        patches = patches[np.sort(keep)]
    _seed_everything(cfg.seed)
    res = pretrain_encoder(patches, cfg.ssl_config(), cfg.network_config(), log_path=run.path("logs", "ssl.ndjson"))
    path = save_encoder(res.encoder, run.path("checkpoints", "ssl_encoder.ckpt"), config_hash=run.hash)
    run.write_json("ssl_report.json", {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
                                       "top1": res.top1, "top5": res.top5, "patches": int(len(patches))})
    return path


def build_model(run: Run, ssl_ckpt: Optional[Path]) -> FewShotSegmenter:
    _seed_everything(run.cfg.seed)
    model = FewShotSegmenter(run.cfg.network_config())
    if ssl_ckpt is not None:
        load_encoder_into(model, ssl_ckpt)
    return model


def stage_train(run: Run, volumes, ssl_ckpt: Optional[Path] = None) -> FewShotSegmenter:
    train, val = _source_pools(run, volumes)
    model = build_model(run, ssl_ckpt)
    res = meta_train(model, train, val, run.cfg.train_config(), log_path=run.path("logs", "train.ndjson"))
    save_checkpoint(run.checkpoint_path, model.state_dict(),
                    model_manifest(model, "meta-train", config_hash=run.hash,
                                   sources=[d.id for d in run.cfg.sources]))
    run.write_json("train_summary.json", {"best_val_loss": res.best_val_loss, "best_epoch": res.best_epoch,
                                          "final_val_loss": res.final_val_loss,
                                          "steps": sum(1 for h in res.history if h["loss"] is not None)})
    return model


def load_model(run: Run, path: Optional[Path] = None) -> FewShotSegmenter:
    if path is None:
        path = run.cfg.resolve(run.cfg.checkpoint) if run.cfg.checkpoint else run.checkpoint_path
    if not Path(path).exists():
        raise StageOrderError("evaluation needs a meta-train checkpoint: run the train stage or set 'checkpoint'")
    model = FewShotSegmenter(run.cfg.network_config())
    state, _ = load_checkpoint(path, expect={"preset": model.cfg.preset, "widths": list(model.cfg.widths),
                                             "gp_strides": list(model.cfg.gp_strides)})
    model.load_state_dict(state)
    return model


def _dump_predictions(run: Run, axis: str, images, preds, probs=None):
    stack = SeismicVolume(np.stack(images).astype(np.float32), np.stack(preds).astype(np.uint8),
                          run.cfg.target.class_count)
    save_volume(stack, run.path("predictions", f"{axis}"))
    if probs is not None:
        arr = np.stack(probs).astype("<f4")
        arr.tofile(run.path("predictions", f"{axis}.probs.f32"))
        (run.dir / "predictions" / f"{axis}.probs.json").write_text(
            json.dumps({"shape": list(arr.shape), "dtype": "f32", "layout": "query, class, row, col",
                        "config_hash": run.hash}, indent=2))


def stage_evaluate(run: Run, volumes, model: Optional[FewShotSegmenter] = None) -> Dict[str, MetricsReport]:
    cfg = run.cfg
    model = model or load_model(run)
    target = TargetData(volumes[cfg.leave_out], cfg.target.split, cfg.leave_out)
    result = meta_test(model, target, cfg.shots, cfg.support_mode, axes=cfg.axes, keep_probs=True)
    for axis, report in result.reports.items():
        run.write_json(f"reports/metrics_{axis}.json", dict(report.to_dict(), axis=axis, method="fewshot",
                                                            class_count=target.class_count))
        preds = result.predictions[axis]
        images = [target.image(axis, p.index) for p in preds]
        truths = [target.labels(axis, p.index, "metrics") for p in preds]
        _dump_predictions(run, axis, images, [p.aggregated for p in preds],
                          [p.per_class_probs for p in preds] if cfg.dump_probs else None)
        emit_figures([p.aggregated for p in preds[:4]], truths[:4], images=images[:4],
                     out_dir=run.path("figures"), prefix=f"{axis}_", metadata={"config_hash": run.hash})
    run.write_json("label_access.json", {"log": [list(a) for a in target.access_log]})
    return result.reports


def run_experiment(cfg: ExperimentConfig, stages: Optional[Sequence[str]] = None) -> Path:
    """Run the requested stages (all by default) and return the run directory.

    A failing stage raises :class:`StageError`; artifacts already written stay in place.
    """
    stages = list(stages or STAGES)
    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}")
    run = Run(cfg)
    _seed_everything(cfg.seed)
    current = "preprocess"
    try:
        t0 = time.time()
        volumes = stage_preprocess(run) if "preprocess" in stages else _preprocessed(run)
        ssl_ckpt = None
        model = None
        if "pretrain" in stages:
            current = "pretrain"
            ssl_ckpt = stage_pretrain(run, volumes)
        elif (run.dir / "checkpoints" / "ssl_encoder.ckpt").exists() and cfg.ssl.get("enabled", False):
            ssl_ckpt = run.dir / "checkpoints" / "ssl_encoder.ckpt"
        if "train" in stages:
            current = "train"
            model = stage_train(run, volumes, ssl_ckpt)
        if "evaluate" in stages:
            current = "evaluate"
            reports = stage_evaluate(run, volumes, model)
            _log("evaluation done", stage="evaluate",
                 **{f"pa_{ax}": r.pa for ax, r in reports.items()})
        _log("run complete", stages=stages, seconds=round(time.time() - t0, 2))
    except (ConfigError, StageOrderError):
        raise
    except Exception as e:
        _log("stage failed", stage=current, error=repr(e))
        raise StageError(current, e) from e
    finally:
        run.close()
    return run.dir


def run_baseline(cfg: ExperimentConfig, variant: str) -> Path:
    """Train and evaluate one comparator; results land in their own run directory."""
    bcfg_raw = dict(cfg.baselines, variant=variant, seed=cfg.seed, shots=cfg.shots)
    bcfg_raw.setdefault("class_count", cfg.target.class_count)
    bcfg = bl.BaselineConfig(**{k: v for k, v in bcfg_raw.items() if k in bl.BaselineConfig.__dataclass_fields__})
    sub = parse_config(dict(cfg.raw, baseline_variant=variant), cfg.base_dir, cfg.seed, cfg.output_dir,
                       check_files=False)
    run = Run(sub, tag=variant)
    current = variant
    try:
        volumes = load_datasets(cfg)
        target_vol = volumes[cfg.leave_out]
        split = cfg.target.split
        pre = cfg.preprocessing
        ps, st = int(pre.get("patch_size", 64)), int(pre.get("stride", pre.get("patch_size", 64)))
        reports = {}
        _seed_everything(cfg.seed)
        if variant == "fewshot-target-only":
            train = source_from_volume(target_vol, split, "train", ps, st, cfg.leave_out, cfg.axes)
            val = source_from_volume(target_vol, split, "val", ps, st, cfg.leave_out, cfg.axes)
            model, _ = bl.train_baseline1(train, val, cfg.train_config(), cfg.network_config(),
                                          log_path=run.path("logs", "train.ndjson"))
            target = TargetData(target_vol, split, cfg.leave_out)
            reports = meta_test(model, target, cfg.shots, cfg.support_mode, axes=cfg.axes,
                                keep_probs=False).reports
        elif variant == "resnet-unet":
            train = source_from_volume(target_vol, split, "train", ps, st, cfg.leave_out, cfg.axes)
            val = source_from_volume(target_vol, split, "val", ps, st, cfg.leave_out, cfg.axes)
            model, _ = bl.train_resnet_unet(train, bcfg, val, cfg.network_config())
            reports = _eval_unet_per_axis(model, target_vol, split, cfg.axes)
        else:
            # source classes share ids 1..C_s, so a head sized to the largest C covers every source
            c_src = max(volumes[d.id].class_count for d in cfg.sources)
            pools = [source_from_volume(volumes[d.id], d.split, "train", ps, st, d.id, cfg.axes) for d in cfg.sources]
            merged = SourceDataset("sources", np.concatenate([p.images for p in pools]),
                                   np.concatenate([p.masks for p in pools]), c_src)
            src_model, _ = bl.train_resnet_unet(merged, bl.BaselineConfig(**dict(vars(bcfg), class_count=c_src)),
                                                net_cfg=cfg.network_config())
            for axis in cfg.axes:
                train_idx = [i for a, b in split.train_ranges.get(axis, []) for i in range(a, b)]
                if not train_idx:
                    continue
                sup = build_support_set(train_idx, cfg.shots, "spanning")
                tuned, _ = bl.transfer_finetune(src_model, [target_vol.slice_image(axis, i) for i in sup],
                                                [target_vol.slice_mask(axis, i) for i in sup], cfg.shots, bcfg,
                                                patch_size=ps, stride=st)
                reports.update(_eval_unet_per_axis(tuned, target_vol, split, [axis]))
        for axis, report in reports.items():
            run.write_json(f"reports/metrics_{axis}.json", dict(report.to_dict(), axis=axis, method=variant,
                                                                class_count=target_vol.class_count))
    except Exception as e:
        _log("stage failed", stage=current, error=repr(e))
        raise StageError(current, e) from e
    finally:
        run.close()
    return run.dir


def _eval_unet_per_axis(model, volume: SeismicVolume, split: SplitSpec, axes) -> Dict[str, MetricsReport]:
    out = {}
    for axis in axes:
        idx = [i for a, b in split.test_ranges.get(axis, []) for i in range(a, b)]
        if idx:
            out[axis] = bl.evaluate_resnet_unet(model, [volume.slice_image(axis, i) for i in idx],
                                                [volume.slice_mask(axis, i) for i in idx])
    return out


def emit_figures(predictions: Sequence[np.ndarray], truths: Sequence[np.ndarray], images=None,
                 palette=None, out_dir=".", prefix: str = "", margin: int = 4,
                 metadata: Optional[dict] = None) -> List[Path]:
    """One PNG per slice: input | truth | prediction, separated by ``margin`` white pixels.

    Panel size is ``(3 W + 4 margin) x (H + 2 margin)``.
    """
    palette = [tuple(int(v) for v in c) for c in (palette or DEFAULT_PALETTE)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lut = np.array([(0, 0, 0)] + palette, dtype=np.uint8)
    paths = []
    for k, (pred, truth) in enumerate(zip(predictions, truths)):
        pred, truth = np.asarray(pred), np.asarray(truth)
        c = int(max(pred.max(), truth.max()))
        if min(pred.min(), truth.min()) < 1:
            raise ValueError("masks must be valued in 1..C")
        if c > len(palette):
            raise ValueError(f"palette has {len(palette)} colours, masks need {c}")
        h, w = truth.shape
        if images is not None:
            grey = np.clip(np.asarray(images[k]), 0, 255).astype(np.uint8)
        else:
            grey = np.zeros((h, w), np.uint8)
        canvas = np.full((h + 2 * margin, 3 * w + 4 * margin, 3), 255, np.uint8)
        for j, panel in enumerate((np.repeat(grey[..., None], 3, -1), lut[truth], lut[pred])):
            x0 = margin + j * (w + margin)
            canvas[margin:margin + h, x0:x0 + w] = panel
        info = PngImagePlugin.PngInfo()
        for key, val in (metadata or {}).items():
            info.add_text(key, str(val))
        path = out_dir / f"{prefix}{k:03d}.png"
        Image.fromarray(canvas).save(path, pnginfo=info)
        paths.append(path)
    return paths


METRIC_KEYS = ("pa", "mca", "fwiou", "fwf1")


def compare_runs(run_dirs: Sequence) -> dict:
    """Tabulate PA/MCA/FwIoU/FwF1 per method and axis straight from each run's report JSONs."""
    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    rows, warnings = [], []
    class_counts = set()
    for d in run_dirs:
        reports = sorted((d / "reports").glob("metrics_*.json"))
        if not reports:
            raise ValueError(f"{d} has no reports")
        for p in reports:
            rep = json.loads(p.read_text())
            class_counts.add(rep.get("class_count"))
            rows.append({"run": d.name, "method": rep.get("method", d.name), "axis": rep.get("axis", p.stem[8:]),
                         "class_count": rep.get("class_count"), **{k: rep[k] for k in METRIC_KEYS}})
    if len(class_counts) > 1:
        warnings.append(f"runs disagree on class count: {sorted(c for c in class_counts if c is not None)}")
    tables = {}
    for axis in sorted({r["axis"] for r in rows}):
        sel = [r for r in rows if r["axis"] == axis]
        best = {k: max(r[k] for r in sel) for k in METRIC_KEYS}
        for r in sel:
            r["best"] = [k for k in METRIC_KEYS if r[k] == best[k]]
        tables[axis] = sel
    return {"tables": tables, "warnings": warnings, "text": format_comparison(tables, warnings)}


def format_comparison(tables: dict, warnings: Sequence[str] = ()) -> str:
    lines = []
    for axis, rows in tables.items():
        lines.append(f"[{axis}]")
        lines.append(f"{'method':<28}" + "".join(f"{k.upper():>10}" for k in METRIC_KEYS))
        for r in rows:
            cells = "".join(f"{r[k]:>9.4f}{'*' if k in r['best'] else ' '}" for k in METRIC_KEYS)
            lines.append(f"{r['method']:<28}{cells}")
        lines.append("")
    lines.extend(f"warning: {w}" for w in warnings)
    return "\n".join(lines)


def make_toy_config(directory, seed: int = 0, shape=(64, 64, 64), class_counts=(4, 6, 5),
                    leave_out: Optional[str] = None, undulation: float = 6.0, noise_sd: float = 10.0,
                    train: Optional[dict] = None, ssl: Optional[dict] = None) -> Path:
    """Write three synthetic layered volumes and a leave-one-out config next to them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_il, n_xl = shape[0], shape[1]
    ps = min(64, shape[1], shape[2])
    datasets = []
    for c in class_counts:
        ds_id = f"syn{c}"
        vol = synthesize_layered_volume(100 * seed + c, shape, c, undulation, noise_sd)
        save_volume(vol, directory / "data" / ds_id)
        split = {}
        for part, (a, b) in {"train": (0, 0.625), "val": (0.625, 0.75), "test": (0.75, 1.0)}.items():
            split[part] = {"inline": [[int(a * n_il), int(b * n_il)]], "crossline": [[int(a * n_xl), int(b * n_xl)]]}
        datasets.append({"id": ds_id, "path": f"data/{ds_id}.json", "class_count": c, "split": split})
    raw = {
        "name": "toy",
        "seed": seed,
        "preset": "toy",
        "datasets": datasets,
        "leave_out": leave_out or datasets[-1]["id"],
        "shots": 5,
        "support_mode": "spanning",
        "preprocessing": {"clip": [5, 95], "patch_size": ps, "stride": ps},
        "train": train or {"batch_size": 4, "learning_rate": 1e-3, "weight_decay": 1e-4, "max_epochs": 6,
                           "steps_per_epoch": 100, "val_episodes": 8},
        "ssl": ssl or {"enabled": False, "epochs": 5, "learning_rate": 1e-3, "projection_dim": 32,
                       "patch_size": min(48, ps), "stride": 16, "max_patches": 512},
        "baselines": {"batch_size": 4, "learning_rate": 1e-3, "weight_decay": 1e-4, "steps": 300,
                      "finetune_steps": 50},
        "output_dir": "runs",
    }
    path = directory / "experiment.json"
    path.write_text(json.dumps(raw, indent=2))
    return path

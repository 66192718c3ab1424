"""Batch command surface: ``prepare``, ``train``, ``eval``, ``export-seg``.

One declarative JSON config drives every command; the scale preset (desk or
paper) supplies defaults, the config file overrides the preset, and
``--set section.field=value`` flags override the file.  All outputs land
under the run's output directory: preprocessed volume caches, the serialized
task mix, checkpoint series with a best-checkpoint marker, evaluation
reports, and exported segmentation grids.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import FrameSpec, ModelConfig, TrainConfig, preset
from .errors import IngestionError, SchemaError, SelectionError, TaskvolError
from .losses import BatchItemTarget
from .maskpatch import PatchTarget, patchify_mask, unpack_mask
from .metrics import ScoredSet, build_report
from .neuralcore import ParameterStore, TaskModel, load_checkpoint
from .taskbank import (TaskBank, TaskInstance, build_training_mix,
                       build_vocabulary, decompose_dataset, load_manifest,
                       tokenize)
from .trainer import select_checkpoint, train
from .volprep import (apply_augment, body_center, clip_hu, finalize_input,
                      load_cache, load_volume, resample_and_frame,
                      sample_augment_params, save_cache, save_volume,
                      z_keep_range, VolumeGrid)

LUNG_MASK_KEY = "seg_lungs"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    manifest: Path
    out_dir: Path
    seed: int = 0
    preset_name: str = "desk"
    frame: FrameSpec = field(default_factory=FrameSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    exclude: tuple[str, ...] = ()

    @property
    def cache_dir(self) -> Path:
        return self.out_dir / "cache"

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoints"

    @property
    def mix_path(self) -> Path:
        return self.out_dir / "mix.json"


_TUPLE_FIELDS = {"frame_mm", "crop_mm", "input_shape"}


def _coerce_section(cls, base, values: dict):
    clean = {}
    for key, value in values.items():
        if key not in {f.name for f in dataclasses.fields(cls)}:
            raise SchemaError(f"unknown {cls.__name__} field {key!r}")
        if key in _TUPLE_FIELDS:
            value = tuple(int(v) for v in value)
        clean[key] = value
    return dataclasses.replace(base, **clean)


def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise SchemaError(f"override {text!r} is not of the form "
                          "section.field=value")
    path, raw = text.split("=", 1)
    if "." not in path:
        raise SchemaError(f"override key {path!r} needs a section prefix "
                          "(frame., model., train., or run.)")
    section, name = path.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def load_run_config(config_path=None, overrides=(), manifest=None,
                    out_dir=None, seed=None, preset_name=None) -> RunConfig:
    """Merge preset defaults <- config file <- command-line overrides."""
    data: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise SchemaError(f"config file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    sections = {"frame": dict(data.get("frame", {})),
                "model": dict(data.get("model", {})),
                "train": dict(data.get("train", {})),
                "run": {}}
    for text in overrides:
        section, name, value = _parse_override(text)
        if section not in sections:
            raise SchemaError(f"unknown override section {section!r}")
        sections[section][name] = value

    name = preset_name or sections["run"].pop("preset", None) \
        or data.get("preset", "desk")
    base = preset(name)
    frame = _coerce_section(FrameSpec, base["frame"], sections["frame"])
    model = _coerce_section(ModelConfig, base["model"], sections["model"])
    train_cfg = _coerce_section(TrainConfig, base["train"], sections["train"])

    run_section = sections["run"]
    manifest = manifest or run_section.pop("manifest", None) \
        or data.get("manifest")
    out_dir = out_dir or run_section.pop("out_dir", None) \
        or data.get("out_dir")
    if seed is None:
        seed = run_section.pop("seed", data.get("seed", 0))
    exclude = tuple(run_section.pop("exclude", data.get("exclude", [])))
    if run_section:
        raise SchemaError(f"unknown run override {sorted(run_section)!r}")
    if manifest is None:
        raise SchemaError("no manifest given (config file or --manifest)")
    if out_dir is None:
        raise SchemaError("no output directory given (config file or "
                          "--out-dir)")
    manifest = Path(manifest)
    if not manifest.is_file():
        raise SchemaError(f"manifest {manifest} does not exist")
    seed = int(seed)
    model = dataclasses.replace(model, seed=model.seed if "seed" in
                                sections["model"] else seed)
    train_cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed if "seed"
                                    in sections["train"] else seed)
    return RunConfig(manifest=manifest, out_dir=Path(out_dir), seed=seed,
                     preset_name=name, frame=frame, model=model,
                     train=train_cfg, exclude=exclude)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _content_digest(record, frame: FrameSpec) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(dataclasses.asdict(frame), sort_keys=True).encode())
    h.update(Path(record.volume).read_bytes())
    for key in sorted(record.masks):
        h.update(key.encode())
        h.update(Path(record.masks[key]).read_bytes())
    return h.hexdigest()


def _cache_stem(volume_ref: str) -> str:
    return hashlib.sha256(volume_ref.encode()).hexdigest()[:16]


def _slice_z(grid: VolumeGrid, lo: int, hi: int) -> VolumeGrid:
    affine = np.asarray(grid.affine, dtype=np.float64).copy()
    affine[:3, 3] += affine[:3, 2] * lo
    return dataclasses.replace(grid, data=grid.data[:, :, lo:hi + 1],
                               affine=affine)


def _prepare_record(record, frame: FrameSpec, cache_dir: Path) -> dict:
    """Preprocess one record: clip, lung z-crop when a lung mask is
    present, body centering, isotropic framing; masks follow the exact
    same geometry with nearest-neighbor semantics."""
    digest = _content_digest(record, frame)
    volume = clip_hu(load_volume(record.volume))
    masks = {}
    for key in sorted(record.masks):
        grid = load_volume(record.masks[key])
        if grid.dims != volume.dims:
            raise IngestionError(
                f"{record.volume}: mask {key} shape {grid.dims} != "
                f"volume {volume.dims}")
        masks[key] = grid
    if LUNG_MASK_KEY in masks:
        kept = z_keep_range(masks[LUNG_MASK_KEY].data > 0.5,
                            volume.spacing[2], 5.0, volume.dims[2])
        if kept is not None:
            volume = _slice_z(volume, *kept)
            masks = {k: _slice_z(m, *kept) for k, m in masks.items()}
    center = body_center(volume)
    framed = resample_and_frame(volume, center, frame)
    stem = _cache_stem(record.volume)
    save_cache(cache_dir / f"{stem}_vol", framed)
    mask_entries = {}
    for key, grid in masks.items():
        framed_mask = resample_and_frame(grid, center, frame, mask=True)
        save_cache(cache_dir / f"{stem}_mask_{key}", framed_mask)
        mask_entries[key] = f"{stem}_mask_{key}"
    return {"hash": digest, "volume": f"{stem}_vol", "masks": mask_entries}


def _cache_entry_complete(entry: dict, cache_dir: Path) -> bool:
    names = [entry["volume"]] + list(entry["masks"].values())
    return all((cache_dir / f"{n}.raw").is_file()
               and (cache_dir / f"{n}.json").is_file() for n in names)


def _instance_to_dict(inst: TaskInstance) -> dict:
    return {"volume_ref": inst.volume_ref, "task_key": inst.task_key,
            "dataset": inst.dataset, "split": inst.split,
            "category": inst.category, "label": inst.label,
            "mask_ref": inst.mask_ref}


def _instance_from_dict(raw: dict, bank: TaskBank) -> TaskInstance:
    return TaskInstance(volume_ref=raw["volume_ref"],
                        task_key=raw["task_key"],
                        task=bank.describe(raw["task_key"]),
                        dataset=raw["dataset"], split=raw["split"],
                        category=raw.get("category", "unique"),
                        label=raw["label"], mask_ref=raw["mask_ref"])


def run_prepare(config: RunConfig) -> dict:
    """Preprocess every manifest volume into the cache and serialize the
    training mix.  Unchanged inputs (by content hash) are skipped; failed
    records land in the rejection report without aborting the rest."""
    bank = TaskBank.built_in()
    records = load_manifest(config.manifest, bank)
    records = [r for r in records if r.volume not in set(config.exclude)]
    cache_dir = config.cache_dir
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / "index.json"
    index = {}
    if index_path.is_file():
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)

    todo, skipped = [], 0
    rejections = []
    for record in records:
        try:
            entry = index.get(record.volume)
            if entry is not None and \
                    entry["hash"] == _content_digest(record, config.frame) \
                    and _cache_entry_complete(entry, cache_dir):
                skipped += 1
                continue
        except OSError as exc:
            rejections.append({"volume": record.volume, "error": str(exc)})
            continue
        todo.append(record)

    workers = max(1, int(os.environ.get("TASKVOL_WORKERS", "1")))

    def attempt(record):
        try:
            return record.volume, _prepare_record(record, config.frame,
                                                  cache_dir), None
        except (TaskvolError, OSError, ValueError) as exc:
            return record.volume, None, str(exc)

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(attempt, todo))
    else:
        outcomes = [attempt(record) for record in todo]
    prepared = 0
    for volume_ref, entry, error in outcomes:
        if error is not None:
            rejections.append({"volume": volume_ref, "error": error})
            index.pop(volume_ref, None)
        else:
            index[volume_ref] = entry
            prepared += 1

    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    with open(config.out_dir / "rejections.json", "w",
              encoding="utf-8") as fh:
        json.dump(rejections, fh, indent=2)

    rejected_refs = {r["volume"] for r in rejections}
    healthy = [r for r in records if r.volume not in rejected_refs]
    instances = decompose_dataset(healthy, bank, check_mask_paths=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mix = build_training_mix(
            [i for i in instances if i.split == "train"], seed=config.seed)
    splits = {name: [_instance_to_dict(i) for i in instances
                     if i.split == name]
              for name in ("train", "val", "test")}
    with open(config.mix_path, "w", encoding="utf-8") as fh:
        json.dump({"seed": config.seed,
                   "train_mix": [_instance_to_dict(i) for i in mix],
                   "splits": splits}, fh, indent=2)

    summary = {"prepared": prepared, "skipped": skipped,
               "rejected": len(rejections), "mix_size": len(mix)}
    print(f"prepare: {prepared} preprocessed, {skipped} unchanged, "
          f"{len(rejections)} rejected; training mix {len(mix)} instances")
    if records and len(rejections) == len(records):
        raise IngestionError("every manifest record failed preprocessing; "
                             "see rejections.json")
    return summary


# ---------------------------------------------------------------------------
# Shared data plumbing for train / eval / export
# ---------------------------------------------------------------------------

def _load_run_data(config: RunConfig):
    index_path = config.cache_dir / "index.json"
    if not index_path.is_file() or not config.mix_path.is_file():
        raise IngestionError(
            f"no prepared cache under {config.out_dir}; run the prepare "
            "command first")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    with open(config.mix_path, encoding="utf-8") as fh:
        mix_raw = json.load(fh)
    bank = TaskBank.built_in()
    vocab = build_vocabulary(bank)
    train_mix = [_instance_from_dict(r, bank) for r in mix_raw["train_mix"]]
    splits = {name: [_instance_from_dict(r, bank) for r in rows]
              for name, rows in mix_raw["splits"].items()}
    return index, train_mix, splits, vocab


class CacheProvider:
    """Fetch (volume, token ids, target) for a task instance from the
    prepared cache.  Training-split items are augmented with parameters
    drawn from the per-item rng; other splits run the deterministic
    inference path."""

    def __init__(self, config: RunConfig, index: dict, vocab: dict):
        self.config = config
        self.index = index
        self.vocab = vocab

    def _framed(self, name: str) -> VolumeGrid:
        return load_cache(self.config.cache_dir / name)

    def __call__(self, inst: TaskInstance, rng):
        entry = self.index.get(inst.volume_ref)
        if entry is None:
            raise IngestionError(
                f"volume {inst.volume_ref!r} missing from the cache; run "
                "the prepare command first")
        frame = self.config.frame
        model_cfg = self.config.model
        volume = self._framed(entry["volume"])
        augmenting = inst.split == "train"
        params = sample_augment_params(int(rng.integers(2 ** 31 - 1))) \
            if augmenting else None
        if augmenting:
            volume = apply_augment(volume, params)
        vol_input = finalize_input(volume, frame)
        if inst.mask_ref is not None:
            if inst.task_key not in entry["masks"]:
                raise IngestionError(
                    f"no cached mask for {inst.volume_ref!r}/"
                    f"{inst.task_key!r}; rerun the prepare command")
            mask = self._framed(entry["masks"][inst.task_key])
            if augmenting:
                mask = apply_augment(mask, params, mask=True)
            mask_input = finalize_input(mask, frame, mask=True)
            patch = patchify_mask(mask_input.astype(np.uint8),
                                  model_cfg.downsample,
                                  model_cfg.intermediate)
            target = BatchItemTarget(kind="segmentation", patch_target=patch)
        else:
            target = BatchItemTarget(kind="classification", y=inst.label)
        ids = tokenize(inst.task.rendered, self.vocab,
                       max_length=model_cfg.max_text_len).ids
        return vol_input, ids, target


def _build_model(config: RunConfig) -> TaskModel:
    return TaskModel(config.model,
                     params=ParameterStore(config.model, dtype=np.float32))


def _resolve_checkpoint(config: RunConfig, explicit=None) -> Path:
    if explicit is not None:
        path = Path(explicit)
        if not path.is_file():
            raise SchemaError(f"checkpoint {path} does not exist")
        return path
    marker = config.checkpoint_dir / "best.json"
    if not marker.is_file():
        raise IngestionError(
            f"no best-checkpoint marker under {config.checkpoint_dir}; "
            "run the train command first")
    with open(marker, encoding="utf-8") as fh:
        best = json.load(fh)
    return config.checkpoint_dir / best["file"]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_train(config: RunConfig) -> dict:
    index, train_mix, splits, vocab = _load_run_data(config)
    provider = CacheProvider(config, index, vocab)
    model = _build_model(config)
    if config.train.total_steps == 0:
        warnings.warn("total steps is 0: the checkpoint equals the "
                      "initialization", RuntimeWarning, stacklevel=2)
    result = train(model, train_mix, provider, config.train,
                   val_mix=splits.get("val") or None,
                   out_dir=config.checkpoint_dir)
    try:
        best_index = select_checkpoint(result.metric_log)
        step = result.metric_log[best_index]["step"]
        chosen = next(c for c in result.checkpoints if c.step == step)
        selected_by = "val_auroc_mean"
    except SelectionError:
        chosen = result.checkpoints[-1]
        selected_by = "final_step"
    best = {"step": chosen.step, "file": chosen.path.name,
            "val_auroc_mean": chosen.val_auroc_mean,
            "selected_by": selected_by}
    with open(config.checkpoint_dir / "best.json", "w",
              encoding="utf-8") as fh:
        json.dump(best, fh, indent=2)
    final_loss = result.train_losses[-1] if result.train_losses else None
    print(f"train: {config.train.total_steps} steps, final loss "
          f"{final_loss}, best checkpoint step {chosen.step} "
          f"({selected_by})")
    return {"best": best, "metric_log": result.metric_log,
            "final_loss": final_loss}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def run_eval(config: RunConfig, checkpoint=None, split: str = "val") -> dict:
    index, _, splits, vocab = _load_run_data(config)
    if split not in splits:
        raise SchemaError(f"unknown split {split!r}")
    instances = [i for i in splits[split] if i.label is not None]
    if not instances:
        raise SchemaError(f"split {split!r} has no classification instances")
    model = _build_model(config)
    state, _ = load_checkpoint(_resolve_checkpoint(config, checkpoint))
    model.params.load_state_dict(state)
    provider = CacheProvider(config, index, vocab)

    scores: dict[str, list[float]] = {}
    labels: dict[str, list[int]] = {}
    categories: dict[str, str] = {}
    for inst in instances:
        volume, ids, _ = provider(inst, np.random.default_rng(0))
        cls_logit, _ = model.forward(volume, ids)
        score = float(1.0 / (1.0 + np.exp(-cls_logit.data)))
        scores.setdefault(inst.task_key, []).append(score)
        labels.setdefault(inst.task_key, []).append(int(inst.label))
        categories[inst.task_key] = inst.category
    per_task = {key: ScoredSet(np.asarray(scores[key]),
                               np.asarray(labels[key]))
                for key in scores}
    groups: dict[str, list[str]] = {}
    for key, category in categories.items():
        groups.setdefault(category, []).append(key)
    report = build_report(per_task, groups=groups)

    config.out_dir.mkdir(parents=True, exist_ok=True)
    json_path = config.out_dir / f"eval_{split}.json"
    table_path = config.out_dir / f"eval_{split}.txt"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    table_path.write_text(report.to_table() + "\n", encoding="utf-8")
    print(report.to_table())
    print(f"eval: {len(report.tasks)} tasks scored on split {split!r}; "
          f"wrote {json_path.name} and {table_path.name}")
    return report.to_dict()


# ---------------------------------------------------------------------------
# export-seg
# ---------------------------------------------------------------------------

def run_export_seg(config: RunConfig, checkpoint=None,
                   split: str = "val", threshold: float = 0.5) -> dict:
    index, _, splits, vocab = _load_run_data(config)
    if split not in splits:
        raise SchemaError(f"unknown split {split!r}")
    instances = [i for i in splits[split] if i.mask_ref is not None]
    model = _build_model(config)
    state, _ = load_checkpoint(_resolve_checkpoint(config, checkpoint))
    model.params.load_state_dict(state)
    provider = CacheProvider(config, index, vocab)

    seg_dir = config.out_dir / "seg"
    seg_dir.mkdir(parents=True, exist_ok=True)
    cfg = config.model
    pooled_spacing = tuple(
        crop / n * (cfg.downsample // cfg.intermediate)
        for crop, n in zip(config.frame.crop_mm, cfg.input_shape))
    exported = []
    for inst in instances:
        volume, ids, _ = provider(inst, np.random.default_rng(0))
        _, seg_logits = model.forward(volume, ids)
        prob = 1.0 / (1.0 + np.exp(-seg_logits.data))
        patch = PatchTarget((prob > threshold).astype(np.uint8),
                            d=cfg.downsample, u=cfg.intermediate)
        grid = unpack_mask(patch, tuple(cfg.input_shape))
        name = f"{_cache_stem(inst.volume_ref)}_{inst.task_key}.nii"
        affine = np.diag([*pooled_spacing, 1.0])
        save_volume(seg_dir / name,
                    VolumeGrid(data=grid.astype(np.float32),
                               spacing=pooled_spacing, affine=affine))
        exported.append({"volume_ref": inst.volume_ref,
                         "task_key": inst.task_key, "file": name})
    listing = {"split": split, "threshold": threshold, "files": exported}
    with open(seg_dir / "exports.json", "w", encoding="utf-8") as fh:
        json.dump(listing, fh, indent=2)
    print(f"export-seg: wrote {len(exported)} grids to {seg_dir}")
    return listing


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="JSON run-config file")
    sub.add_argument("--manifest", help="manifest NDJSON (overrides config)")
    sub.add_argument("--out-dir", help="run output directory")
    sub.add_argument("--seed", type=int, help="seed (overrides config)")
    sub.add_argument("--preset", choices=("desk", "paper"),
                     help="scale preset supplying defaults")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.FIELD=VALUE",
                     help="override one config field, e.g. "
                          "train.total_steps=100")


def _config_from_args(args) -> RunConfig:
    return load_run_config(config_path=args.config,
                           overrides=args.overrides,
                           manifest=args.manifest, out_dir=args.out_dir,
                           seed=args.seed, preset_name=args.preset)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="taskvol",
        description="Volumetric task-conditioned training pipeline")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("prepare",
                            help="preprocess volumes and build the task mix")
    _add_common(p)

    p = commands.add_parser("train", help="run the optimization loop")
    _add_common(p)

    p = commands.add_parser("eval", help="score a split and write reports")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: best "
                                        "marker from train)")
    p.add_argument("--split", default="val",
                   choices=("train", "val", "test"))

    p = commands.add_parser("export-seg",
                            help="export thresholded segmentation grids")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: best "
                                        "marker from train)")
    p.add_argument("--split", default="val",
                   choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)

    args = parser.parse_args(argv)
    try:
        config = _config_from_args(args)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "prepare":
            run_prepare(config)
        elif args.command == "train":
            run_train(config)
        elif args.command == "eval":
            run_eval(config, checkpoint=args.checkpoint, split=args.split)
        elif args.command == "export-seg":
            run_export_seg(config, checkpoint=args.checkpoint,
                           split=args.split, threshold=args.threshold)
    except TaskvolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

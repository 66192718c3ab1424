"""Task data model: descriptions, datasets, mixtures, and text tokens.

A task is one question about one volume — diagnose a finding, predict an
outcome at a horizon, or segment a structure.  Descriptions are rendered
from three fixed templates so that the text side of the model sees a tiny,
closed vocabulary; the bank of known task keys ships as a data file and is
deliberately editable.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import IngestionError, SchemaError

KINDS = ("diagnostic", "prognostic", "segmentation")
RELATIONS = ("in", "around")
PAD_ID = 0
UNK_ID = 1
VOCABULARY_CAP = 512


@dataclass(frozen=True)
class TaskDescription:
    kind: str
    label_name: str
    rendered: str
    organ: str | None = None
    relation: str | None = None
    horizon_months: int | None = None


@dataclass(frozen=True)
class TaskInstance:
    """One (volume, task) pair with its supervision target.

    Exactly one of ``label`` and ``mask_ref`` is set; a mask implies a
    segmentation task.
    """

    volume_ref: str
    task_key: str
    task: TaskDescription
    dataset: str
    split: str
    category: str = "unique"
    label: int | None = None
    mask_ref: str | None = None

    def __post_init__(self):
        if (self.label is None) == (self.mask_ref is None):
            raise SchemaError(
                f"instance {self.volume_ref}/{self.task_key}: exactly one of "
                "label and mask_ref must be present")
        if (self.mask_ref is not None) != (self.task.kind == "segmentation"):
            raise SchemaError(
                f"instance {self.volume_ref}/{self.task_key}: mask targets "
                "require a segmentation task and vice versa")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    length: int


def render_task_description(kind: str, label_name: str, organ: str | None = None,
                            relation: str | None = None,
                            horizon_months: int | None = None) -> TaskDescription:
    """Fill the matching template with the given slots.

    Templates:
      diagnostic    "Diagnose the presence of {label} {relation} the {organ}"
      prognostic    "Predict the risk of {label} in {horizon} months"
      segmentation  "Segment {label} in the image"
    """
    if kind not in KINDS:
        raise SchemaError(f"unknown task kind {kind!r}")
    if not label_name or not label_name.strip():
        raise SchemaError("label_name must be non-empty")
    if kind == "diagnostic":
        if not organ or relation not in RELATIONS:
            raise SchemaError(
                f"diagnostic task {label_name!r} needs organ and relation "
                f"(got organ={organ!r}, relation={relation!r})")
        if horizon_months is not None:
            raise SchemaError("diagnostic tasks take no horizon")
        rendered = f"Diagnose the presence of {label_name} {relation} the {organ}"
        return TaskDescription(kind, label_name, rendered, organ=organ,
                               relation=relation)
    if kind == "prognostic":
        if horizon_months is None or int(horizon_months) <= 0:
            raise SchemaError(
                f"prognostic task {label_name!r} needs a positive horizon")
        if organ is not None or relation is not None:
            raise SchemaError("prognostic tasks take no organ/relation")
        horizon = int(horizon_months)
        rendered = f"Predict the risk of {label_name} in {horizon} months"
        return TaskDescription(kind, label_name, rendered,
                               horizon_months=horizon)
    if organ is not None or relation is not None or horizon_months is not None:
        raise SchemaError("segmentation tasks take only a label name")
    rendered = f"Segment {label_name} in the image"
    return TaskDescription(kind, label_name, rendered)


_PROGNOSTIC_RE = re.compile(r"^Predict the risk of (.+) in (\d+) months$")
_DIAGNOSTIC_RE = re.compile(r"^Diagnose the presence of (.+) (in|around) the (.+)$")
_SEGMENTATION_RE = re.compile(r"^Segment (.+) in the image$")


def parse_task_description(rendered: str) -> TaskDescription:
    """Invert render_task_description; raises SchemaError on no match."""
    m = _PROGNOSTIC_RE.match(rendered)
    if m:
        return render_task_description("prognostic", m.group(1),
                                       horizon_months=int(m.group(2)))
    m = _DIAGNOSTIC_RE.match(rendered)
    if m:
        return render_task_description("diagnostic", m.group(1),
                                       organ=m.group(3), relation=m.group(2))
    m = _SEGMENTATION_RE.match(rendered)
    if m:
        return render_task_description("segmentation", m.group(1))
    raise SchemaError(f"text matches no task template: {rendered!r}")


class TaskBank:
    """Mapping from canonical task key to its description."""

    def __init__(self, entries: dict[str, dict]):
        self._descriptions: dict[str, TaskDescription] = {}
        for key, slots in entries.items():
            self._descriptions[key] = render_task_description(
                slots["kind"], slots["label_name"],
                organ=slots.get("organ"), relation=slots.get("relation"),
                horizon_months=slots.get("horizon_months"))

    @classmethod
    def from_file(cls, path) -> "TaskBank":
        with open(path) as fh:
            return cls(json.load(fh))

    @classmethod
    def built_in(cls) -> "TaskBank":
        ref = resources.files("taskvol").joinpath("data/task_bank.json")
        return cls(json.loads(ref.read_text()))

    def describe(self, key: str) -> TaskDescription:
        try:
            return self._descriptions[key]
        except KeyError:
            raise SchemaError(f"unknown task key {key!r}") from None

    def keys(self):
        return self._descriptions.keys()

    def __contains__(self, key: str) -> bool:
        return key in self._descriptions

    def __len__(self) -> int:
        return len(self._descriptions)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    volume: str
    dataset: str
    split: str
    labels: dict[str, int] = field(default_factory=dict)
    masks: dict[str, str] = field(default_factory=dict)
    categories: dict[str, str] = field(default_factory=dict)


def load_manifest(path, bank: TaskBank) -> list[ManifestRecord]:
    """Read and validate a newline-delimited JSON manifest."""
    records = []
    seen_split: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            for field_name in ("volume", "dataset", "split"):
                if field_name not in raw:
                    raise SchemaError(f"{path}:{lineno}: missing {field_name!r}")
            if raw["split"] not in ("train", "val", "test"):
                raise SchemaError(
                    f"{path}:{lineno}: bad split {raw['split']!r}")
            volume = str(raw["volume"])
            prior = seen_split.get(volume)
            if prior is not None and prior != raw["split"]:
                raise SchemaError(
                    f"{path}:{lineno}: volume {volume!r} appears in both "
                    f"{prior!r} and {raw['split']!r} splits")
            seen_split[volume] = raw["split"]
            labels = {str(k): int(v) for k, v in (raw.get("labels") or {}).items()}
            masks = {str(k): str(v) for k, v in (raw.get("masks") or {}).items()}
            categories = {str(k): str(v)
                          for k, v in (raw.get("categories") or {}).items()}
            for key in list(labels) + list(masks):
                if key not in bank:
                    raise SchemaError(
                        f"{path}:{lineno}: task key {key!r} not in the bank")
            for key, value in labels.items():
                if value not in (0, 1):
                    raise SchemaError(
                        f"{path}:{lineno}: label {key!r} must be 0 or 1, "
                        f"got {value}")
            for key, cat in categories.items():
                if cat not in ("shared", "unique"):
                    raise SchemaError(
                        f"{path}:{lineno}: category {cat!r} for {key!r} "
                        "must be 'shared' or 'unique'")
            records.append(ManifestRecord(volume=volume,
                                          dataset=str(raw["dataset"]),
                                          split=raw["split"], labels=labels,
                                          masks=masks, categories=categories))
    return records


def decompose_dataset(records: list[ManifestRecord], bank: TaskBank, *,
                      check_mask_paths: bool = True) -> list[TaskInstance]:
    """Expand each record into one instance per present annotation."""
    instances = []
    for record in records:
        for key in sorted(record.labels):
            task = bank.describe(key)
            if task.kind == "segmentation":
                raise SchemaError(
                    f"record {record.volume!r}: segmentation key {key!r} "
                    "cannot appear under labels")
            instances.append(TaskInstance(
                volume_ref=record.volume, task_key=key, task=task,
                dataset=record.dataset, split=record.split,
                category=record.categories.get(key, "unique"),
                label=record.labels[key]))
        for key in sorted(record.masks):
            task = bank.describe(key)
            if task.kind != "segmentation":
                raise SchemaError(
                    f"record {record.volume!r}: key {key!r} under masks is "
                    f"not a segmentation task")
            mask_path = record.masks[key]
            if check_mask_paths and not Path(mask_path).exists():
                raise IngestionError(
                    f"record {record.volume!r}: mask path {mask_path!r} for "
                    f"{key!r} does not exist")
            instances.append(TaskInstance(
                volume_ref=record.volume, task_key=key, task=task,
                dataset=record.dataset, split=record.split,
                category=record.categories.get(key, "unique"),
                mask_ref=mask_path))
    return instances


# ---------------------------------------------------------------------------
# Training mixture
# ---------------------------------------------------------------------------

LUNA_DATASET = "luna16"


def build_training_mix(instances: list[TaskInstance], seed: int,
                       seg_fraction: float = 0.10,
                       luna_factor: int = 10) -> list[TaskInstance]:
    """Assemble the balanced training mixture.

    Per classification key: keep every positive and an equal number of
    negatives sampled without replacement (all of them when scarce); keys
    with no positives are dropped with a warning.  Nodule-dataset mask
    instances are replicated luna_factor times.  A seg_fraction share of
    volumes additionally contributes one organ-segmentation instance each.
    The result is shuffled deterministically by seed.
    """
    rng = np.random.default_rng(seed)
    classification = [i for i in instances if i.task.kind != "segmentation"]
    segmentation = [i for i in instances if i.task.kind == "segmentation"]

    kept: list[TaskInstance] = []
    by_key: dict[str, list[TaskInstance]] = {}
    for inst in classification:
        by_key.setdefault(inst.task_key, []).append(inst)
    for key in sorted(by_key):
        group = by_key[key]
        positives = [i for i in group if i.label == 1]
        negatives = [i for i in group if i.label == 0]
        if not positives:
            warnings.warn(f"task {key!r} has no positive examples; dropped",
                          RuntimeWarning, stacklevel=2)
            continue
        kept.extend(positives)
        take = min(len(negatives), len(positives))
        if take:
            picks = rng.choice(len(negatives), size=take, replace=False)
            kept.extend(negatives[j] for j in sorted(picks))

    luna = [i for i in segmentation if i.dataset.lower() == LUNA_DATASET]
    organ = [i for i in segmentation if i.dataset.lower() != LUNA_DATASET]
    kept.extend(inst for inst in luna for _ in range(luna_factor))

    n_volumes = len({i.volume_ref for i in instances})
    quota = int(seg_fraction * n_volumes)
    by_volume: dict[str, list[TaskInstance]] = {}
    for inst in organ:
        by_volume.setdefault(inst.volume_ref, []).append(inst)
    candidates = sorted(by_volume)
    take = min(quota, len(candidates))
    if take:
        picks = rng.choice(len(candidates), size=take, replace=False)
        for j in sorted(picks):
            options = by_volume[candidates[j]]
            kept.append(options[int(rng.integers(len(options)))])

    order = rng.permutation(len(kept))
    return [kept[j] for j in order]


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9]+")


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocabulary(bank: TaskBank, cap: int = VOCABULARY_CAP) -> dict[str, int]:
    """Assign ids to every word in the bank's rendered descriptions.

    Ids 0 and 1 are reserved for padding and unknown words; the remainder
    follow first appearance over the sorted key order, capped at ``cap``.
    """
    vocab: dict[str, int] = {}
    next_id = 2
    for key in sorted(bank.keys()):
        for word in _words(bank.describe(key).rendered):
            if word not in vocab and next_id < cap:
                vocab[word] = next_id
                next_id += 1
    return vocab


def tokenize(text: str, vocab: dict[str, int],
             max_length: int = 16) -> TokenSequence:
    """Lowercase word tokenization against a fixed vocabulary."""
    if not text or not text.strip():
        raise SchemaError("cannot tokenize empty text")
    ids = tuple(vocab.get(w, UNK_ID) for w in _words(text))[:max_length]
    return TokenSequence(ids=ids, length=len(ids))

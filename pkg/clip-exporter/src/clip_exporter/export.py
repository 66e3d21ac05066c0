"""Dataset scan and feature export.

The scan mirrors the trainer's loader contract: one subdirectory per
class directly under the root, image files inside, ids are forward-slash
relative paths. Undecodable files are skipped with a warning and listed
in a sidecar report; the trainer's loader would reject such a root, so
the report also records whether the exported id set still matches what
the loader would enumerate.
"""

import json
import logging
import os
from dataclasses import dataclass, field

from .encoder import FrozenEncoder
from .ppm import DecodeError, read_ppm
from .table import write_table

log = logging.getLogger("clip_exporter")

DEFAULT_MODEL = "rp512-v1"


class DatasetError(ValueError):
    """The dataset directory is structurally unusable."""


class ExportError(RuntimeError):
    """The export produced nothing usable."""


@dataclass
class ExportManifest:
    root: str
    output_path: str
    model_id: str = DEFAULT_MODEL

    def validate(self):
        if not os.path.isdir(self.root):
            raise DatasetError(f"not a directory: {self.root}")
        if not self.output_path:
            raise ExportError("empty output path")
        if not isinstance(self.model_id, str) or not self.model_id:
            raise ExportError(f"model id must be a non-empty string, "
                              f"got {self.model_id!r}")


@dataclass
class ExportReport:
    root: str
    output_path: str
    model_id: str
    count: int
    dim: int
    skipped: list = field(default_factory=list)   # [{"id":..., "reason":...}]
    loader_parity: bool = True

    def sidecar_path(self):
        return self.output_path + ".report.json"

    def to_json(self):
        payload = {
            "root": self.root,
            "output_path": self.output_path,
            "model_id": self.model_id,
            "count": self.count,
            "dim": self.dim,
            "skipped": self.skipped,
            "loader_parity": self.loader_parity,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def summary(self):
        parity = "matches" if self.loader_parity else "DOES NOT match"
        return (f"exported {self.count} rows (dim {self.dim}) to "
                f"{self.output_path}; skipped {len(self.skipped)}; "
                f"id set {parity} the trainer loader")


def scan_dataset(root):
    """Enumerate (id, absolute path) pairs exactly as the trainer's loader
    would: sorted class subdirectories, sorted files within each."""
    if not os.path.isdir(root):
        raise DatasetError(f"not a directory: {root}")
    class_dirs = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)))
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    items = []
    for name in class_dirs:
        files = sorted(os.listdir(os.path.join(root, name)))
        if not files:
            raise DatasetError(f"empty class directory: {name}")
        for fn in files:
            items.append((f"{name}/{fn}", os.path.join(root, name, fn)))
    return items


def export_clip_features(manifest, encoder=None):
    """Encode every decodable image under manifest.root and write one row
    per image to manifest.output_path, ordered by id. Returns the
    ExportReport, which is also written next to the output as JSON.

    Pass a prebuilt encoder to use a real pretrained model; anything with
    ``encode_many`` and ``dim`` works.
    """
    manifest.validate()
    if encoder is None:
        encoder = FrozenEncoder(manifest.model_id)
    items = scan_dataset(manifest.root)

    kept, images, skipped = [], [], []
    for item_id, path in items:
        try:
            images.append(read_ppm(path))
        except DecodeError as e:
            log.warning("skipping %s: %s", item_id, e)
            skipped.append({"id": item_id, "reason": str(e)})
            continue
        kept.append(item_id)
    if not kept:
        raise ExportError(
            f"no decodable images under {manifest.root} "
            f"({len(skipped)} skipped)")

    # single write pass, ordered by id; parity is decided before writing
    order = sorted(range(len(kept)), key=lambda i: kept[i])
    ids = [kept[i] for i in order]
    rows = encoder.encode_many([images[i] for i in order])
    report = ExportReport(
        root=manifest.root,
        output_path=manifest.output_path,
        model_id=manifest.model_id,
        count=len(ids),
        dim=encoder.dim,
        skipped=skipped,
        loader_parity=not skipped,
    )
    if not report.loader_parity:
        log.warning("%d files skipped; the trainer loader would reject "
                    "this root", len(skipped))

    out_dir = os.path.dirname(os.path.abspath(manifest.output_path))
    os.makedirs(out_dir, exist_ok=True)
    write_table(manifest.output_path, rows, ids)
    with open(report.sidecar_path(), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    return report

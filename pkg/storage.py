import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
from torch import nn

from errorsynth import record_from_dict, record_to_dict
from models import BinaryMask, CenterlineGraph, CorruptionRecord, PhantomSpec, Volume, Voxel
from network import load_checkpoint, save_checkpoint
from skeleton import graph_from_dict, graph_to_dict
from volume import read_mask, read_mhd, write_mhd


PathLike = Union[str, os.PathLike]

LAYOUT = ("checkpoints", "predictions", "records")
MANIFEST = "manifest.json"
RUN_LOG = "run_log.jsonl"


@dataclass
class Case:
    """Один случай набора данных"""
    case_id: str
    image: Volume
    bounds: BinaryMask
    gt: Optional[BinaryMask] = None
    centerline: Optional[BinaryMask] = None
    graph: Optional[CenterlineGraph] = None
    root_hint: Optional[Voxel] = None
    seed: Optional[int] = None


class ArtifactStore:
    """Хранилище артефактов запуска: объемы, JSON, контрольные точки, журнал"""

    def __init__(self, root: PathLike, layout: bool = True):
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)
        self.root.mkdir(parents=True, exist_ok=True)
        if layout:
            self.init_layout()

    @contextmanager
    def writing(self, what: str):
        """Контекстный менеджер для записи: ошибки логируются и пробрасываются"""
        try:
            yield
        except Exception as e:
            self.logger.error(f"Artifact error ({what}): {e}")
            raise

    def init_layout(self):
        """Создание подкаталогов запуска"""
        for name in LAYOUT:
            (self.root / name).mkdir(exist_ok=True)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def save_volume(self, v: Volume, name: str, elem: str = "float32") -> Path:
        target = self.path(name)
        with self.writing(name):
            target.parent.mkdir(parents=True, exist_ok=True)
            write_mhd(v, target, elem)
        return target

    def load_volume(self, name: str) -> Volume:
        return read_mhd(self.path(name))

    def load_mask(self, name: str) -> BinaryMask:
        return read_mask(self.path(name))

    def save_json(self, payload, name: str) -> Path:
        target = self.path(name)
        with self.writing(name):
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return target

    def load_json(self, name: str):
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def save_checkpoint(self, model: nn.Module, name: str, extra: Optional[dict] = None) -> Path:
        target = self.path("checkpoints", name)
        with self.writing(name):
            save_checkpoint(model, target, extra)
        self.logger.info(f"Saved checkpoint {target}")
        return target

    def load_checkpoint(self, name: str):
        return load_checkpoint(self.path("checkpoints", name))

    def save_record(self, record: CorruptionRecord, name: str) -> Path:
        return self.save_json(record_to_dict(record), os.path.join("records", f"{name}.json"))

    def load_record(self, name: str) -> CorruptionRecord:
        return record_from_dict(self.load_json(os.path.join("records", f"{name}.json")))

    def log_event(self, stage: str, step: int, **values):
        """Одна строка JSONL в журнале запуска"""
        entry = {"stage": stage, "step": int(step)}
        entry.update({k: float(v) if isinstance(v, (int, float)) else v for k, v in values.items()})
        with self.writing(RUN_LOG):
            with open(self.path(RUN_LOG), "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def read_log(self) -> List[dict]:
        log_path = self.path(RUN_LOG)
        if not log_path.exists():
            return []
        with open(log_path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def write_case(self, case: Case) -> List[Path]:
        """Каталог случая: image, gt, centerline, bounds (.mhd) и graph.json"""
        written = []
        case_dir = case.case_id
        written.append(self.save_volume(case.image, os.path.join(case_dir, "image.mhd")))
        written.append(self.save_volume(case.bounds, os.path.join(case_dir, "bounds.mhd")))
        if case.gt is not None:
            written.append(self.save_volume(case.gt, os.path.join(case_dir, "gt.mhd")))
        if case.centerline is not None:
            written.append(self.save_volume(case.centerline, os.path.join(case_dir, "centerline.mhd")))
        if case.graph is not None:
            written.append(self.save_json(graph_to_dict(case.graph), os.path.join(case_dir, "graph.json")))
        self.logger.debug(f"Wrote case {case.case_id} ({len(written)} files)")
        return written

    def write_manifest(self, cases: Iterable[Case], spec: Optional[PhantomSpec] = None) -> Path:
        entries = [{"id": c.case_id, "seed": c.seed,
                    "root_hint": list(c.root_hint) if c.root_hint is not None else None}
                   for c in cases]
        payload = {"cases": entries}
        if spec is not None:
            payload["spec"] = phantom_spec_to_dict(spec)
        return self.save_json(payload, MANIFEST)

    def case_ids(self) -> List[str]:
        return [entry["id"] for entry in self.load_json(MANIFEST)["cases"]]

    def load_case(self, case_id: str, root_hint: Optional[Voxel] = None, seed: Optional[int] = None) -> Case:
        case_dir = self.path(case_id)
        if not case_dir.is_dir():
            raise FileNotFoundError(f"case directory not found: {case_dir}")

        def optional_mask(name: str) -> Optional[BinaryMask]:
            p = case_dir / name
            return read_mask(p) if p.exists() else None

        image = read_mhd(case_dir / "image.mhd")
        bounds = optional_mask("bounds.mhd")
        if bounds is None:
            bounds = BinaryMask(np.ones(image.dims, dtype=np.uint8), image.spacing)
        graph_path = case_dir / "graph.json"
        graph = graph_from_dict(self.load_json(os.path.join(case_id, "graph.json"))) if graph_path.exists() else None
        return Case(case_id=case_id, image=image, bounds=bounds, gt=optional_mask("gt.mhd"),
                    centerline=optional_mask("centerline.mhd"), graph=graph,
                    root_hint=tuple(root_hint) if root_hint is not None else None, seed=seed)

    def load_cases(self, ids: Optional[Iterable[str]] = None) -> List[Case]:
        """Случаи из manifest.json (все или перечисленные)"""
        entries = {entry["id"]: entry for entry in self.load_json(MANIFEST)["cases"]}
        wanted = list(entries) if ids is None else list(ids)
        missing = [case_id for case_id in wanted if case_id not in entries]
        if missing:
            raise KeyError(f"cases not in manifest: {', '.join(missing)}")
        return [self.load_case(case_id, entries[case_id].get("root_hint"), entries[case_id].get("seed"))
                for case_id in wanted]


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "dims": list(spec.dims), "depth": spec.depth, "trunk_radius_vox": spec.trunk_radius_vox,
        "radius_decay": spec.radius_decay, "branch_len_range": list(spec.branch_len_range),
        "length_decay": spec.length_decay, "branch_angle_range": list(spec.branch_angle_range),
        "foreground_intensity": spec.foreground_intensity, "background_intensity": spec.background_intensity,
        "noise_sigma": spec.noise_sigma, "seed": spec.seed, "style": spec.style, "max_retries": spec.max_retries,
    }


def phantom_spec_from_dict(payload: dict) -> PhantomSpec:
    """PhantomSpec из JSON; неизвестные ключи отвергаются"""
    known = set(phantom_spec_to_dict(PhantomSpec()))
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values = dict(payload)
    for key in ("dims", "branch_len_range", "branch_angle_range"):
        if key in values:
            values[key] = tuple(values[key])
    return PhantomSpec(**values)


def find_mask(directory: PathLike, case_id: str, kind: str) -> Path:
    """<dir>/<case_id>.mhd или <dir>/<case_id>/<kind>.mhd"""
    directory = Path(directory)
    for candidate in (directory / f"{case_id}.mhd", directory / case_id / f"{kind}.mhd"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {kind} volume for case {case_id} in {directory}")

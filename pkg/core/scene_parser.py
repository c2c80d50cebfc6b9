"""Parsing and writing of scene records (YAML or JSON) and geometry-bank text files."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml

from core.errors import ContractError, SceneParseError
from core.geometry import Box
from core.geometry_bank import BankEntry, GeometryBank
from core.scene_world import SceneInstance, SceneSpec

logger = logging.getLogger(__name__)

SCENE_VERSION = 1
BANK_VERSION = 1
BANK_HEADER = "rdit-geometry-bank"
BOX_DIGITS = 4

INSTANCE_KEYS = {"subject", "action", "object", "subject_box", "object_box", "subject_color", "object_color"}
SCENE_KEYS = {"grid", "background", "instances"}


@dataclass
class EditPairRecord:
    source: SceneSpec
    target: SceneSpec
    detected: Dict[str, Optional[Box]] = field(default_factory=dict)


@dataclass
class SceneDocument:
    scenes: List[SceneSpec] = field(default_factory=list)
    pairs: List[EditPairRecord] = field(default_factory=list)


def _node_line(root, path: List[Union[str, int]]) -> Optional[int]:
    """1-based line of the YAML node at ``path``, or of its deepest existing ancestor."""
    node, line = root, None
    for part in path:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            node = next((v for k, v in node.value if k.value == part), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _path_label(path: List[Union[str, int]]) -> str:
    label = ""
    for part in path:
        label += f"[{part}]" if isinstance(part, int) else (f".{part}" if label else part)
    return label


class SceneParser:
    """Versioned scene documents::

        version: 1
        scenes:
          - grid: [16, 16]
            background: 0
            instances:
              - {subject: person, action: hold, object: cup,
                 subject_box: [0.1, 0.2, 0.3, 0.6], object_box: [0.25, 0.3, 0.4, 0.45],
                 subject_color: 1, object_color: 4}
        pairs:
          - {source: <scene>, target: <scene>, detected: {subject_box: [...], object_box: [...]}}
    """

    def __init__(self, content: str):
        self.content = content
        try:
            self.root = yaml.compose(content)
        except yaml.YAMLError:
            self.root = None

    def fail(self, message: str, path: List[Union[str, int]]):
        raise SceneParseError(message, field=_path_label(path) or None, line=_node_line(self.root, path))

    @staticmethod
    def parse(content: Union[str, dict]) -> SceneDocument:
        if isinstance(content, dict):
            return SceneParser("").document(content)
        try:
            data = json.loads(content)
        except json.JSONDecodeError:
            try:
                data = yaml.safe_load(content)
            except yaml.YAMLError as exc:
                mark = getattr(exc, "problem_mark", None)
                raise SceneParseError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                                      line=mark.line + 1 if mark else None) from None
        return SceneParser(content).document(data)

    @staticmethod
    def from_file(path: Union[str, Path]) -> SceneDocument:
        path = Path(path)
        try:
            content = path.read_text()
        except OSError as exc:
            raise SceneParseError(f"cannot read {path}: {exc}") from None
        return SceneParser.parse(content)

    def document(self, data: Any) -> SceneDocument:
        if not isinstance(data, dict):
            self.fail("scene document must be a mapping", [])
        if "version" not in data:
            self.fail("missing format version", ["version"])
        if data["version"] != SCENE_VERSION:
            self.fail(f"unsupported scene format version {data['version']!r}", ["version"])
        unknown = sorted(set(data) - {"version", "scenes", "pairs"})
        if unknown:
            self.fail(f"unknown key(s) {', '.join(unknown)}", [unknown[0]])
        doc = SceneDocument()
        for i, raw in enumerate(self._list(data, "scenes", [])):
            doc.scenes.append(self.scene(raw, ["scenes", i]))
        for i, raw in enumerate(self._list(data, "pairs", [])):
            path = ["pairs", i]
            if not isinstance(raw, dict) or "source" not in raw or "target" not in raw:
                self.fail("edit pair needs 'source' and 'target' scenes", path)
            detected = {}
            for role, value in (raw.get("detected") or {}).items():
                detected[role] = self.box(value, path + ["detected", role]) if value is not None else None
            doc.pairs.append(EditPairRecord(self.scene(raw["source"], path + ["source"]),
                                            self.scene(raw["target"], path + ["target"]), detected))
        logger.debug(f"parsed {len(doc.scenes)} scenes and {len(doc.pairs)} edit pairs")
        return doc

    def _list(self, data: dict, key: str, path: List) -> list:
        value = data.get(key) or []
        if not isinstance(value, list):
            self.fail(f"'{key}' must be a list", path + [key])
        return value

    def box(self, value: Any, path: List) -> Box:
        if not isinstance(value, (list, tuple)) or len(value) != 4:
            self.fail("box must be a list of 4 numbers [x0, y0, x1, y1]", path)
        try:
            return Box(*(float(v) for v in value))
        except (TypeError, ValueError) as exc:
            self.fail(f"invalid box: {exc}", path)

    def scene(self, raw: Any, path: List) -> SceneSpec:
        if not isinstance(raw, dict):
            self.fail("scene must be a mapping", path)
        unknown = sorted(set(raw) - SCENE_KEYS)
        if unknown:
            self.fail(f"unknown key(s) {', '.join(unknown)}", path + [unknown[0]])
        grid = raw.get("grid", [16, 16])
        if not isinstance(grid, list) or len(grid) != 2 or not all(isinstance(g, int) and g > 0 for g in grid):
            self.fail("grid must be two positive integers", path + ["grid"])
        instances = []
        for j, inst in enumerate(self._list(raw, "instances", path)):
            instances.append(self.instance(inst, path + ["instances", j]))
        try:
            return SceneSpec(tuple(instances), grid=tuple(grid), background=int(raw.get("background", 0)))
        except (ContractError, TypeError, ValueError) as exc:
            self.fail(str(exc), path)

    def instance(self, raw: Any, path: List) -> SceneInstance:
        if not isinstance(raw, dict):
            self.fail("instance must be a mapping", path)
        unknown = sorted(set(raw) - INSTANCE_KEYS)
        if unknown:
            self.fail(f"unknown key(s) {', '.join(unknown)}", path + [unknown[0]])
        for key in ("object", "object_box", "object_color"):
            if key not in raw:
                self.fail(f"missing required key '{key}'", path + [key])
        subject_box = self.box(raw["subject_box"], path + ["subject_box"]) if raw.get("subject_box") is not None else None
        object_box = self.box(raw["object_box"], path + ["object_box"])
        try:
            inst = SceneInstance(
                object=raw["object"],
                object_box=object_box,
                object_color=int(raw["object_color"]),
                subject=raw.get("subject"),
                action=raw.get("action"),
                subject_box=subject_box,
                subject_color=int(raw["subject_color"]) if raw.get("subject_color") is not None else None,
            )
            SceneSpec((inst,))  # class and color checks, reported at instance level
        except (TypeError, ValueError) as exc:
            self.fail(str(exc).replace("instance 0: ", ""), path)
        return inst


def _box_list(box: Optional[Box]) -> Optional[List[float]]:
    return None if box is None else [round(c, BOX_DIGITS) for c in box.as_tuple()]


def scene_record(spec: SceneSpec) -> Dict[str, Any]:
    instances = []
    for inst in spec.instances:
        record = {"object": inst.object, "object_box": _box_list(inst.object_box), "object_color": inst.object_color}
        if not inst.object_only:
            record.update(subject=inst.subject, action=inst.action, subject_box=_box_list(inst.subject_box),
                          subject_color=inst.subject_color)
        instances.append(record)
    return {"grid": list(spec.grid), "background": spec.background, "instances": instances}


def dump_scenes(scenes: List[SceneSpec], pairs: Optional[List[EditPairRecord]] = None) -> str:
    """YAML scene document; boxes are written with 4 decimals."""
    data: Dict[str, Any] = {"version": SCENE_VERSION, "scenes": [scene_record(s) for s in scenes]}
    if pairs:
        data["pairs"] = [{
            "source": scene_record(p.source),
            "target": scene_record(p.target),
            "detected": {role: _box_list(b) for role, b in p.detected.items()},
        } for p in pairs]
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------- geometry bank text format

def dump_geometry_bank(bank: GeometryBank) -> str:
    """One line per class: action object count category, 5 means, 15 upper-triangle covariances."""
    lines = [f"{BANK_HEADER} {BANK_VERSION}"]
    iu = np.triu_indices(5)
    for (action, obj), entry in sorted(bank.entries.items()):
        numbers = list(entry.mean) + list(entry.cov[iu])
        lines.append(" ".join([action, obj, str(entry.count), bank.category(obj)] + [repr(float(x)) for x in numbers]))
    for (action, obj), count in sorted(bank.unfit.items()):
        lines.append(f"unfit {action} {obj} {count}")
    return "\n".join(lines) + "\n"


def parse_geometry_bank(text: str) -> GeometryBank:
    rows = [(i + 1, line.split()) for i, line in enumerate(text.splitlines()) if line.strip() and not line.startswith("#")]
    if not rows or rows[0][1][:1] != [BANK_HEADER]:
        raise SceneParseError(f"missing '{BANK_HEADER}' header", line=1)
    line_no, header = rows[0]
    if len(header) != 2 or header[1] != str(BANK_VERSION):
        raise SceneParseError(f"unsupported geometry bank version {' '.join(header[1:])!r}", line=line_no)
    bank = GeometryBank()
    iu = np.triu_indices(5)
    for line_no, parts in rows[1:]:
        try:
            if parts[0] == "unfit":
                bank.unfit[(parts[1], parts[2])] = int(parts[3])
                continue
            if len(parts) != 4 + 5 + 15:
                raise SceneParseError(f"expected 24 fields, got {len(parts)}", field="entry", line=line_no)
            action, obj, count, category = parts[:4]
            numbers = np.array([float(x) for x in parts[4:]])
            cov = np.zeros((5, 5))
            cov[iu] = numbers[5:]
            cov = cov + np.triu(cov, 1).T
            bank.entries[(action, obj)] = BankEntry(numbers[:5], cov, int(count))
            bank.categories[obj] = category
        except SceneParseError:
            raise
        except (IndexError, ValueError) as exc:
            raise SceneParseError(f"malformed geometry bank entry: {exc}", line=line_no) from None
    return bank


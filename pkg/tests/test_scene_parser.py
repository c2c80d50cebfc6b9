import json

import numpy as np
import pytest

from core.errors import SceneParseError
from core.geometry import Box
from core.geometry_bank import BankEntry, GeometryBank, fit_geometry_bank
from core.ingest_utils import load_scene_folder
from core.scene_parser import (EditPairRecord, SceneDocument, SceneParser, dump_geometry_bank, dump_scenes,
                               parse_geometry_bank, scene_record)
from core.scene_world import Triplet, with_action
from tests.conftest import get_sample_path


def test_parse_sample_scenes_from_yaml():
    doc = SceneParser.from_file(get_sample_path())
    assert isinstance(doc, SceneDocument)
    assert len(doc.scenes) == 2 and not doc.pairs

    first = doc.scenes[0]
    assert first.grid == (16, 16) and first.background == 0
    assert first.triplets() == [Triplet("person", "hold", "cup")]
    assert first.instances[0].subject_box == Box(0.125, 0.125, 0.375, 0.625)
    assert first.instances[0].object_color == 4

    bench = doc.scenes[1].instances[1]
    assert bench.object_only
    assert bench.triplet == Triplet(None, None, "bench")


def test_parse_accepts_json_and_dicts(sample_scenes):
    data = {"version": 1, "scenes": [scene_record(s) for s in sample_scenes]}
    assert SceneParser.parse(json.dumps(data)).scenes == sample_scenes
    assert SceneParser.parse(data).scenes == sample_scenes


def test_dump_then_parse_keeps_scenes_and_pairs(sample_scenes):
    edited = with_action(sample_scenes[0], 0, "kick")
    pair = EditPairRecord(sample_scenes[0], edited, {"subject_box": Box(0.125, 0.125, 0.375, 0.625),
                                                     "object_box": None})
    doc = SceneParser.parse(dump_scenes(sample_scenes, [pair]))
    assert doc.scenes == sample_scenes
    assert doc.pairs[0].target.instances[0].action == "kick"
    assert doc.pairs[0].detected == {"subject_box": Box(0.125, 0.125, 0.375, 0.625), "object_box": None}


def test_load_scene_folder_merges_files_in_path_order(tmp_path, sample_scenes):
    (tmp_path / "b.yaml").write_text(dump_scenes(sample_scenes[:1]))
    nested = tmp_path / "more"
    nested.mkdir()
    (nested / "a.json").write_text(json.dumps({"version": 1, "scenes": [scene_record(sample_scenes[1])]}))
    doc = load_scene_folder(tmp_path)
    assert doc.scenes == [sample_scenes[0], sample_scenes[1]]
    assert load_scene_folder(tmp_path / "missing").scenes == []


def test_geometry_bank_text_round_trip():
    samples = [(("hold", "cup"), Box(0.1, 0.1, 0.3, 0.6), Box(0.25, 0.3, 0.4, 0.45)),
               (("hold", "cup"), Box(0.5, 0.2, 0.7, 0.8), Box(0.6, 0.4, 0.8, 0.6)),
               (("hold", "cup"), Box(0.2, 0.2, 0.35, 0.5), Box(0.3, 0.3, 0.4, 0.4)),
               (("ride", "bicycle"), Box(0.2, 0.1, 0.4, 0.5), Box(0.1, 0.3, 0.6, 0.7))]
    bank = fit_geometry_bank(samples)
    text = dump_geometry_bank(bank)
    assert text.startswith("rdit-geometry-bank 1\n")
    parsed = parse_geometry_bank(text)
    entry, back = bank.entries[("hold", "cup")], parsed.entries[("hold", "cup")]
    assert np.array_equal(entry.mean, back.mean)
    assert np.array_equal(entry.cov, back.cov)
    assert back.count == 3
    assert parsed.unfit == {("ride", "bicycle"): 1}
    assert parsed.category("cup") == "small"


def test_geometry_bank_errors_carry_line_numbers():
    with pytest.raises(SceneParseError) as excinfo:
        parse_geometry_bank("hold cup 3 small 0.1\n")
    assert excinfo.value.line == 1
    good = dump_geometry_bank(GeometryBank({("hold", "cup"): BankEntry(np.zeros(5), np.eye(5), 4)}))
    with pytest.raises(SceneParseError) as excinfo:
        parse_geometry_bank(good + "hold ball 3 small 0.1 0.2\n")
    assert excinfo.value.line == 3
    assert "expected 24 fields" in str(excinfo.value)
    with pytest.raises(SceneParseError) as excinfo:
        parse_geometry_bank("rdit-geometry-bank 2\n")
    assert "version" in str(excinfo.value)

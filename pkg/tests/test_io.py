import json

import numpy as np
import pytest

from norcal import io as nio
from norcal.calib import CalibrationConfig, calibrate_dataset
from norcal.core import ClassTable, ValidationError
from norcal.evaluation import evaluate
from norcal.synth import SynthParams, gen_scenario
from norcal.tune import sweep_gamma

from conftest import make_gt


@pytest.fixture(scope="module")
def scenario():
    return gen_scenario(SynthParams(n_classes=20, n_images=15, seed=2))


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_ground_truth_roundtrip(tmp_path, scenario):
    gt = scenario[0]
    nio.save_ground_truth(gt, tmp_path / "gt.json")
    assert nio.load_ground_truth(tmp_path / "gt.json") == gt


def test_ground_truth_errors(tmp_path):
    base = {"images": [{"id": 1}], "categories": [{"id": 1}], "annotations": [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]}]}
    assert len(nio.load_ground_truth(write(tmp_path / "a.json", base)).annotations) == 1

    bad = json.loads(json.dumps(base))
    del bad["annotations"][0]["bbox"]
    with pytest.raises(ValidationError, match=r"\$\.annotations\[0\]\.bbox"):
        nio.load_ground_truth(write(tmp_path / "b.json", bad))

    bad = json.loads(json.dumps(base))
    bad["annotations"][0]["image_id"] = 99
    with pytest.raises(ValidationError, match="dangling image_id: 99"):
        nio.load_ground_truth(write(tmp_path / "c.json", bad))

    (tmp_path / "d.json").write_text("{nope")
    with pytest.raises(ValidationError, match="invalid JSON"):
        nio.load_ground_truth(tmp_path / "d.json")


def test_iscrowd_is_ignore(tmp_path):
    doc = {"images": [{"id": 1}], "categories": [{"id": 1}], "annotations": [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "iscrowd": 1}]}
    assert nio.load_ground_truth(write(tmp_path / "a.json", doc)).annotations[0].ignore


def test_class_table_roundtrip(tmp_path):
    t = ClassTable.from_counts({1: 0, 4: 5, 9: 200}, rare_max=5, common_max=50)
    nio.save_class_table(t, tmp_path / "t.json")
    assert nio.load_class_table(tmp_path / "t.json") == t
    buckets = [c["bucket"] for c in json.loads((tmp_path / "t.json").read_text())["classes"]]
    assert buckets == ["unseen", "rare", "frequent"]


def test_logit_dump_roundtrip(tmp_path, scenario):
    _, table, dump = scenario
    nio.save_logit_dump(dump, tmp_path / "d.jsonl", table.class_ids)
    kind, back = nio.load_logit_dump(tmp_path / "d.jsonl", table)
    assert kind == dump.kind
    np.testing.assert_array_equal(back.logits, dump.logits)
    np.testing.assert_array_equal(back.boxes, dump.boxes)


def test_logit_dump_errors(tmp_path, scenario):
    _, table, _ = scenario
    p = tmp_path / "d.jsonl"
    p.write_text('{"kind": "softmax_bg", "n_classes": 2}\n'
                 '{"image_id": 1, "proposal_id": 0, "bbox": [0,0,1,1], "logits": [0, 1, 2]}\n'
                 '{"image_id": 1, "proposal_id": 1, "bbox": [0,0,1,1], "logits": [0, 1]}\n')
    with pytest.raises(ValidationError, match=r":3: expected 3 logits"):
        nio.load_logit_dump(p)
    with pytest.raises(ValidationError, match="class table has"):
        nio.load_logit_dump(p, table)
    p.write_text('{"kind": "other", "n_classes": 2}\n')
    with pytest.raises(ValidationError, match=":1:"):
        nio.load_logit_dump(p)
    p.write_text('{"kind": "multi_binary", "n_classes": 2}\n{"image_id": 1}\n')
    with pytest.raises(ValidationError, match=":2: malformed"):
        nio.load_logit_dump(p)


def test_factor_table(tmp_path):
    t = ClassTable.from_counts({1: 1, 2: 2})
    p = tmp_path / "f.csv"
    p.write_text("class_id,factor\n# comment\n1,1.5\n\n2,3\n")
    assert nio.load_factor_table(p, t).a == pytest.approx({1: 1.5, 2: 3.0})
    p.write_text("1;2\n")
    with pytest.raises(ValidationError, match=":1:"):
        nio.load_factor_table(p, t)


def test_results_roundtrip_exact(tmp_path, scenario):
    _, table, dump = scenario
    d = calibrate_dataset(dump, table, CalibrationConfig(gamma=0.3))
    nio.write_results(d, tmp_path / "r.json")
    back = nio.load_results(tmp_path / "r.json")
    np.testing.assert_array_equal(back.scores, d.scores)
    np.testing.assert_array_equal(back.proposal_ids, d.proposal_ids)
    nio.write_results([], tmp_path / "e.json")
    assert len(nio.load_results(tmp_path / "e.json")) == 0


def test_results_errors(tmp_path):
    write(tmp_path / "r.json", [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1],
                                 "score": -1}])
    with pytest.raises(ValidationError, match=r"\$\[0\]\.score"):
        nio.load_results(tmp_path / "r.json")
    write(tmp_path / "r.json", {"a": 1})
    with pytest.raises(ValidationError):
        nio.load_results(tmp_path / "r.json")


def test_report_formats(tmp_path, scenario):
    gt, table, dump = scenario
    rep = evaluate(calibrate_dataset(dump, table, CalibrationConfig()), gt, table)
    nio.write_report(rep, tmp_path / "r.json", header={"cmd": "x"})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["header"] == {"cmd": "x"}
    back = nio.load_report(tmp_path / "r.json")
    assert back.ap_overall == pytest.approx(rep.ap_overall, rel=1e-5)

    nio.write_report(rep, tmp_path / "r.csv", "csv", {"cmd": "x"}, table)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# cmd: x"
    assert lines[1].startswith("scope,class_id,bucket,ap")
    assert [l.split(",")[0] for l in lines[-4:]] == ["overall", "rare", "common", "frequent"]

    sweep = sweep_gamma(dump, gt, table, CalibrationConfig(), [0.5])
    nio.write_report(sweep, tmp_path / "s.csv", "csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0].startswith("gamma,ap") and len(rows) == 3
    with pytest.raises(ValidationError):
        nio.write_report(rep, tmp_path / "x", "xml")


def test_undefined_metrics_serialize_as_null(tmp_path):
    gt = make_gt([(1, 1, (0, 0, 5, 5))], classes=(1, 2))
    t = ClassTable.from_counts({1: 500, 2: 500})
    nio.write_report(evaluate([], gt, t), tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["summary"]["ap_rare"] is None
    assert doc["per_class"][1]["ap"] is None

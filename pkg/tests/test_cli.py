import json
import sys

import numpy as np
import pytest

from owlst import cli, store
from owlst.label_space import QuerySet
from owlst.store import Stage

from .test_annotate import ECHO_ANNOTATOR


@pytest.fixture()
def dataset(tmp_path, capsys):
    data = tmp_path / "ds"
    assert cli.main(["sim", "run", "--scenes", "30", "--size", "48", "--out", str(data), "--shards", "3"]) == 0
    capsys.readouterr()
    return data


def _report(capsys, stream="out"):
    out, err = capsys.readouterr()
    text = out if stream == "out" else err
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


def test_full_pipeline(dataset, capsys, tmp_path):
    assert cli.main(["queries", "ngram", "--data", str(dataset), "--negatives", "2"]) == 0
    rep = _report(capsys)
    assert rep["stage"] == "queried" and rep["records_out"] == 30
    qs = list(store.read_stage(dataset, Stage.QUERIED))
    assert all(isinstance(q, QuerySet) and len(q.negatives) == 2 for q in qs)
    assert all(not set(q.negatives) & set(q.queries) for q in qs)

    assert cli.main(["annotate", "--data", str(dataset)]) == 0
    capsys.readouterr()
    assert cli.main(["filter", "--data", str(dataset), "--keep", "0.2", "--gate", "0.5", "--report", str(tmp_path / "r.json")]) == 0
    rep = _report(capsys)
    assert rep == json.loads((tmp_path / "r.json").read_text())
    assert rep["retention"] == 1.0
    m = store.read_manifest(dataset, Stage.FILTERED)
    assert m.config["keep_threshold"] == 0.2 and m.config["image_gate_threshold"] == 0.5

    assert cli.main(["mosaic", "--data", str(dataset), "--image-size", "112"]) == 0
    rep = _report(capsys)
    assert rep["records_out"] >= 1 and 1 <= rep["mean_tiles_per_example"] <= 36

    assert cli.main(["tokens", "stats", "--data", str(dataset), "--image-size", "112"]) == 0
    out, err = capsys.readouterr()
    header, first = out.splitlines()[:2]
    assert header.startswith("id,patches,kept")
    assert first.split(",")[1:3] == ["64", "32"]
    assert json.loads(err)["stage"] == "tokens"

    assert cli.main(["eval", "--gt", str(dataset), "--pred", str(dataset)]) == 0
    out, _ = capsys.readouterr()
    assert out.splitlines()[1] == "all,1.000000"

    assert cli.main(["stats", "--data", str(dataset)]) == 0
    stats = json.loads(capsys.readouterr()[0])
    assert set(stats["stages"]) == {"raw", "gt", "queried", "annotated", "filtered", "mosaic"}


def test_config_file_and_flag_override(dataset, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"keep_threshold": 0.05, "image_gate_threshold": 0.6}))
    assert cli.main(["queries", "ngram", "--data", str(dataset)]) == 0
    assert cli.main(["annotate", "--data", str(dataset)]) == 0
    assert cli.main(["filter", "--data", str(dataset), "--config", str(cfg), "--gate", "0.7"]) == 0
    capsys.readouterr()
    m = store.read_manifest(dataset, Stage.FILTERED)
    assert (m.config["keep_threshold"], m.config["image_gate_threshold"]) == (0.05, 0.7)


def test_external_annotator_command(dataset, capsys, tmp_path):
    script = tmp_path / "echo.py"
    script.write_text(ECHO_ANNOTATOR)
    assert cli.main(["queries", "ngram", "--data", str(dataset)]) == 0
    cmd = f"{sys.executable} {script}"
    assert cli.main(["annotate", "--data", str(dataset), "--annotator", "extern", "--extern-cmd", cmd, "--jobs", "2"]) == 0
    capsys.readouterr()
    annos = list(store.read_stage(dataset, Stage.ANNOTATED))
    assert len(annos) == 30 and all(len(a.annotations) == 1 for a in annos)


def test_exit_codes(dataset, capsys, tmp_path):
    # Missing upstream stage and bad config are usage errors.
    assert cli.main(["filter", "--data", str(dataset)]) == 2
    assert cli.main(["filter", "--data", str(dataset), "--keep", "0.9", "--gate", "0.1"]) == 2
    assert cli.main(["annotate", "--data", str(dataset), "--annotator", "extern"]) == 2
    assert cli.main(["eval", "--gt", str(tmp_path / "nope"), "--pred", str(dataset)]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 2
    # Corrupted shard is a data error.
    shard = store.shard_path(dataset, Stage.RAW, 0)
    data = bytearray(shard.read_bytes())
    data[40] ^= 0xFF
    shard.write_bytes(bytes(data))
    assert cli.main(["queries", "ngram", "--data", str(dataset)]) == 1
    assert "CRC" in capsys.readouterr()[1]


def test_caption_vocab_and_lr_curve(tmp_path, capsys):
    assert cli.main(["queries", "ngram", "--caption", "a photo of a red dog"]) == 0
    assert "red dog" in json.loads(capsys.readouterr()[0])

    (tmp_path / "a.txt").write_text("Dog\nbus\n")
    (tmp_path / "b.txt").write_text("dogs\nbuses\ncat\n")
    assert cli.main(["vocab", "merge", str(tmp_path / "a.txt"), str(tmp_path / "b.txt"), "-o", str(tmp_path / "v.txt")]) == 0
    assert (tmp_path / "v.txt").read_text().split() == ["bus", "cat", "dog"]
    assert json.loads(capsys.readouterr()[0])["records_out"] == 3

    assert cli.main(["lr-curve", "--peak-lr", "1e-3", "--timescale", "100", "--steps", "400", "--every", "100",
                     "--cooldown-start", "300", "--cooldown-steps", "100"]) == 0
    out, err = capsys.readouterr()
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert [float(r[1]) for r in rows] == pytest.approx([1e-3, 1e-3, 1e-3 * np.sqrt(0.5), 1e-3 * np.sqrt(1 / 3), 0.0])
    assert json.loads(err)["stage"] == "lr-curve"

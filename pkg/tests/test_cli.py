import json
import xml.etree.ElementTree as ET
from pathlib import Path

from gridtext.cli import main, render_page_svg


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_byte_identical(tmp_path, capsys):
    args = ["synth", "--pages", "2", "--layout", "sine", "--seed", "7",
            "--lines", "2", "--chars", "4", "--n-cls", "10"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out_a = json.loads(capsys.readouterr().out)
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    out_b = json.loads(capsys.readouterr().out)
    for doc in (out_a, out_b):  # drop the fields that embed the out dir
        doc.pop("annotations", None)
        doc.pop("maps", None)
    assert out_a == out_b
    ta, tb = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert ta.keys() == tb.keys()
    for name in ta:
        if name != "manifest.json":  # manifest embeds the out dir path
            assert ta[name] == tb[name], name


def test_decode_eval_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--pages", "3", "--seed", "5", "--lines", "3",
                 "--chars", "6", "--n-cls", "20", "--out", str(data)]) == 0
    capsys.readouterr()
    results = tmp_path / "results.jsonl"
    assert main(["decode", "--maps-dir", str(data / "maps"),
                 "--out", str(results)]) == 0
    capsys.readouterr()
    assert main(["eval", "--results", str(results),
                 "--annotations", str(data / "annotations.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ar_star"] == 1.0
    assert report["cr_star"] == 1.0
    assert report["det_only"] == {"p": 1.0, "r": 1.0, "f": 1.0}
    assert report["det_cls"] == {"p": 1.0, "r": 1.0, "f": 1.0}
    assert {p["ar_star"] for p in report["per_page"]} == {1.0}


def test_eval_hand_fixture(tmp_path, capsys):
    results = tmp_path / "results.jsonl"
    annots = tmp_path / "annotations.jsonl"
    chars = [
        {"i": k + 1, "j": 1, "x": 10.0 * (k + 1), "y": 10.0, "w": 0.1, "h": 0.1,
         "cls": c, "score": 0.9}
        for k, c in enumerate([1, 2, 3])
    ]
    extra = [
        {"i": k + 1, "j": 3, "x": 10.0 * (k + 1), "y": 30.0, "w": 0.1, "h": 0.1,
         "cls": c, "score": 0.9}
        for k, c in enumerate([4, 5])
    ]
    results.write_text(json.dumps({
        "page_id": "pg", "img_w": 64, "img_h": 64,
        "lines": [
            {"chars": chars, "sol_conf": 1.0, "eol_conf": 1.0},
            {"chars": extra, "sol_conf": 1.0, "eol_conf": 1.0},
        ],
    }) + "\n")
    annots.write_text(json.dumps({"page_id": "pg", "lines": [[1, 2, 3]]}) + "\n")
    assert main(["eval", "--results", str(results), "--annotations", str(annots)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["ar_star"] - 1 / 3) < 1e-12
    assert report["cr_star"] == 1.0


def test_train_sim_and_export(tmp_path, capsys):
    config = {
        "seed": 4,
        "pages": 3,
        "dataset": {"n_lines": 2, "chars_per_line": 4, "n_cls": 10},
        "stages": [
            {"stage": "initialize", "n_passes": 1, "real_prob": 1.0},
            {"stage": "train", "n_passes": 2, "real_prob": 1.0,
             "noise": {"jitter_sigma": 0.05}},
        ],
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    out = tmp_path / "run"
    assert main(["train-sim", "--config", str(cfg_path), "--out", str(out)]) == 0
    quality = json.loads(capsys.readouterr().out)
    assert quality["coverage"] == 1.0
    reports = [json.loads(l) for l in (out / "pass_reports.jsonl").read_text().splitlines()]
    assert len(reports) == 3
    assert reports[0]["losses"] is None  # initialize pass
    assert reports[-1]["losses"] is not None
    assert (out / "store.jsonl").exists()
    assert (out / "labels.jsonl").exists()

    assert main(["export-labels", "--store", str(out / "store.jsonl"),
                 "--config", str(cfg_path),
                 "--out", str(tmp_path / "labels.jsonl")]) == 0
    exported = json.loads(capsys.readouterr().out)
    assert exported["coverage"] == 1.0
    assert (tmp_path / "labels.jsonl").read_text() == (out / "labels.jsonl").read_text()


def test_viz_svg_well_formed(tmp_path, capsys):
    data = tmp_path / "data"
    main(["synth", "--pages", "1", "--seed", "2", "--lines", "1", "--chars", "4",
          "--n-cls", "5", "--out", str(data)])
    capsys.readouterr()
    results = tmp_path / "results.jsonl"
    main(["decode", "--maps-dir", str(data / "maps"), "--out", str(results)])
    capsys.readouterr()
    svg_path = tmp_path / "page.svg"
    assert main(["viz", "--results", str(results), "--out", str(svg_path)]) == 0
    root = ET.fromstring(svg_path.read_text())
    assert root.tag.endswith("svg")
    tags = [el.tag.split("}")[-1] for el in root.iter()]
    assert tags.count("polyline") == 1
    assert tags.count("rect") == 4
    assert tags.count("circle") == 2


def test_viz_empty_page_valid_svg():
    svg = render_page_svg({"img_w": 100, "img_h": 100, "lines": []})
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len(list(root)) == 0


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1  # no command: usage error
    assert main(["decode"]) == 2  # no inputs: data error
    assert main(["decode", "--maps", str(tmp_path / "missing.pgnm")]) == 2
    bad = tmp_path / "bad.pgnm"
    bad.write_bytes(b"garbage-not-a-map-file")
    assert main(["decode", "--maps", str(bad)]) == 2
    capsys.readouterr()


def test_decode_deterministic_output(tmp_path, capsys):
    data = tmp_path / "d"
    main(["synth", "--pages", "1", "--seed", "3", "--lines", "2", "--chars", "5",
          "--n-cls", "10", "--out", str(data), "--jitter-sigma", "0.1"])
    capsys.readouterr()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["decode", "--maps-dir", str(data / "maps"), "--out", str(a)])
    main(["decode", "--maps-dir", str(data / "maps"), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()

import json

import numpy as np
import pytest

from cacgan.cli import build_parser, main
from cacgan.volume import read_volume


def dump(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_parser_lists_every_subcommand():
    names = set(build_parser()._subparsers._group_actions[0].choices)
    assert names == {"phantom", "train-heartseg", "train-classifier", "train-cyclegan", "segment", "classify",
                     "decompose", "score", "evaluate", "report", "pipeline"}


def test_cli_end_to_end(workdir, capsys):
    d = workdir
    assert main(["phantom", "generate", "--out", str(d / "ph"), "--pairs", "2", "--seed", "3"]) == 0
    scans = json.loads((d / "ph" / "scans.json").read_text())
    assert len(scans) == 4 and (d / "ph" / "p000_lesions.csv").exists()
    assert main(["phantom", "slices", "--out", str(d / "sl"), "--phantoms", "3", "--side", "40"]) == 0

    hs = dump(d / "hs.json", {"widths": [2, 4, 4], "n_blocks": 1, "patch": [32, 32, 16], "batch": 1, "iterations": 2})
    main(["train-heartseg", "--config", hs, "--data", str(d / "ph" / "scans.json"), "--out", str(d / "m_hs"),
          "--seed", "1"])
    cl = dump(d / "cl.json", {"widths": [2, 4, 4], "n_blocks": 1, "side": 40, "batch": 4, "iterations": 2})
    main(["train-classifier", "--config", cl, "--data", str(d / "sl" / "manifest.json"), "--out", str(d / "m_cl")])
    gn = dump(d / "gn.json", {"gen_widths": [2, 4, 4], "gen_blocks": 1, "disc_base": 4, "disc_layers": 2, "side": 32,
                              "crop_jitter": 4, "batch": 2, "iterations": 2, "log_every": 1})
    main(["train-cyclegan", "--config", gn, "--data", str(d / "sl" / "manifest.json"), "--out", str(d / "m_gan")])
    assert len(json.loads((d / "m_gan" / "history.json").read_text())) == 2

    img = scans[0]["image"]
    heart = img.replace(".vol", "_heart.vol")
    main(["segment", "--model", str(d / "m_hs"), "--in", img, "--out", str(d / "mask.vol")])
    assert read_volume(d / "mask.vol").shape == read_volume(img).shape
    main(["classify", "--model", str(d / "m_cl"), "--in", img, "--heart", heart, "--out", str(d / "flags.json")])
    flags = json.loads((d / "flags.json").read_text())
    assert flags and all(isinstance(v, bool) for v in flags.values())
    main(["decompose", "--model", str(d / "m_gan"), "--in", img, "--heart", heart, "--side", "64",
          "--out", str(d / "map.vol")])
    cmap = read_volume(d / "map.vol")
    assert cmap.data.dtype == np.float32 and cmap.data.min() >= 0
    main(["score", "--map", str(d / "map.vol"), "--image", img, "--roi", heart, "--out", str(d / "rec.json")])
    rec = json.loads((d / "rec.json").read_text())
    assert {"pseudo_mass", "adjusted_agatston", "conventional_agatston", "risk_category", "arteries"} <= set(rec)

    pc = dump(d / "pc.json", {"heartseg_checkpoint": str(d / "m_hs"), "classifier_checkpoint": str(d / "m_cl"),
                              "cyclegan_checkpoint": str(d / "m_gan"), "side": 64})
    for run in ("run1", "run2"):
        assert main(["pipeline", "--config", pc, "--scans", str(d / "ph" / "scans.json"), "--out", str(d / run),
                     "--seed", "0"]) == 0
        main(["report", "--manifest", str(d / run / "manifest.json"), "--out", str(d / run / "rep")])
    assert (d / "run1" / "rep" / "report.json").read_bytes() == (d / "run2" / "rep" / "report.json").read_bytes()
    main(["evaluate", "--pairs", str(d / "run1" / "rep" / "pairs.csv"), "--out", str(d / "eval.json"),
          "--plots", str(d / "plots")])
    ev = json.loads((d / "eval.json").read_text())
    assert {"proposed_pseudo_mass", "baseline_pseudo_mass"} <= set(ev)
    assert "scored 4 scans" in capsys.readouterr().out


def test_pipeline_missing_checkpoint_fails(tmp_path):
    pc = dump(tmp_path / "pc.json", {"cyclegan_checkpoint": str(tmp_path / "none")})
    scans = dump(tmp_path / "s.json", [])
    with pytest.raises(FileNotFoundError):
        main(["pipeline", "--config", pc, "--scans", scans, "--out", str(tmp_path / "o")])

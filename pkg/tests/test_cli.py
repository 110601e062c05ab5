import os

import cv2
import numpy as np
import pytest

import evomap.cli as cli
from evomap.dataset import generate
from evomap.mapper import MappingDivergence
from evomap.scenes import static_room

FAST_SETS = ["--set", "seed_iters=6", "--set", "map_iters=6",
             "--set", "remove_window_iters=6", "--set",
             "final_refine_iters=10"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    script = static_room()
    script.trajectory = script.trajectory[:5]
    ds = str(root / "ds")
    generate(script, ds)
    run = str(root / "run")
    rc = cli.main(["map", "--dataset", ds, "--out", run] + FAST_SETS)
    assert rc == 0
    return root, ds, run


def test_map_artifacts(workspace):
    _, _, run = workspace
    for name in ("map.evomap", "conflicts.jsonl", "config.txt",
                 "checkpoints"):
        assert os.path.exists(os.path.join(run, name))
    cfg_text = open(os.path.join(run, "config.txt")).read()
    assert "seed_iters = 6" in cfg_text


def test_render_writes_images(workspace):
    root, ds, run = workspace
    out = str(root / "views")
    rc = cli.main(["render", "--map", os.path.join(run, "map.evomap"),
                   "--dataset", ds, "--frame-id", "2", "--out", out])
    assert rc == 0
    color = cv2.imread(os.path.join(out, "render_000002_color.png"))
    depth = cv2.imread(os.path.join(out, "render_000002_depth.png"),
                       cv2.IMREAD_UNCHANGED)
    assert color.shape == (90, 120, 3)
    assert depth.dtype == np.uint16
    assert depth.max() > 0


def test_render_rejects_bad_frame_id(workspace, capsys):
    root, ds, run = workspace
    rc = cli.main(["render", "--map", os.path.join(run, "map.evomap"),
                   "--dataset", ds, "--frame-id", "99",
                   "--out", str(root / "v2")])
    assert rc == 2
    assert "frame id" in capsys.readouterr().err


def test_eval_to_file_and_stdout(workspace, capsys):
    root, ds, run = workspace
    report = str(root / "report.txt")
    rc = cli.main(["eval", "--map", os.path.join(run, "map.evomap"),
                   "--dataset", ds, "--out", report])
    assert rc == 0
    text = open(report).read()
    assert "input.psnr = " in text
    assert "novel.lpips = unavailable" in text
    assert "view" not in text

    rc = cli.main(["eval", "--map", os.path.join(run, "map.evomap"),
                   "--dataset", ds, "--per-view"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "input.view" in out


def test_generate_rejects_unknown_scene(tmp_path, capsys):
    rc = cli.main(["generate", "--scene", "atlantis",
                   "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "unknown scene" in capsys.readouterr().err


def test_generate_seed_lands_in_script(tmp_path):
    out = str(tmp_path / "ds2")
    rc = cli.main(["generate", "--scene", "two_room", "--out", out,
                   "--seed", "42"])
    assert rc == 0
    import json
    assert json.load(open(os.path.join(out, "script.json")))["seed"] == 42


def test_bad_arguments_exit_2(workspace, tmp_path, capsys):
    _, ds, _ = workspace
    assert cli.main(["map"]) == 2                       # missing required
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["map", "--dataset", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["map", "--dataset", ds, "--out", str(tmp_path / "o"),
                     "--set", "bogus=1"]) == 2
    capsys.readouterr()


def test_corrupt_map_exits_2(workspace, tmp_path, capsys):
    _, ds, _ = workspace
    fake = tmp_path / "fake.evomap"
    fake.write_bytes(b"garbage bytes")
    rc = cli.main(["eval", "--map", str(fake), "--dataset", ds])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_divergence_exits_3(workspace, monkeypatch, tmp_path, capsys):
    _, ds, _ = workspace
    def boom(*a, **k):
        raise MappingDivergence(4)
    monkeypatch.setattr(cli, "run_mapping", boom)
    rc = cli.main(["map", "--dataset", ds, "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "step 4" in capsys.readouterr().err


def test_ablate_writes_comparison_table(workspace, monkeypatch, tmp_path):
    _, ds, _ = workspace
    monkeypatch.setattr(cli, "_ABLATION_ARMS",
                        (("full", {}), ("dsa_off", {"dsa": "off"})))
    out = str(tmp_path / "abl")
    rc = cli.main(["ablate", "--dataset", ds, "--out", out] + FAST_SETS)
    assert rc == 0
    table = open(os.path.join(out, "ablation.txt")).read().splitlines()
    assert table[0].startswith("arm")
    assert len(table) == 3
    assert table[1].startswith("full")
    assert table[2].startswith("dsa_off")
    for arm in ("full", "dsa_off"):
        assert os.path.exists(os.path.join(out, arm, "map.evomap"))
        assert os.path.exists(os.path.join(out, arm, "report.txt"))

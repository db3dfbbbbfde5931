import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opendet import autodiff as ad
from opendet import cli
from opendet import config as cf
from opendet import evalmetrics as em
from opendet.errors import ConfigError

TINY_TEXT = """\
# small enough for a few seconds per command
data.n_train = 3
data.n_eval = 2
scene.views = 2
scene.channels = 4
scene.height = 4
scene.width = 6
scene.min_boxes = 1
scene.max_boxes = 2
depth.bins = 4
ode.k = 3
ode.embed_dim = 4
ode.hidden = 8
pe.dim_per_axis = 4
pe.ray_candidates = 2
decoder.layers = 2
decoder.queries = 4
decoder.dim = 8
decoder.ffn_dim = 8
"""


def test_defaults_match_published_hyperparameters():
    cfg = cf.RunConfig()
    assert (cfg.ode_k, cfg.loss_alpha, cfg.loss_gamma) == (13, 0.25, 2.0)
    assert (cfg.loss_pde, cfg.loss_ode, cfg.loss_dfl, cfg.loss_reg) == (1.0, 5.0, 2.0, 0.25)


def test_round_trip_defaults_and_tiny():
    for cfg in (cf.RunConfig(), cf.parse_config(TINY_TEXT)):
        assert cf.parse_config(cf.serialize_config(cfg)) == cfg


@given(st.floats(1e-6, 1.0), st.integers(0, 2**31), st.sampled_from(["ray", "point", "object"]))
def test_round_trip_property(lr, seed, variant):
    cfg = cf.RunConfig(optim_lr=lr, seed=seed, pe_variant=variant)
    assert cf.parse_config(cf.serialize_config(cfg)) == cfg


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        cf.parse_config("decoder.layer = 3")
    with pytest.raises(ConfigError):
        cf.parse_config("decoder.layers = three")
    with pytest.raises(ConfigError):
        cf.parse_config("just a line")
    with pytest.raises(ConfigError):
        cf.parse_config("pe.variant = learned")
    with pytest.raises(ConfigError):
        cf.parse_config("decoder.queries = 2")


def test_dotted_names():
    assert cf.dotted("decoder_ffn_dim") == "decoder.ffn_dim"
    assert cf.dotted("seed") == "seed"


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_TEXT)
    assert cli.main(["gen", "--config", str(root / "tiny.cfg"), "--out", str(root / "ds.bin"), "--quiet"]) == 0
    return root


def run_cli(*args):
    return cli.main([str(a) for a in args] + ["--quiet"])


def test_train_writes_run_directory(workspace):
    out = workspace / "run"
    assert run_cli("train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin",
                   "--out", out) == 0
    names = set(os.listdir(out))
    assert {"checkpoint.bin", "report.csv", "config.cfg", "manifest.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["pe.variant"] == "object"
    assert len(manifest["dataset_sha1"]) == 40
    assert manifest["wall_clock_s"] > 0 and "translation_error@>0" in manifest["metrics"]
    assert cf.load_config(out / "config.cfg") == cf.parse_config(TINY_TEXT)


def test_manifest_replay_is_bit_identical(workspace):
    first, second = workspace / "replay-a", workspace / "replay-b"
    run_cli("train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin", "--out", first)
    run_cli("train", "--config", first / "manifest.json", "--dataset", workspace / "ds.bin", "--out", second)
    for name in ("checkpoint.bin", "report.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((second / "manifest.json").read_text())
    assert m1["metrics"] == m2["metrics"]


def test_seed_flag_overrides_config(workspace):
    out = workspace / "seed7"
    run_cli("train", "--config", workspace / "tiny.cfg", "--seed", 7, "--dataset", workspace / "ds.bin",
            "--out", out)
    assert json.loads((out / "manifest.json").read_text())["config"]["seed"] == 7


def test_eval_and_dump_attention(workspace):
    run = workspace / "run-eval"
    run_cli("train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin", "--out", run)
    report = workspace / "reports" / "eval.csv"
    assert run_cli("eval", "--checkpoint", run / "checkpoint.bin", "--dataset", workspace / "ds.bin",
                   "--out", report) == 0
    assert report.read_text() == (run / "report.csv").read_text()
    assert any(n.endswith(".svg") for n in os.listdir(report.parent))
    attn = workspace / "attn.csv"
    assert run_cli("dump-attn", "--checkpoint", run / "checkpoint.bin", "--dataset", workspace / "ds.bin",
                   "--out", attn) == 0
    rows = attn.read_text().splitlines()
    assert rows[0] == "query,view,row,col,weight" and len(rows) == 1 + 4 * 2 * 4 * 6
    weights = np.array([float(r.split(",")[-1]) for r in rows[1:]]).reshape(4, -1)
    assert np.allclose(weights.sum(1), 1.0)


def test_compare_pe_controls_variables(workspace):
    out = workspace / "cmp"
    assert run_cli("compare-pe", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin",
                   "--out", out, "--seeds", "0,1") == 0
    configs = {}
    for variant in ("ray", "point", "object"):
        for seed in (0, 1):
            m = json.loads((out / f"{variant}-seed{seed}" / "manifest.json").read_text())
            configs[(variant, seed)] = m["config"]
    for (variant, seed), c in configs.items():
        diff = {k for k in c if c[k] != configs[("object", seed)][k]}
        assert diff <= {"pe.variant"} and (diff == set()) == (variant == "object")
    table = (out / "comparison.csv").read_text().splitlines()
    assert {line.split(",")[0] for line in table[1:]} == {"ray", "point", "object"}
    assert (out / "translation_error_gt0.svg").exists()

    plots = workspace / "plots"
    assert run_cli("plot", out / "ray-seed0" / "report.csv", out / "object-seed0" / "report.csv",
                   "--out", plots) == 0
    assert (plots / "center_ap_gt0.svg").exists()


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_errors_exit_nonzero_with_json(workspace, capsys):
    assert run_cli("train", "--dataset", workspace / "missing.bin", "--out", workspace / "x") == 1
    assert error_line(capsys)["error"] == "FileNotFoundError"

    bad = workspace / "bad.cfg"
    bad.write_text("decoder.layres = 2\n")
    assert run_cli("gen", "--config", bad, "--out", workspace / "y.bin") == 1
    msg = error_line(capsys)
    assert msg["error"] == "ConfigError" and "decoder.layres" in msg["message"]

    # the default config wants 4 views at 16 x 32; the tiny dataset does not fit
    assert run_cli("train", "--dataset", workspace / "ds.bin", "--out", workspace / "z") == 1
    assert error_line(capsys)["error"] == "ShapeError"

    broken = workspace / "broken.bin"
    broken.write_bytes((workspace / "ds.bin").read_bytes()[:100])
    assert run_cli("train", "--config", workspace / "tiny.cfg", "--dataset", broken, "--out", workspace / "w") == 1
    msg = error_line(capsys)
    assert msg["error"] == "FormatError" and "offset" in msg["message"]

    assert run_cli("compare-pe", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin",
                   "--out", workspace / "v", "--seeds", "a,b") == 1
    assert error_line(capsys)["error"] == "ConfigError"


def test_checkpoint_format(workspace):
    run = workspace / "run"
    if not (run / "checkpoint.bin").exists():
        run_cli("train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "ds.bin", "--out", run)
    params = ad.load_checkpoint(run / "checkpoint.bin")
    assert "dec.query" in params and params["dec.query"].shape == (4, 8)


def test_eval_after_converging_on_one_box(tmp_path):
    """Memorise a single one-box scene, then eval through the CLI: the center must land within the AP radius."""
    from opendet import pipeline
    from opendet import synthscene as ss

    text = ("data.n_train = 8\ndata.n_eval = 1\nscene.min_boxes = 1\nscene.max_boxes = 1\n"
            "scene.height = 8\nscene.width = 16\ndecoder.queries = 8\ntrain.epochs = 10\n")
    (tmp_path / "one.cfg").write_text(text)
    cfg = cf.parse_config(text)
    scfg = pipeline.scene_config(cfg)
    scene = ss.generate_dataset(scfg, 5, 1, workers=1)[0]
    ss.write_dataset(ss.dataset_from_scenes(scfg, [scene] * 9), tmp_path / "one.bin")

    assert run_cli("train", "--config", tmp_path / "one.cfg", "--dataset", tmp_path / "one.bin",
                   "--out", tmp_path / "run") == 0
    assert run_cli("eval", "--checkpoint", tmp_path / "run" / "checkpoint.bin", "--dataset",
                   tmp_path / "one.bin", "--out", tmp_path / "eval.csv") == 0
    rep = em.read_report_csv(tmp_path / "eval.csv")
    assert rep.get("object", "translation_error", 0.0) < cfg.eval_ap_threshold
